//! Binary cache snapshots.
//!
//! Little-endian throughout:
//!
//! ```text
//! header   "KVTR" | version u16 | B S L N D T (u32 each)
//! per head (sequence-major, then layer, then head):
//!          key mask | value mask            ceil(D/8) bytes each
//!          frozen rows u32 | recent rows u32
//!          key frozen   rows × T_k  f16
//!          key recent   rows × D    f16
//!          value frozen rows × T_v  f16
//!          value recent rows × D    f16
//! ```
//!
//! `S` is the number of cached tokens per head and `T` the kept key width;
//! the kept value width is the popcount of the value mask. Payloads are
//! row-major. Quantized frozen rows are written dequantized.

use std::io::{self, Read, Write};

use half::f16;
use kvtrim_core::attention::HeadCache;
use kvtrim_core::{ChannelMask, Matrix, SegmentedCache};

pub const MAGIC: [u8; 4] = *b"KVTR";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub batch: u32,
    pub tokens: u32,
    pub layers: u32,
    pub heads: u32,
    pub head_dim: u32,
    pub key_kept: u32,
}

impl Header {
    pub fn head_count(&self) -> usize {
        self.batch as usize * self.layers as usize * self.heads as usize
    }
}

/// One head as read back from a snapshot, payloads widened from f16.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSnapshot {
    pub key_mask: ChannelMask,
    pub value_mask: ChannelMask,
    pub key_frozen: Matrix,
    pub key_recent: Matrix,
    pub value_frozen: Matrix,
    pub value_recent: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub header: Header,
    pub heads: Vec<HeadSnapshot>,
}

fn u32_of(n: usize, what: &str) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} {n} does not fit in u32")))
}

fn write_f16(w: &mut impl Write, m: &Matrix) -> io::Result<()> {
    let mut buf = Vec::with_capacity(2 * m.as_slice().len());
    for &x in m.as_slice() {
        buf.extend_from_slice(&f16::from_f64(x).to_le_bytes());
    }
    w.write_all(&buf)
}

fn mask_of(cache: &SegmentedCache) -> ChannelMask {
    cache.mask().cloned().unwrap_or_else(|| ChannelMask::full(cache.dim()))
}

/// Writes `caches` (sequence-major, then layer, then head).
pub fn write(w: &mut impl Write, header: &Header, caches: &[HeadCache]) -> io::Result<()> {
    if caches.len() != header.head_count() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("header describes {} heads, got {}", header.head_count(), caches.len()),
        ));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [header.batch, header.tokens, header.layers, header.heads, header.head_dim, header.key_kept] {
        w.write_all(&v.to_le_bytes())?;
    }
    for c in caches {
        w.write_all(mask_of(&c.keys).as_bytes())?;
        w.write_all(mask_of(&c.values).as_bytes())?;
        w.write_all(&u32_of(c.keys.frozen_len(), "frozen rows")?.to_le_bytes())?;
        w.write_all(&u32_of(c.keys.recent_len(), "recent rows")?.to_le_bytes())?;
        write_f16(w, c.keys.frozen())?;
        write_f16(w, c.keys.recent())?;
        write_f16(w, c.values.frozen())?;
        write_f16(w, c.values.recent())?;
    }
    Ok(())
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f16(r: &mut impl Read, rows: usize, cols: usize) -> io::Result<Matrix> {
    let mut buf = vec![0u8; 2 * rows * cols];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64()).collect();
    Matrix::new(rows, cols, data).map_err(|e| invalid(e.to_string()))
}

fn read_mask(r: &mut impl Read, dim: usize) -> io::Result<ChannelMask> {
    let mut buf = vec![0u8; dim.div_ceil(8)];
    r.read_exact(&mut buf)?;
    ChannelMask::from_bytes(dim, &buf).map_err(|e| invalid(e.to_string()))
}

pub fn read(r: &mut impl Read) -> io::Result<Snapshot> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(invalid("not a KVTR snapshot"));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(invalid(format!("unsupported snapshot version {version}")));
    }
    let header = Header {
        batch: read_u32(r)?,
        tokens: read_u32(r)?,
        layers: read_u32(r)?,
        heads: read_u32(r)?,
        head_dim: read_u32(r)?,
        key_kept: read_u32(r)?,
    };
    let dim = header.head_dim as usize;
    let mut heads = Vec::with_capacity(header.head_count());
    for _ in 0..header.head_count() {
        let key_mask = read_mask(r, dim)?;
        let value_mask = read_mask(r, dim)?;
        if key_mask.kept_count() != header.key_kept as usize {
            return Err(invalid("key mask disagrees with header"));
        }
        let frozen = read_u32(r)? as usize;
        let recent = read_u32(r)? as usize;
        if frozen + recent != header.tokens as usize {
            return Err(invalid("segment lengths disagree with header"));
        }
        heads.push(HeadSnapshot {
            key_frozen: read_f16(r, frozen, key_mask.kept_count())?,
            key_recent: read_f16(r, recent, dim)?,
            value_frozen: read_f16(r, frozen, value_mask.kept_count())?,
            value_recent: read_f16(r, recent, dim)?,
            key_mask,
            value_mask,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(invalid("trailing bytes after last head"));
    }
    Ok(Snapshot { header, heads })
}
