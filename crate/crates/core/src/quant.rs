//! Asymmetric low-bit group quantization of cache blocks.
//!
//! Keys are quantized per channel (groups run down a column, across tokens)
//! and values per token (groups run along a row, across channels). Each group
//! stores `scale = (max - min) / (2^bits - 1)` and `zero_point = min`; codes are
//! `round((x - min) / scale)`. Codes are packed LSB-first into a single byte
//! stream in group order, so the payload is `ceil(elements * bits / 8)` bytes.

use alloc::vec::Vec;

use crate::error::{precondition, Error, Result};
use crate::mask::ChannelMask;
use crate::tensor::{gather_cols, Matrix};

/// Bytes charged per group for the scale and zero point (two f16 values).
pub const GROUP_OVERHEAD_BYTES: usize = 4;
pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantBits {
    Two = 2,
    Four = 4,
}

impl QuantBits {
    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            2 => Ok(QuantBits::Two),
            4 => Ok(QuantBits::Four),
            other => Err(precondition(alloc::format!("unsupported quantization width {other} (2 or 4)"))),
        }
    }

    #[inline]
    pub fn bits(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn max_code(self) -> u8 {
        (1u8 << self.bits()) - 1
    }
}

/// Direction along which quantization groups run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Per-channel: each group is `group_size` consecutive tokens of one channel.
    Channel,
    /// Per-token: each group is `group_size` consecutive channels of one token.
    Token,
}

/// Width and group size shared by every block of one cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: QuantBits,
    pub group_size: usize,
}

/// Low-bit storage for the frozen segments of keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvQuant {
    pub keys: QuantSpec,
    pub values: QuantSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    pub bits: QuantBits,
    pub group_size: usize,
    pub axis: Axis,
    pub rows: usize,
    pub cols: usize,
    pub packed: Vec<u8>,
    pub scales: Vec<f64>,
    pub zero_points: Vec<f64>,
}

/// Number of groups a `rows × cols` block splits into.
pub fn group_count(rows: usize, cols: usize, group_size: usize, axis: Axis) -> usize {
    match axis {
        Axis::Channel => cols * rows.div_ceil(group_size),
        Axis::Token => rows * cols.div_ceil(group_size),
    }
}

/// Packed payload bytes for `elements` codes of width `bits`.
pub fn packed_len(elements: usize, bits: QuantBits) -> usize {
    (elements * bits.bits()).div_ceil(8)
}

/// Bytes a block occupies in storage: payload plus per-group parameters.
pub fn block_bytes(rows: usize, cols: usize, spec: QuantSpec, axis: Axis) -> usize {
    packed_len(rows * cols, spec.bits) + GROUP_OVERHEAD_BYTES * group_count(rows, cols, spec.group_size, axis)
}

impl QuantizedBlock {
    pub fn group_count(&self) -> usize {
        group_count(self.rows, self.cols, self.group_size, self.axis)
    }

    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + GROUP_OVERHEAD_BYTES * self.scales.len()
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.bits, self.rows * self.cols)
    }
}

pub fn pack_codes(codes: &[u8], bits: QuantBits) -> Vec<u8> {
    let b = bits.bits();
    let mut out = alloc::vec![0u8; packed_len(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        let bit = i * b;
        out[bit / 8] |= (c & bits.max_code()) << (bit % 8);
    }
    out
}

pub fn unpack_codes(packed: &[u8], bits: QuantBits, count: usize) -> Vec<u8> {
    let b = bits.bits();
    (0..count).map(|i| (packed[i * b / 8] >> ((i * b) % 8)) & bits.max_code()).collect()
}

/// Element coordinates in storage order: group after group along `axis`.
fn storage_order(rows: usize, cols: usize, axis: Axis) -> impl Iterator<Item = (usize, usize)> {
    let (outer, inner) = match axis {
        Axis::Channel => (cols, rows),
        Axis::Token => (rows, cols),
    };
    (0..outer).flat_map(move |o| {
        (0..inner).map(move |i| match axis {
            Axis::Channel => (i, o),
            Axis::Token => (o, i),
        })
    })
}

pub fn quantize(x: &Matrix, bits: QuantBits, group_size: usize, axis: Axis) -> Result<QuantizedBlock> {
    if group_size == 0 {
        return Err(precondition("group size must be positive"));
    }
    let (rows, cols) = x.shape();
    let elems: Vec<f64> = storage_order(rows, cols, axis).map(|(r, c)| x.get(r, c)).collect();
    let inner = match axis {
        Axis::Channel => rows,
        Axis::Token => cols,
    };
    let levels = f64::from(bits.max_code());
    let mut codes = Vec::with_capacity(elems.len());
    let mut scales = Vec::new();
    let mut zero_points = Vec::new();
    if inner > 0 {
        for line in elems.chunks(inner) {
            // a short tail group is padded with its last element, which leaves
            // min and max unchanged, so only the real elements are scanned
            for group in line.chunks(group_size) {
                let lo = group.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let scale = (hi - lo) / levels;
                if scale > 0.0 {
                    codes.extend(group.iter().map(|&v| libm::round((v - lo) / scale).clamp(0.0, levels) as u8));
                } else {
                    codes.extend(core::iter::repeat_n(0u8, group.len()));
                }
                scales.push(if scale > 0.0 { scale } else { 0.0 });
                zero_points.push(lo);
            }
        }
    }
    Ok(QuantizedBlock { bits, group_size, axis, rows, cols, packed: pack_codes(&codes, bits), scales, zero_points })
}

pub fn dequantize(q: &QuantizedBlock) -> Result<Matrix> {
    let elements = q.rows * q.cols;
    if q.group_size == 0 {
        return Err(Error::Format("zero group size".into()));
    }
    if q.packed.len() != packed_len(elements, q.bits) {
        return Err(Error::Format(alloc::format!(
            "packed payload is {} bytes, expected {}",
            q.packed.len(),
            packed_len(elements, q.bits)
        )));
    }
    let groups = q.group_count();
    if q.scales.len() != groups || q.zero_points.len() != groups {
        return Err(Error::Format(alloc::format!(
            "expected {groups} groups, got {} scales and {} zero points",
            q.scales.len(),
            q.zero_points.len()
        )));
    }
    let inner = match q.axis {
        Axis::Channel => q.rows,
        Axis::Token => q.cols,
    };
    let per_line = inner.div_ceil(q.group_size);
    let codes = unpack_codes(&q.packed, q.bits, elements);
    let mut out = Matrix::zeros(q.rows, q.cols);
    for (n, (r, c)) in storage_order(q.rows, q.cols, q.axis).enumerate() {
        let g = (n / inner) * per_line + (n % inner) / q.group_size;
        out.set(r, c, f64::from(codes[n]) * q.scales[g] + q.zero_points[g]);
    }
    Ok(out)
}

/// Prunes key channels, then quantizes the surviving columns per channel.
pub fn prune_then_quantize(
    keys: &Matrix,
    mask: &ChannelMask,
    bits: QuantBits,
    group_size: usize,
) -> Result<QuantizedBlock> {
    if mask.dim() != keys.cols() {
        return Err(Error::Shape { op: "prune_then_quantize", expected: (keys.rows(), mask.dim()), got: keys.shape() });
    }
    quantize(&gather_cols(keys, &mask.kept_indices())?, bits, group_size, Axis::Channel)
}
