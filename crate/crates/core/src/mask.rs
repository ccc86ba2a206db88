//! Bit-packed kept-channel set, one per (sequence, layer, head).
//!
//! Bit `j % 8` of byte `j / 8` is set when channel `j` is kept, which makes
//! the mask the diagonal of the binary selection matrix. The serialized form
//! is exactly `ceil(dim / 8)` bytes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::check_ascending;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    dim: usize,
    bits: Vec<u8>,
    kept: usize,
}

impl ChannelMask {
    /// Keeps every channel.
    pub fn full(dim: usize) -> Self {
        let mut bits = vec![0xffu8; dim.div_ceil(8)];
        if !dim.is_multiple_of(8) {
            if let Some(last) = bits.last_mut() {
                *last = (1u8 << (dim % 8)) - 1;
            }
        }
        Self { dim, bits, kept: dim }
    }

    /// Builds a mask from strictly ascending kept indices.
    pub fn from_indices(dim: usize, kept: &[usize]) -> Result<Self> {
        check_ascending("ChannelMask::from_indices", kept, dim)?;
        let mut bits = vec![0u8; dim.div_ceil(8)];
        for &j in kept {
            bits[j / 8] |= 1 << (j % 8);
        }
        Ok(Self { dim, bits, kept: kept.len() })
    }

    /// Parses the packed representation produced by [`ChannelMask::as_bytes`].
    pub fn from_bytes(dim: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != dim.div_ceil(8) {
            return Err(Error::Format(alloc::format!(
                "mask for {dim} channels needs {} bytes, got {}",
                dim.div_ceil(8),
                bytes.len()
            )));
        }
        if !dim.is_multiple_of(8) && bytes[bytes.len() - 1] >> (dim % 8) != 0 {
            return Err(Error::Format("mask has bits set beyond its dimension".into()));
        }
        let kept = bytes.iter().map(|b| b.count_ones() as usize).sum();
        Ok(Self { dim, bits: bytes.to_vec(), kept })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of kept channels.
    #[inline]
    pub fn kept_count(&self) -> usize {
        self.kept
    }

    pub fn is_full(&self) -> bool {
        self.kept == self.dim
    }

    #[inline]
    pub fn is_kept(&self, channel: usize) -> bool {
        channel < self.dim && self.bits[channel / 8] & (1 << (channel % 8)) != 0
    }

    /// Kept channel indices, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.dim).filter(|&j| self.is_kept(j)).collect()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }

    /// Copies the kept entries of a full-width row, in ascending channel order.
    pub fn gather(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim {
            return Err(Error::Shape { op: "ChannelMask::gather", expected: (1, self.dim), got: (1, row.len()) });
        }
        Ok(row.iter().enumerate().filter(|(j, _)| self.is_kept(*j)).map(|(_, v)| *v).collect())
    }

    /// Inverse of [`ChannelMask::gather`]: places a kept-width row back at full
    /// width with zeros in pruned channels.
    pub fn scatter(&self, kept_row: &[f64]) -> Result<Vec<f64>> {
        if kept_row.len() != self.kept {
            return Err(Error::Shape {
                op: "ChannelMask::scatter",
                expected: (1, self.kept),
                got: (1, kept_row.len()),
            });
        }
        let mut out = vec![0.0; self.dim];
        let mut src = kept_row.iter();
        for (j, slot) in out.iter_mut().enumerate() {
            if self.is_kept(j) {
                *slot = *src.next().expect("popcount matches kept");
            }
        }
        Ok(out)
    }
}
