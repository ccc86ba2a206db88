//! Segmented per-head cache: a frozen segment stored at reduced channel
//! width, a recent segment kept at full width, and the channel mask shared by
//! every frozen row.
//!
//! Rows only move from the recent segment to the frozen one through
//! [`SegmentedCache::freeze_recent`], so frozen tokens always precede recent
//! ones. The first freeze fixes the mask; later freezes must reuse it.

use alloc::vec::Vec;

use crate::error::{precondition, Error, Result};
use crate::mask::ChannelMask;
use crate::pruner::kept_channels;
use crate::quant::{dequantize, quantize, Axis, QuantSpec, QuantizedBlock};
use crate::tensor::{gather_cols, Matrix};

/// Geometry and compression knobs for one model's cache.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CacheConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dtype_bits: usize,
    pub key_prune_ratio: f64,
    pub value_prune_ratio: f64,
    pub obs_window: usize,
    pub residual_len: usize,
    pub kv_budget: usize,
}

impl CacheConfig {
    /// Uncompressed 16-bit cache with a 32-token window and full budget.
    pub fn dense(batch: usize, seq_len: usize, layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            batch,
            seq_len,
            layers,
            heads,
            head_dim,
            dtype_bits: 16,
            key_prune_ratio: 0.0,
            value_prune_ratio: 0.0,
            obs_window: 32.min(seq_len),
            residual_len: 32,
            kv_budget: seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.dtype_bits == 0 {
            return Err(precondition("head_dim and dtype_bits must be positive"));
        }
        kept_channels(self.head_dim, self.key_prune_ratio)?;
        kept_channels(self.head_dim, self.value_prune_ratio)?;
        if self.obs_window > self.seq_len {
            return Err(precondition(alloc::format!(
                "observation window {} exceeds sequence length {}",
                self.obs_window,
                self.seq_len
            )));
        }
        if self.residual_len == 0 {
            return Err(precondition("residual length must be at least 1"));
        }
        if self.kv_budget > self.seq_len {
            return Err(precondition(alloc::format!(
                "kv budget {} exceeds sequence length {}",
                self.kv_budget,
                self.seq_len
            )));
        }
        Ok(())
    }

    /// Kept key channels `floor((1 - λ_k) D)`.
    pub fn key_kept(&self) -> Result<usize> {
        kept_channels(self.head_dim, self.key_prune_ratio)
    }

    pub fn value_kept(&self) -> Result<usize> {
        kept_channels(self.head_dim, self.value_prune_ratio)
    }

    /// Number of (sequence, layer, head) caches.
    pub fn head_count(&self) -> usize {
        self.batch * self.layers * self.heads
    }
}

/// One head's key or value cache.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedCache {
    dim: usize,
    dtype_bits: usize,
    axis: Axis,
    quant: Option<QuantSpec>,
    mask: Option<ChannelMask>,
    frozen: Matrix,
    blocks: Vec<QuantizedBlock>,
    recent: Matrix,
}

/// Key cache; frozen blocks quantize per channel.
pub type SegmentedKeyCache = SegmentedCache;
/// Value cache; frozen blocks quantize per token.
pub type ValueCache = SegmentedCache;

impl SegmentedCache {
    pub fn keys(dim: usize, dtype_bits: usize) -> Self {
        Self::new(dim, dtype_bits, Axis::Channel)
    }

    pub fn values(dim: usize, dtype_bits: usize) -> Self {
        Self::new(dim, dtype_bits, Axis::Token)
    }

    fn new(dim: usize, dtype_bits: usize, axis: Axis) -> Self {
        Self {
            dim,
            dtype_bits,
            axis,
            quant: None,
            mask: None,
            frozen: Matrix::zeros(0, 0),
            blocks: Vec::new(),
            recent: Matrix::zeros(0, dim),
        }
    }

    /// Frozen rows are stored as low-bit blocks from now on.
    pub fn with_quantization(mut self, spec: QuantSpec) -> Self {
        self.quant = Some(spec);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype_bits(&self) -> usize {
        self.dtype_bits
    }

    pub fn quantization(&self) -> Option<QuantSpec> {
        self.quant
    }

    pub fn mask(&self) -> Option<&ChannelMask> {
        self.mask.as_ref()
    }

    /// Frozen rows at kept width (dequantized when quantization is on).
    pub fn frozen(&self) -> &Matrix {
        &self.frozen
    }

    pub fn recent(&self) -> &Matrix {
        &self.recent
    }

    pub fn blocks(&self) -> &[QuantizedBlock] {
        &self.blocks
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen.rows()
    }

    pub fn recent_len(&self) -> usize {
        self.recent.rows()
    }

    pub fn len(&self) -> usize {
        self.frozen_len() + self.recent_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kept width of frozen rows; the full width before the first freeze.
    pub fn kept_width(&self) -> usize {
        self.mask.as_ref().map_or(self.dim, ChannelMask::kept_count)
    }

    pub fn append_token(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape { op: "append_token", expected: (1, self.dim), got: (1, row.len()) });
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(precondition(alloc::format!("non-finite cache entry {bad}")));
        }
        self.recent.push_row(row)
    }

    /// Appends several rows to the recent segment.
    pub fn append_rows(&mut self, rows: &Matrix) -> Result<()> {
        rows.row_iter().try_for_each(|r| self.append_token(r))
    }

    /// Moves every recent row into the frozen segment at kept width.
    pub fn freeze_recent(&mut self, mask: &ChannelMask) -> Result<()> {
        if mask.dim() != self.dim {
            return Err(Error::Shape { op: "freeze_recent", expected: (1, self.dim), got: (1, mask.dim()) });
        }
        match &self.mask {
            Some(stored) if stored != mask => return Err(Error::MaskConflict),
            Some(_) => {}
            None => {
                self.mask = Some(mask.clone());
                self.frozen = Matrix::zeros(0, mask.kept_count());
            }
        }
        if self.recent.rows() == 0 {
            return Ok(());
        }
        let gathered = gather_cols(&self.recent, &mask.kept_indices())?;
        let stored = match self.quant {
            Some(spec) => {
                let block = quantize(&gathered, spec.bits, spec.group_size, self.axis)?;
                let rows = dequantize(&block)?;
                self.blocks.push(block);
                rows
            }
            None => gathered,
        };
        self.frozen = self.frozen.vstack(&stored)?;
        self.recent = Matrix::zeros(0, self.dim);
        Ok(())
    }

    /// Full-width view: frozen rows scattered back with zeros in pruned
    /// channels, followed by the recent rows.
    pub fn to_dense(&self) -> Result<Matrix> {
        let mut out = Matrix::zeros(0, self.dim);
        if let Some(mask) = &self.mask {
            for row in self.frozen.row_iter() {
                out.push_row(&mask.scatter(row)?)?;
            }
        }
        out.vstack(&self.recent)
    }

    /// Storage footprint in bytes: frozen payload (dtype width, or packed
    /// codes plus group parameters), recent rows at dtype width, and the mask
    /// when it actually prunes something.
    pub fn cache_bytes(&self) -> usize {
        let frozen = if self.quant.is_some() {
            self.blocks.iter().map(QuantizedBlock::storage_bytes).sum()
        } else {
            dtype_bytes(self.frozen.rows() * self.frozen.cols(), self.dtype_bits)
        };
        let recent = dtype_bytes(self.recent.rows() * self.dim, self.dtype_bits);
        let mask = self.mask.as_ref().filter(|m| !m.is_full()).map_or(0, ChannelMask::byte_len);
        frozen + recent + mask
    }
}

pub(crate) fn dtype_bytes(elements: usize, dtype_bits: usize) -> usize {
    (elements * dtype_bits).div_ceil(8)
}

/// Sum of [`SegmentedCache::cache_bytes`] over any set of caches.
pub fn cache_bytes<'a>(caches: impl IntoIterator<Item = &'a SegmentedCache>) -> usize {
    caches.into_iter().map(SegmentedCache::cache_bytes).sum()
}
