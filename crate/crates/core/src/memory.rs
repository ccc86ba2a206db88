//! Closed-form cache byte accounting.
//!
//! The model mirrors what [`crate::attention::prefill`] and
//! [`crate::attention::HeadCache::append`] build: `min(kv_budget, S)` tokens
//! survive eviction, the last `obs_window` of them stay at full width and
//! precision, the rest are frozen in one prefill chunk, and decode appends
//! are frozen in chunks whenever the recent segment reaches `residual_len`.
//! Frozen chunks cost `T` channels each at dtype width, or a packed low-bit
//! block plus two f16 parameters per group when quantized. A channel mask of
//! `ceil(D / 8)` bytes is charged per head and per tensor only when it
//! actually prunes.

use alloc::vec::Vec;

use crate::cache::{dtype_bytes, CacheConfig};
use crate::error::{precondition, Error, Result};
use crate::quant::{group_count, packed_len, Axis, KvQuant, QuantSpec, GROUP_OVERHEAD_BYTES};

/// Byte totals for a whole model cache (all sequences, layers and heads).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryReport {
    /// Uncompressed cache for every token at dtype width.
    pub dense_bytes: u64,
    /// Key payload: dtype-width rows and packed codes.
    pub key_bytes: u64,
    pub value_bytes: u64,
    pub mask_bytes: u64,
    /// Scale and zero point storage of quantized groups.
    pub quant_overhead_bytes: u64,
    pub total_bytes: u64,
    pub reduction_fraction: f64,
    /// Largest uncompressed-channel budget that fits in `total_bytes`.
    pub equal_memory_kv_budget: usize,
}

/// Token partition of one head: frozen chunks in creation order and the
/// number of recent full-width rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frozen_chunks: Vec<usize>,
    pub recent: usize,
}

impl TokenLayout {
    pub fn frozen(&self) -> usize {
        self.frozen_chunks.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.frozen() + self.recent
    }
}

/// Where every token sits after prefill and `decode_steps` appends.
pub fn token_layout(cfg: &CacheConfig, decode_steps: usize) -> TokenLayout {
    let retained = cfg.kv_budget.min(cfg.seq_len);
    let mut recent = cfg.obs_window.min(retained);
    let mut frozen_chunks = alloc::vec![retained - recent];
    for _ in 0..decode_steps {
        recent += 1;
        if recent >= cfg.residual_len {
            frozen_chunks.push(recent);
            recent = 0;
        }
    }
    TokenLayout { frozen_chunks, recent }
}

struct TensorBytes {
    payload: u64,
    overhead: u64,
    mask: u64,
}

fn tensor_bytes(
    cfg: &CacheConfig,
    layout: &TokenLayout,
    kept: usize,
    quant: Option<QuantSpec>,
    axis: Axis,
) -> TensorBytes {
    let dim = cfg.head_dim;
    let recent = dtype_bytes(layout.recent * dim, cfg.dtype_bits) as u64;
    let (frozen, overhead) = match quant {
        Some(spec) => layout.frozen_chunks.iter().fold((0u64, 0u64), |(p, o), &rows| {
            let groups = group_count(rows, kept, spec.group_size, axis);
            (p + packed_len(rows * kept, spec.bits) as u64, o + (GROUP_OVERHEAD_BYTES * groups) as u64)
        }),
        None => (dtype_bytes(layout.frozen() * kept, cfg.dtype_bits) as u64, 0),
    };
    let mask = if kept < dim { dim.div_ceil(8) as u64 } else { 0 };
    TensorBytes { payload: frozen + recent, overhead, mask }
}

fn totals(cfg: &CacheConfig, quant: Option<KvQuant>, decode_steps: usize) -> Result<(u64, TensorBytes, TensorBytes)> {
    cfg.validate()?;
    let layout = token_layout(cfg, decode_steps);
    let keys = tensor_bytes(cfg, &layout, cfg.key_kept()?, quant.map(|q| q.keys), Axis::Channel);
    let values = tensor_bytes(cfg, &layout, cfg.value_kept()?, quant.map(|q| q.values), Axis::Token);
    let per_head = keys.payload + keys.overhead + keys.mask + values.payload + values.overhead + values.mask;
    Ok((per_head, keys, values))
}

/// Full report for `cfg` after prefill and `decode_steps` generated tokens.
pub fn report(cfg: &CacheConfig, quant: Option<KvQuant>, decode_steps: usize) -> Result<MemoryReport> {
    let (_, keys, values) = totals(cfg, quant, decode_steps)?;
    let heads = cfg.head_count() as u64;
    let tokens = (cfg.seq_len + decode_steps) as u64;
    let dense_bytes = 2 * heads * dtype_bytes(cfg.head_dim, cfg.dtype_bits) as u64 * tokens;
    let key_bytes = heads * keys.payload;
    let value_bytes = heads * values.payload;
    let mask_bytes = heads * (keys.mask + values.mask);
    let quant_overhead_bytes = heads * (keys.overhead + values.overhead);
    let total_bytes = key_bytes + value_bytes + mask_bytes + quant_overhead_bytes;
    let reduction_fraction = if dense_bytes == 0 { 0.0 } else { 1.0 - total_bytes as f64 / dense_bytes as f64 };
    Ok(MemoryReport {
        dense_bytes,
        key_bytes,
        value_bytes,
        mask_bytes,
        quant_overhead_bytes,
        total_bytes,
        reduction_fraction,
        equal_memory_kv_budget: equal_memory_budget(cfg, quant, cfg.kv_budget)?,
    })
}

/// Largest token budget an unpruned cache (same geometry, window and
/// quantization, no channel pruning) can hold within the bytes that the
/// pruned configuration uses at `reference_budget`.
pub fn equal_memory_budget(cfg: &CacheConfig, quant: Option<KvQuant>, reference_budget: usize) -> Result<usize> {
    if reference_budget > cfg.seq_len {
        return Err(precondition(alloc::format!(
            "reference budget {reference_budget} exceeds sequence length {}",
            cfg.seq_len
        )));
    }
    let pruned = CacheConfig { kv_budget: reference_budget, ..*cfg };
    let (target, _, _) = totals(&pruned, quant, 0)?;
    let dense = CacheConfig { key_prune_ratio: 0.0, value_prune_ratio: 0.0, ..pruned };
    let bytes_at = |budget: usize| totals(&CacheConfig { kv_budget: budget, ..dense }, quant, 0).map(|t| t.0);
    // bytes are non-decreasing in the budget
    let (mut lo, mut hi) = (0usize, cfg.seq_len);
    if bytes_at(hi)? <= target {
        return Ok(hi);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if bytes_at(mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Sequences that fit next to the model weights.
pub fn batch_size_headroom(total_bytes: u64, weight_bytes: u64, per_seq_kv_bytes: u64) -> Result<u64> {
    if per_seq_kv_bytes == 0 {
        return Err(Error::Guard("per-sequence cache size is zero".into()));
    }
    if weight_bytes >= total_bytes {
        return Err(precondition("model weights do not fit in device memory"));
    }
    Ok((total_bytes - weight_bytes) / per_seq_kv_bytes)
}
