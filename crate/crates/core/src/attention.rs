//! Dense attention, prefill compression and the segmented decode step.
//!
//! Prefill runs full causal attention on the uncompressed tensors, then
//! evicts tokens, scores channels over the retained tokens and builds the
//! per-head caches: everything except the last `obs_window` retained tokens
//! is frozen at kept width, the window stays at full width.
//!
//! A decode step multiplies the masked query against the frozen keys and the
//! full query against the recent keys, softmaxes the concatenated logits with
//! the full-width `sqrt(D)` scale and applies the values. The new key/value
//! row is appended afterwards; once the recent segment holds `residual_len`
//! rows it is frozen with the prefill mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::cache::{CacheConfig, SegmentedCache};
use crate::error::{precondition, Error, Result};
use crate::evictor::EvictionPolicy;
use crate::mask::ChannelMask;
use crate::pruner::{
    score_magnitude, score_query_driven, score_value_driven, select_top_t, stack_query_windows, ChannelScores,
    Criterion, Norm,
};
use crate::quant::KvQuant;
use crate::tensor::{dot, matmul, matmul_transposed, softmax_in_place, Matrix};

/// Causal attention weights `softmax(q kᵀ / sqrt(D))`.
///
/// Query rows are aligned with the end of the key sequence: row `i` of an
/// `m`-row query sits at position `n - m + i` and sees keys `0..=n - m + i`.
/// A single query row therefore sees every key.
pub fn causal_attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Shape { op: "attention", expected: (q.rows(), k.cols()), got: q.shape() });
    }
    if q.rows() > k.rows() || k.rows() == 0 {
        return Err(precondition(alloc::format!("{} queries cannot attend to {} keys", q.rows(), k.rows())));
    }
    let (m, n) = (q.rows(), k.rows());
    let scale = libm::sqrt(q.cols() as f64);
    let mut logits = matmul_transposed(q, k)?;
    for i in 0..m {
        let row = logits.row_mut(i);
        for v in row.iter_mut().skip(n - m + i + 1) {
            *v = f64::NEG_INFINITY;
        }
        softmax_in_place(row, scale);
    }
    Ok(logits)
}

/// `softmax(q kᵀ / sqrt(D)) v` with causal masking (see
/// [`causal_attention_weights`]).
pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::Shape { op: "dense_attention", expected: (k.rows(), v.cols()), got: v.shape() });
    }
    matmul(&causal_attention_weights(q, k)?, v)
}

/// Attention of one query over keys/values whose first `frozen_rows` rows have
/// the pruned key channels (and pruned value channels) zeroed. Independent
/// dense route used to check the segmented decode.
pub fn zero_masked_attention(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
    frozen_rows: usize,
    key_mask: &ChannelMask,
    value_mask: &ChannelMask,
) -> Result<Vec<f64>> {
    let zero = |m: &Matrix, mask: &ChannelMask| {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| if r < frozen_rows && !mask.is_kept(c) { 0.0 } else { m.get(r, c) })
    };
    let q = Matrix::new(1, query.len(), query.to_vec())?;
    let out = dense_attention(&q, &zero(keys, key_mask), &zero(values, value_mask))?;
    Ok(out.into_vec())
}

/// Key and value caches of one (sequence, layer, KV head).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub keys: SegmentedCache,
    pub values: SegmentedCache,
    residual_len: usize,
}

/// Output of one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    pub output: Vec<f64>,
    /// Softmax weights, frozen tokens first.
    pub weights: Vec<f64>,
}

impl HeadCache {
    pub fn new(keys: SegmentedCache, values: SegmentedCache, residual_len: usize) -> Result<Self> {
        if keys.dim() != values.dim() {
            return Err(precondition("key and value caches must share the head dimension"));
        }
        if residual_len == 0 {
            return Err(precondition("residual length must be at least 1"));
        }
        Ok(Self { keys, values, residual_len })
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn residual_len(&self) -> usize {
        self.residual_len
    }

    pub fn key_mask(&self) -> ChannelMask {
        self.keys.mask().cloned().unwrap_or_else(|| ChannelMask::full(self.dim()))
    }

    pub fn value_mask(&self) -> ChannelMask {
        self.values.mask().cloned().unwrap_or_else(|| ChannelMask::full(self.dim()))
    }

    pub fn cache_bytes(&self) -> usize {
        self.keys.cache_bytes() + self.values.cache_bytes()
    }

    /// Reads the cache for one query row without modifying it.
    pub fn attend(&self, query: &[f64]) -> Result<DecodeStep> {
        let dim = self.dim();
        if query.len() != dim {
            return Err(Error::Shape { op: "attend", expected: (1, dim), got: (1, query.len()) });
        }
        if self.is_empty() {
            return Err(precondition("attend on an empty cache"));
        }
        let kmask = self.key_mask();
        let pruned_query = kmask.gather(query)?;
        let mut weights = Vec::with_capacity(self.len());
        weights.extend(self.keys.frozen().row_iter().map(|k| dot(&pruned_query, k)));
        weights.extend(self.keys.recent().row_iter().map(|k| dot(query, k)));
        // full-width scale in both segments
        softmax_in_place(&mut weights, libm::sqrt(dim as f64));

        let vmask = self.value_mask();
        let kept: Vec<usize> = vmask.kept_indices();
        let mut output = vec![0.0; dim];
        let (wp, wr) = weights.split_at(self.values.frozen_len());
        for (&w, row) in wp.iter().zip(self.values.frozen().row_iter()) {
            for (&c, &v) in kept.iter().zip(row) {
                output[c] += w * v;
            }
        }
        for (&w, row) in wr.iter().zip(self.values.recent().row_iter()) {
            for (o, &v) in output.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        Ok(DecodeStep { output, weights })
    }

    /// Appends a generated token; freezes the recent segment once it holds
    /// `residual_len` rows.
    pub fn append(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if value.len() != self.dim() {
            return Err(Error::Shape { op: "append", expected: (1, self.dim()), got: (1, value.len()) });
        }
        self.keys.append_token(key)?;
        self.values.append_token(value)?;
        if self.keys.recent_len() >= self.residual_len {
            let (kmask, vmask) = (self.key_mask(), self.value_mask());
            self.keys.freeze_recent(&kmask)?;
            self.values.freeze_recent(&vmask)?;
        }
        Ok(())
    }

    /// One generation step: attend with `query`, then append `key`/`value`.
    pub fn decode_step(&mut self, query: &[f64], key: &[f64], value: &[f64]) -> Result<DecodeStep> {
        let step = self.attend(query)?;
        self.append(key, value)?;
        Ok(step)
    }

    /// Scalar multiply-adds of one decode step at the current cache size.
    pub fn decode_flops(&self) -> u64 {
        let d = self.dim() as u64;
        let (fp, fr) = (self.keys.frozen_len() as u64, self.keys.recent_len() as u64);
        let tk = self.keys.kept_width() as u64;
        let tv = self.values.kept_width() as u64;
        2 * (fp * tk + fr * d) + 4 * (fp + fr) + 2 * (fp * tv + fr * d)
    }
}

/// Result of compressing one KV head at prefill.
#[derive(Clone, Debug)]
pub struct Prefill {
    pub cache: HeadCache,
    /// Dense causal attention output for every query head in the group.
    pub outputs: Vec<Matrix>,
    /// Retained prefill token indices, ascending.
    pub retained: Vec<usize>,
    pub key_scores: ChannelScores,
    pub value_scores: Option<ChannelScores>,
    pub scoring_flops: u64,
}

/// Compresses one KV head after the prefill forward pass.
///
/// `queries` holds the query matrix of every query head sharing this KV
/// head (one entry without grouped-query attention). The eviction attention
/// is summed over the group, and channel scores use the group's stacked
/// observation windows. With `Criterion::ValueDriven` the keys are scored
/// query-driven and the values value-driven; l1/l2 score values by magnitude.
pub fn prefill(
    cfg: &CacheConfig,
    queries: &[Matrix],
    keys: &Matrix,
    values: &Matrix,
    policy: &EvictionPolicy,
    criterion: Criterion,
    quant: Option<KvQuant>,
) -> Result<Prefill> {
    let dim = cfg.head_dim;
    if queries.is_empty() {
        return Err(precondition("prefill needs at least one query head"));
    }
    if keys.cols() != dim || values.cols() != dim || keys.rows() != values.rows() {
        return Err(Error::Shape { op: "prefill", expected: (keys.rows(), dim), got: values.shape() });
    }
    for q in queries {
        if q.shape() != keys.shape() {
            return Err(Error::Shape { op: "prefill", expected: keys.shape(), got: q.shape() });
        }
    }
    let seq = keys.rows();
    if seq == 0 {
        return Err(precondition("prefill of an empty sequence"));
    }
    let outputs = queries.iter().map(|q| dense_attention(q, keys, values)).collect::<Result<Vec<_>>>()?;

    let retained = if policy.kind == crate::evictor::PolicyKind::None {
        (0..seq).collect()
    } else {
        let mut attn = causal_attention_weights(&queries[0], keys)?;
        for q in &queries[1..] {
            let more = causal_attention_weights(q, keys)?;
            attn = Matrix::from_fn(seq, seq, |r, c| attn.get(r, c) + more.get(r, c));
        }
        policy.select(&attn)?
    };
    let kept_keys = keys.gather_rows(&retained)?;
    let kept_values = values.gather_rows(&retained)?;
    let retained_len = retained.len();

    let window = cfg.obs_window.min(seq);
    let scale = libm::sqrt(dim as f64);
    let mut flops = 0u64;
    let (d, r) = (dim as u64, retained_len as u64);
    let stacked = || stack_query_windows(queries, window);

    let key_scores = match criterion {
        Criterion::L1 | Criterion::L2 => {
            flops += 2 * r * d;
            score_magnitude(&kept_keys, if criterion == Criterion::L1 { Norm::L1 } else { Norm::L2 })?
        }
        Criterion::QueryDriven | Criterion::ValueDriven => {
            let q = stacked()?;
            flops += 2 * (q.rows() as u64 + r) * d + d;
            score_query_driven(&q, &kept_keys, q.rows())?
        }
    };
    let key_mask = select_top_t(&key_scores, cfg.key_kept()?)?;

    let value_kept = cfg.value_kept()?;
    let (value_scores, value_mask) = if value_kept < dim {
        let scores = match criterion {
            Criterion::L1 | Criterion::L2 => {
                flops += 2 * r * d;
                score_magnitude(&kept_values, if criterion == Criterion::L1 { Norm::L1 } else { Norm::L2 })?
            }
            Criterion::QueryDriven | Criterion::ValueDriven => {
                let q = stacked()?;
                let w = q.rows() as u64;
                flops += 4 * w * r * d + 3 * w * r + 2 * w * d;
                score_value_driven(&q, &kept_keys, &kept_values, q.rows(), scale)?
            }
        };
        let mask = select_top_t(&scores, value_kept)?;
        (Some(scores), mask)
    } else {
        (None, ChannelMask::full(dim))
    };

    let recent = window.min(retained_len);
    let split = retained_len - recent;
    let mut kcache = SegmentedCache::keys(dim, cfg.dtype_bits);
    let mut vcache = SegmentedCache::values(dim, cfg.dtype_bits);
    if let Some(q) = quant {
        kcache = kcache.with_quantization(q.keys);
        vcache = vcache.with_quantization(q.values);
    }
    kcache.append_rows(&kept_keys.slice_rows(0, split))?;
    vcache.append_rows(&kept_values.slice_rows(0, split))?;
    kcache.freeze_recent(&key_mask)?;
    vcache.freeze_recent(&value_mask)?;
    kcache.append_rows(&kept_keys.slice_rows(split, retained_len))?;
    vcache.append_rows(&kept_values.slice_rows(split, retained_len))?;

    Ok(Prefill {
        cache: HeadCache::new(kcache, vcache, cfg.residual_len)?,
        outputs,
        retained,
        key_scores,
        value_scores,
        scoring_flops: flops,
    })
}
