//! Channel importance criteria and top-T channel selection.
//!
//! Three criteria are provided: the per-channel l1/l2 magnitude of the keys,
//! the query-driven interaction score `‖Q[-w:, j] K[:, j]ᵀ‖_F`, and the
//! value-side score `‖softmax(Q[-w:] Kᵀ / scale) V[:, j]‖`. Selection keeps the
//! `T` highest scores. [`oracle_best_subset`] enumerates every subset of size
//! `T` to minimize the attention-logit approximation error exactly and is
//! meant for small heads and tests.

use alloc::vec::Vec;

use crate::error::{precondition, Error, Result};
use crate::mask::ChannelMask;
use crate::tensor::{dot, matmul, matmul_transposed, row_softmax, Matrix};

/// Largest head dimension the exhaustive oracle accepts.
pub const ORACLE_MAX_DIM: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Criterion {
    L1,
    L2,
    #[cfg_attr(feature = "serde", serde(rename = "query"))]
    QueryDriven,
    #[cfg_attr(feature = "serde", serde(rename = "value"))]
    ValueDriven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// Per-channel importance of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScores {
    pub criterion: Criterion,
    pub values: Vec<f64>,
}

impl ChannelScores {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Channels that survive pruning ratio `ratio`: `floor((1 - ratio) * dim)`.
///
/// A tolerance of 1e-9 absorbs binary rounding such as `(1 - 0.7) * 10`
/// evaluating just below 3.
pub fn kept_channels(dim: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(precondition(alloc::format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let t = libm::floor((1.0 - ratio) * dim as f64 + 1e-9) as usize;
    if t == 0 {
        return Err(precondition(alloc::format!("pruning ratio {ratio} leaves no channel of {dim}")));
    }
    Ok(t.min(dim))
}

/// l_p norm of every key column.
pub fn score_magnitude(keys: &Matrix, p: Norm) -> Result<ChannelScores> {
    if keys.is_empty() {
        return Err(precondition("magnitude scoring needs a non-empty key matrix"));
    }
    let mut values = alloc::vec![0.0; keys.cols()];
    for row in keys.row_iter() {
        for (acc, &x) in values.iter_mut().zip(row) {
            *acc += match p {
                Norm::L1 => libm::fabs(x),
                Norm::L2 => x * x,
            };
        }
    }
    let criterion = match p {
        Norm::L1 => Criterion::L1,
        Norm::L2 => {
            values.iter_mut().for_each(|v| *v = libm::sqrt(*v));
            Criterion::L2
        }
    };
    Ok(ChannelScores { criterion, values })
}

fn column_norms(m: &Matrix) -> Vec<f64> {
    let mut acc = alloc::vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x * x;
        }
    }
    acc.into_iter().map(libm::sqrt).collect()
}

fn check_window(queries: &Matrix, obs_window: usize) -> Result<()> {
    if obs_window == 0 || obs_window > queries.rows() {
        return Err(precondition(alloc::format!("observation window {obs_window} must be in 1..={}", queries.rows())));
    }
    Ok(())
}

/// Query-driven score over the last `obs_window` queries.
///
/// The Frobenius norm of the rank-1 product `q kᵀ` equals `‖q‖₂ ‖k‖₂`, so
/// the outer product is never formed. The `1/sqrt(D)` softmax scale is left
/// out: a positive constant does not change the ranking.
pub fn score_query_driven(queries: &Matrix, keys: &Matrix, obs_window: usize) -> Result<ChannelScores> {
    check_window(queries, obs_window)?;
    if queries.cols() != keys.cols() {
        return Err(Error::Shape {
            op: "score_query_driven",
            expected: (keys.rows(), queries.cols()),
            got: keys.shape(),
        });
    }
    if keys.rows() == 0 {
        return Err(precondition("query-driven scoring needs at least one key"));
    }
    let q = column_norms(&queries.tail_rows(obs_window));
    let k = column_norms(keys);
    Ok(ChannelScores { criterion: Criterion::QueryDriven, values: q.iter().zip(&k).map(|(a, b)| a * b).collect() })
}

/// Value-side score: column norms of `softmax(Q[-w:] Kᵀ / scale) V`.
pub fn score_value_driven(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    obs_window: usize,
    scale: f64,
) -> Result<ChannelScores> {
    check_window(queries, obs_window)?;
    if queries.cols() != keys.cols() {
        return Err(Error::Shape {
            op: "score_value_driven",
            expected: (keys.rows(), queries.cols()),
            got: keys.shape(),
        });
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape {
            op: "score_value_driven",
            expected: (keys.rows(), values.cols()),
            got: values.shape(),
        });
    }
    let logits = matmul_transposed(&queries.tail_rows(obs_window), keys)?;
    let weights = row_softmax(&logits, scale)?;
    let out = matmul(&weights, values)?;
    Ok(ChannelScores { criterion: Criterion::ValueDriven, values: column_norms(&out) })
}

/// Keeps the `t` highest-scoring channels; equal scores favor the lower index.
pub fn select_top_t(scores: &ChannelScores, t: usize) -> Result<ChannelMask> {
    let dim = scores.dim();
    if t == 0 || t > dim {
        return Err(precondition(alloc::format!("cannot keep {t} of {dim} channels")));
    }
    let mut order: Vec<usize> = (0..dim).collect();
    // stable sort keeps ascending index among equal scores
    order.sort_by(|&a, &b| scores.values[b].total_cmp(&scores.values[a]));
    let mut kept = order[..t].to_vec();
    kept.sort_unstable();
    ChannelMask::from_indices(dim, &kept)
}

/// `‖Q Kᵀ − Q S Kᵀ‖_F` for the selection encoded by `mask`, computed by
/// materializing the error term `Q (I − S) Kᵀ`.
pub fn approximation_loss(queries: &Matrix, keys: &Matrix, mask: &ChannelMask) -> Result<f64> {
    if queries.cols() != keys.cols() || mask.dim() != keys.cols() {
        return Err(Error::Shape {
            op: "approximation_loss",
            expected: (keys.rows(), queries.cols()),
            got: keys.shape(),
        });
    }
    let dropped =
        Matrix::from_fn(queries.rows(), queries.cols(), |r, c| if mask.is_kept(c) { 0.0 } else { queries.get(r, c) });
    Ok(crate::tensor::frobenius_norm(&matmul_transposed(&dropped, keys)?))
}

/// Exhaustive minimizer of `‖Q Kᵀ − Q S Kᵀ‖_F` over all `C(D, t)` selections.
///
/// The squared loss of a selection is the sum of `(qᵢ·qⱼ)(kᵢ·kⱼ)` over pruned
/// channel pairs, so the Gram terms are computed once. Equal losses resolve to
/// the lexicographically smallest kept set (the first one enumerated).
pub fn oracle_best_subset(queries: &Matrix, keys: &Matrix, t: usize) -> Result<(ChannelMask, f64)> {
    let dim = keys.cols();
    if queries.cols() != dim {
        return Err(Error::Shape {
            op: "oracle_best_subset",
            expected: (keys.rows(), queries.cols()),
            got: keys.shape(),
        });
    }
    if dim > ORACLE_MAX_DIM {
        return Err(Error::Guard(alloc::format!("exhaustive search over {dim} channels exceeds {ORACLE_MAX_DIM}")));
    }
    if t == 0 || t > dim {
        return Err(precondition(alloc::format!("cannot keep {t} of {dim} channels")));
    }
    let qcols: Vec<Vec<f64>> = (0..dim).map(|j| queries.col(j)).collect();
    let kcols: Vec<Vec<f64>> = (0..dim).map(|j| keys.col(j)).collect();
    let mut gram = alloc::vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let g = dot(&qcols[i], &qcols[j]) * dot(&kcols[i], &kcols[j]);
            gram[i * dim + j] = g;
            gram[j * dim + i] = g;
        }
    }

    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut combo: Vec<usize> = (0..t).collect();
    let mut kept = alloc::vec![false; dim];
    loop {
        kept.iter_mut().for_each(|k| *k = false);
        combo.iter().for_each(|&c| kept[c] = true);
        let mut loss2 = 0.0;
        for i in (0..dim).filter(|&i| !kept[i]) {
            for j in (0..dim).filter(|&j| !kept[j]) {
                loss2 += gram[i * dim + j];
            }
        }
        if best.as_ref().is_none_or(|(_, b)| loss2 < *b) {
            best = Some((combo.clone(), loss2));
        }
        if !next_combination(&mut combo, dim) {
            break;
        }
    }
    let (set, loss2) = best.expect("at least one subset");
    Ok((ChannelMask::from_indices(dim, &set)?, libm::sqrt(loss2.max(0.0))))
}

/// Advances `combo` to the next k-subset of `0..n` in lexicographic order.
pub(crate) fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Concatenates the trailing `obs_window` rows of every query head that
/// shares one KV head, so grouped-query heads score against a single key set.
pub fn stack_query_windows(group: &[Matrix], obs_window: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(0, group.first().map_or(0, Matrix::cols));
    for q in group {
        check_window(q, obs_window)?;
        out = out.vstack(&q.tail_rows(obs_window))?;
    }
    Ok(out)
}
