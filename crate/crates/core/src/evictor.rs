//! Token retention policies: heavy-hitter accumulation (H2O-style) and
//! observation-window voting with max pooling (SnapKV-style).
//!
//! Both return strictly ascending token indices of length `min(budget, S)`
//! and always keep the most recent tokens.

use alloc::vec::Vec;

use crate::error::{precondition, Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PolicyKind {
    #[default]
    None,
    H2O,
    SnapKV,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvictionPolicy {
    pub kind: PolicyKind,
    pub kv_budget: usize,
    pub obs_window: usize,
    pub pool_kernel: usize,
}

impl EvictionPolicy {
    pub fn none() -> Self {
        Self { kind: PolicyKind::None, kv_budget: usize::MAX, obs_window: 0, pool_kernel: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PolicyKind::None {
            return Ok(());
        }
        if self.kv_budget < self.obs_window {
            return Err(precondition(alloc::format!(
                "kv budget {} smaller than observation window {}",
                self.kv_budget,
                self.obs_window
            )));
        }
        if self.pool_kernel.is_multiple_of(2) {
            return Err(precondition(alloc::format!("pool kernel {} must be odd", self.pool_kernel)));
        }
        Ok(())
    }

    /// Retained tokens given the full `S × S` causal prefill attention.
    /// H2O accumulates over every query row; SnapKV reads only the last
    /// `obs_window` rows.
    pub fn select(&self, attn: &Matrix) -> Result<Vec<usize>> {
        self.validate()?;
        match self.kind {
            PolicyKind::None => Ok((0..attn.cols()).collect()),
            PolicyKind::H2O => evict_h2o(attn, self.kv_budget, self.obs_window.min(attn.cols())),
            PolicyKind::SnapKV => {
                let window = self.obs_window.min(attn.rows());
                evict_snapkv(&attn.tail_rows(window), self.kv_budget, window, self.pool_kernel)
            }
        }
    }
}

/// Indices of the `count` largest votes; equal votes favor the lower index.
fn top_by_vote(votes: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..votes.len()).collect();
    order.sort_by(|&a, &b| votes[b].total_cmp(&votes[a]));
    order.truncate(count);
    order
}

fn column_sums(attn: &Matrix, cols: usize) -> Vec<f64> {
    let mut sums = alloc::vec![0.0; cols];
    for row in attn.row_iter() {
        for (s, &w) in sums.iter_mut().zip(row) {
            *s += w;
        }
    }
    sums
}

fn finish(mut kept: Vec<usize>, seq: usize, recent: usize) -> Vec<usize> {
    kept.extend(seq - recent..seq);
    kept.sort_unstable();
    kept
}

/// Heavy-hitter retention: the last `recent` tokens plus the
/// `budget - recent` prefix tokens with the largest accumulated attention.
///
/// `attn` is any `R × S` attention matrix (usually the causal `S × S` prefill
/// attention); scores are its column sums.
pub fn evict_h2o(attn: &Matrix, budget: usize, recent: usize) -> Result<Vec<usize>> {
    let seq = attn.cols();
    if recent > budget {
        return Err(precondition(alloc::format!("recent window {recent} exceeds budget {budget}")));
    }
    if budget >= seq {
        return Ok((0..seq).collect());
    }
    let recent = recent.min(seq);
    let votes = column_sums(attn, seq - recent);
    Ok(finish(top_by_vote(&votes, budget - recent), seq, recent))
}

/// Same-length 1-D max pool; the window is clamped at both borders.
pub fn max_pool_1d(votes: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    (0..votes.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(votes.len());
            votes[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Observation-window voting: prefix positions are scored by the column sums
/// of the window's attention, smoothed by a max pool of width `pool_kernel`,
/// and the top `budget - obs_window` are kept alongside the window itself.
pub fn evict_snapkv(attn_obs: &Matrix, budget: usize, obs_window: usize, pool_kernel: usize) -> Result<Vec<usize>> {
    if pool_kernel.is_multiple_of(2) {
        return Err(precondition(alloc::format!("pool kernel {pool_kernel} must be odd")));
    }
    if budget < obs_window {
        return Err(precondition(alloc::format!("budget {budget} smaller than observation window {obs_window}")));
    }
    if attn_obs.rows() != obs_window {
        return Err(Error::Shape {
            op: "evict_snapkv",
            expected: (obs_window, attn_obs.cols()),
            got: attn_obs.shape(),
        });
    }
    let seq = attn_obs.cols();
    if budget >= seq {
        return Ok((0..seq).collect());
    }
    let window = obs_window.min(seq);
    let votes = max_pool_1d(&column_sums(attn_obs, seq - window), pool_kernel);
    Ok(finish(top_by_vote(&votes, budget - window), seq, window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_attention(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0));
        for r in 0..rows {
            let s: f64 = m.row(r).iter().sum();
            m.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    #[test]
    fn h2o_full_budget_and_ties() {
        let attn = Matrix::from_fn(6, 6, |_, _| 1.0 / 6.0);
        assert_eq!(evict_h2o(&attn, 6, 2).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(evict_h2o(&attn, 4, 2).unwrap(), vec![0, 1, 4, 5]);
        assert!(evict_h2o(&attn, 2, 3).is_err());
    }

    #[test]
    fn h2o_matches_column_sum_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let attn = random_attention(&mut rng, 8, 8);
            let got = evict_h2o(&attn, 5, 2).unwrap();
            // oracle: sort (sum, index) pairs directly
            let mut pairs: Vec<(f64, usize)> = (0..6).map(|c| ((0..8).map(|r| attn.get(r, c)).sum(), c)).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = pairs[..3].iter().map(|p| p.1).collect();
            want.extend([6, 7]);
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn snapkv_pools_around_one_hot() {
        let p = 5;
        let attn = Matrix::from_fn(2, 12, |_, c| if c == p { 0.5 } else { 0.0 });
        let kept = evict_snapkv(&attn, 5, 2, 3).unwrap();
        assert_eq!(kept, vec![4, 5, 6, 10, 11]);
        let attn = Matrix::from_fn(2, 12, |_, c| if c == 0 { 0.5 } else { 0.0 });
        let kept = evict_snapkv(&attn, 5, 2, 3).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 10, 11]);
    }

    #[test]
    fn snapkv_kernel_one_equals_h2o() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let attn = random_attention(&mut rng, 3, 10);
            assert_eq!(evict_snapkv(&attn, 6, 3, 1).unwrap(), evict_h2o(&attn, 6, 3).unwrap());
        }
    }

    #[test]
    fn snapkv_errors_and_full_budget() {
        let attn = Matrix::from_fn(2, 4, |_, _| 0.25);
        assert_eq!(evict_snapkv(&attn, 4, 2, 7).unwrap(), vec![0, 1, 2, 3]);
        assert!(evict_snapkv(&attn, 3, 2, 2).is_err());
        assert!(evict_snapkv(&attn, 1, 2, 3).is_err());
        assert!(evict_snapkv(&attn, 3, 3, 3).is_err());
    }

    #[test]
    fn max_pool_clamps_edges() {
        assert_eq!(max_pool_1d(&[1.0, 0.0, 0.0, 3.0], 3), vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(max_pool_1d(&[2.0, 1.0], 1), vec![2.0, 1.0]);
    }

    #[test]
    fn policy_select_and_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let attn = random_attention(&mut rng, 10, 10);
        let p = EvictionPolicy { kind: PolicyKind::SnapKV, kv_budget: 6, obs_window: 2, pool_kernel: 3 };
        let kept = p.select(&attn).unwrap();
        assert_eq!(kept.len(), 6);
        assert!(kept.ends_with(&[8, 9]));
        assert!(EvictionPolicy { pool_kernel: 4, ..p }.validate().is_err());
        assert!(EvictionPolicy { kv_budget: 1, ..p }.validate().is_err());
        assert_eq!(EvictionPolicy::none().select(&attn).unwrap().len(), 10);
    }
}
