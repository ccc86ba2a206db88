//! Seeded synthetic Q/K/V tensors.
//!
//! Every KV head draws from its own ChaCha8 stream (`seed`, stream = head
//! index), so a head's tensors do not depend on how many heads exist or on
//! the order in which heads are processed.

use kvtrim_core::tensor::{dot, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Generator;

/// Logit margin, in units of `sqrt(D)`, between a low-rank query and its sink keys.
const SINK_LOGIT_GAP: f64 = 80.0;

/// Tensors of one KV head over prefill plus decode positions.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWorkload {
    /// One `tokens × D` matrix per query head of the group.
    pub queries: Vec<Matrix>,
    pub keys: Matrix,
    pub values: Matrix,
}

impl HeadWorkload {
    pub fn tokens(&self) -> usize {
        self.keys.rows()
    }

    /// First `len` positions of every tensor.
    pub fn prefix(&self, len: usize) -> HeadWorkload {
        HeadWorkload {
            queries: self.queries.iter().map(|q| q.slice_rows(0, len)).collect(),
            keys: self.keys.slice_rows(0, len),
            values: self.values.slice_rows(0, len),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, rank: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        project_out(&mut v, &basis);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

// two Gram-Schmidt passes keep the residual orthogonal to working precision
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for u in basis {
            let c = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
    }
}

fn lowrank(rng: &mut ChaCha8Rng, rank: usize, tokens: usize, dim: usize, group: usize) -> HeadWorkload {
    let basis = orthonormal_basis(rng, rank, dim);
    // query coefficients >= 0.5, so every sink logit is >= gap / 2
    let amplitude = (SINK_LOGIT_GAP * (dim as f64).sqrt()).sqrt();
    let queries = (0..group)
        .map(|_| {
            let mut q = Matrix::zeros(tokens, dim);
            for t in 0..tokens {
                for u in &basis {
                    let a: f64 = rng.random_range(0.5..1.5);
                    q.row_mut(t).iter_mut().zip(u).for_each(|(x, y)| *x += amplitude * a * y);
                }
            }
            q
        })
        .collect();
    let mut keys = Matrix::zeros(tokens, dim);
    for t in 0..tokens {
        let row: Vec<f64> = match basis.get(t) {
            Some(u) => u.iter().map(|x| amplitude * x).collect(),
            None => {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                project_out(&mut v, &basis);
                v
            }
        };
        keys.row_mut(t).copy_from_slice(&row);
    }
    let values = gaussian(rng, tokens, dim);
    HeadWorkload { queries, keys, values }
}

/// Tensors for KV head `head` (flattened sequence/layer/head index).
pub fn generate(generator: Generator, seed: u64, head: u64, tokens: usize, dim: usize, group: usize) -> HeadWorkload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(head);
    match generator {
        Generator::Gaussian => {
            let queries = (0..group).map(|_| gaussian(&mut rng, tokens, dim)).collect();
            let keys = gaussian(&mut rng, tokens, dim);
            let values = gaussian(&mut rng, tokens, dim);
            HeadWorkload { queries, keys, values }
        }
        Generator::Lowrank { rank } => lowrank(&mut rng, rank, tokens, dim, group),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kvtrim_core::analysis::attention_energy;

    #[test]
    fn deterministic_and_head_independent() {
        let a = generate(Generator::Gaussian, 9, 3, 12, 8, 2);
        let b = generate(Generator::Gaussian, 9, 3, 12, 8, 2);
        assert_eq!(a, b);
        assert_ne!(a, generate(Generator::Gaussian, 9, 4, 12, 8, 2));
        assert_ne!(a, generate(Generator::Gaussian, 10, 3, 12, 8, 2));
        assert_eq!(a.queries.len(), 2);
        assert_eq!(a.keys.shape(), (12, 8));
        assert_eq!(a.prefix(5).values, a.values.slice_rows(0, 5));
    }

    #[test]
    fn lowrank_attention_has_planted_rank() {
        for rank in 1..=4 {
            let w = generate(Generator::Lowrank { rank }, 5, 0, 48, 16, 1);
            let s = attention_energy(&w.queries[0], &w.keys).unwrap();
            assert!(s.top_energy(rank) >= 1.0 - 1e-6, "rank {rank}: {}", s.top_energy(rank));
            assert!((s.energy.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn lowrank_noise_keys_are_orthogonal_to_queries() {
        let w = generate(Generator::Lowrank { rank: 2 }, 1, 0, 10, 8, 1);
        for t in 2..10 {
            for s in 0..10 {
                assert!(dot(w.queries[0].row(s), w.keys.row(t)).abs() < 1e-9);
            }
        }
    }
}
