//! Spectral and magnitude views of attention and cache matrices.

use alloc::vec::Vec;

use crate::attention::causal_attention_weights;
use crate::error::{precondition, Result};
use crate::tensor::{svd_values, Matrix};

/// Singular values of a matrix with their normalized energies.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySpectrum {
    /// Descending singular values.
    pub sigma: Vec<f64>,
    /// `sigma_i^2 / sum_k sigma_k^2`.
    pub energy: Vec<f64>,
    /// Running sum of `energy`.
    pub cumulative: Vec<f64>,
}

impl EnergySpectrum {
    pub fn from_singular_values(sigma: Vec<f64>) -> Result<Self> {
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        if total.is_nan() || total <= 0.0 {
            return Err(precondition("energy spectrum of a zero matrix is undefined"));
        }
        let energy: Vec<f64> = sigma.iter().map(|s| s * s / total).collect();
        let cumulative = energy
            .iter()
            .scan(0.0, |acc, e| {
                *acc += e;
                Some(*acc)
            })
            .collect();
        Ok(Self { sigma, energy, cumulative })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Cumulative energy of the `r` largest components.
    pub fn top_energy(&self, r: usize) -> f64 {
        match r {
            0 => 0.0,
            r => self.cumulative[r.min(self.len()) - 1],
        }
    }
}

/// Energy spectrum of any matrix.
pub fn energy_spectrum(a: &Matrix) -> Result<EnergySpectrum> {
    EnergySpectrum::from_singular_values(svd_values(a)?)
}

/// Spectrum of the causal attention matrix `softmax(q kᵀ / sqrt(D))`.
pub fn attention_energy(q: &Matrix, k: &Matrix) -> Result<EnergySpectrum> {
    energy_spectrum(&causal_attention_weights(q, k)?)
}

/// Elementwise absolute value.
pub fn magnitude_map(cache: &Matrix) -> Matrix {
    Matrix::from_fn(cache.rows(), cache.cols(), |r, c| libm::fabs(cache.get(r, c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_have_one_component() {
        let a = Matrix::from_fn(5, 5, |_, c| [0.5, 0.25, 0.125, 0.125, 0.0][c]);
        let s = energy_spectrum(&a).unwrap();
        assert!((s.energy[0] - 1.0).abs() < 1e-12);
        assert!(s.energy[1..].iter().all(|&e| e < 1e-12));
    }

    #[test]
    fn single_token_attention() {
        let q = Matrix::from_rows(&[[0.3, -1.0]]).unwrap();
        let s = attention_energy(&q, &q).unwrap();
        assert_eq!(s.sigma.len(), 1);
        assert!((s.energy[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_spectrum_is_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let q = Matrix::from_fn(16, 8, |_, _| rng.random_range(-1.0..1.0));
        let k = Matrix::from_fn(16, 8, |_, _| rng.random_range(-1.0..1.0));
        let s = attention_energy(&q, &k).unwrap();
        assert_eq!(s.len(), 16);
        assert!((s.energy.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(s.cumulative.windows(2).all(|w| w[1] >= w[0]));
        assert!(s.cumulative[15] >= 0.999);
        assert!((s.top_energy(16) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn magnitudes() {
        let a = Matrix::from_rows(&[[-1.0, -2.5], [-0.5, -3.0]]).unwrap();
        assert_eq!(magnitude_map(&a), a.scale(-1.0));
        assert_eq!(magnitude_map(&Matrix::zeros(2, 3)), Matrix::zeros(2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let a = Matrix::from_fn(6, 5, |_, _| rng.random_range(-1.0..1.0));
        let m = magnitude_map(&a);
        for _ in 0..10 {
            let (r, c) = (rng.random_range(0..6), rng.random_range(0..5));
            assert_eq!(m.get(r, c), a.get(r, c).abs());
        }
    }

    #[test]
    fn zero_matrix_rejected() {
        assert!(energy_spectrum(&Matrix::zeros(2, 2)).is_err());
    }
}
