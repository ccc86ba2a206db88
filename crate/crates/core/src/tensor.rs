//! Dense row-major `f64` matrices and the handful of kernels the engine needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{precondition, Error, Result};

/// Sweep cap for the one-sided Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 80;
/// Convergence threshold on the normalized column inner products.
pub const JACOBI_TOLERANCE: f64 = 1e-10;

/// Row-major dense matrix. Rows are tokens and columns are channels wherever
/// the matrix holds a cache or projection.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape { op: "Matrix::new", expected: (rows, cols), got: (data.len(), 1) });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(precondition(alloc::format!("non-finite entry at flat index {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape { op: "Matrix::from_rows", expected: (i, cols), got: (i, r.len()) });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Appends one row. Fails when the length differs from `cols`.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::Shape { op: "push_row", expected: (1, self.cols), got: (1, row.len()) });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != other.cols {
            return Err(Error::Shape { op: "vstack", expected: (other.rows, self.cols), got: other.shape() });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Copies the listed rows in order. Indices must be strictly ascending.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        check_ascending("gather_rows", indices, self.rows)?;
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            data.extend_from_slice(self.row(r));
        }
        Ok(Matrix { rows: indices.len(), cols: self.cols, data })
    }

    /// The trailing `n` rows.
    pub fn tail_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        let start = (self.rows - n) * self.cols;
        Matrix { rows: n, cols: self.cols, data: self.data[start..].to_vec() }
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        let end = end.min(self.rows);
        let start = start.min(end);
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * factor).collect() }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { op: "max_abs_diff", expected: self.shape(), got: other.shape() });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max))
    }
}

pub(crate) fn check_ascending(op: &'static str, indices: &[usize], bound: usize) -> Result<()> {
    let mut prev: Option<usize> = None;
    for &i in indices {
        if i >= bound || prev.is_some_and(|p| i <= p) {
            return Err(Error::Index { op, index: i, bound });
        }
        prev = Some(i);
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape { op: "matmul", expected: (a.cols, b.cols), got: b.shape() });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape { op: "matmul_transposed", expected: (b.rows, a.cols), got: b.shape() });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// Softmax of every row of `a / scale`, stabilized by subtracting the row max.
pub fn row_softmax(a: &Matrix, scale: f64) -> Result<Matrix> {
    if a.is_empty() {
        return Err(precondition("row_softmax of an empty matrix"));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(precondition("row_softmax scale must be positive"));
    }
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), scale);
    }
    Ok(out)
}

/// In-place softmax of `logits / scale`. Entries equal to `-inf` get weight 0.
pub fn softmax_in_place(logits: &mut [f64], scale: f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / scale;
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = libm::exp(*v / scale - max);
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    norm2(&a.data)
}

/// Copies the listed columns in order. Indices must be strictly ascending.
pub fn gather_cols(a: &Matrix, indices: &[usize]) -> Result<Matrix> {
    check_ascending("gather_cols", indices, a.cols)?;
    let mut data = Vec::with_capacity(a.rows * indices.len());
    for r in 0..a.rows {
        let row = a.row(r);
        data.extend(indices.iter().map(|&c| row[c]));
    }
    Ok(Matrix { rows: a.rows, cols: indices.len(), data })
}

/// Singular values in descending order via one-sided (Hestenes) Jacobi.
///
/// Columns of the taller orientation are rotated pairwise until every
/// normalized inner product drops below [`JACOBI_TOLERANCE`]; the singular
/// values are then the column norms.
pub fn svd_values(a: &Matrix) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(precondition("svd of an empty matrix"));
    }
    // work on the orientation with columns = min(rows, cols)
    let (m, n, mut cols): (usize, usize, Vec<Vec<f64>>) = if a.rows >= a.cols {
        (a.rows, a.cols, (0..a.cols).map(|c| a.col(c)).collect())
    } else {
        (a.cols, a.rows, (0..a.rows).map(|r| a.row(r).to_vec()).collect())
    };
    debug_assert!(cols.iter().all(|c| c.len() == m));

    let fro2 = dot(&a.data, &a.data);
    // columns below this squared norm are numerically zero
    let floor = fro2 * (f64::EPSILON * f64::EPSILON) * 1e-6 + f64::MIN_POSITIVE;

    let mut off = 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let rel = libm::fabs(gamma) / libm::sqrt(alpha * beta);
                off = off.max(rel);
                if rel < JACOBI_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if off < JACOBI_TOLERANCE {
            let mut values: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
            values.sort_by(|x, y| y.total_cmp(x));
            return Ok(values);
        }
    }
    Err(Error::NoConvergence { iterations: JACOBI_MAX_SWEEPS, off_diagonal: off })
}
