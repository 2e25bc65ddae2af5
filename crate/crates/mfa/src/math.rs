//! Small dense-math helpers shared by the adapter and the objectives.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Samples a matrix with independent standard normal entries.
pub(crate) fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Samples a matrix with orthonormal columns (or orthonormal rows when the
/// matrix is wider than tall) by modified Gram-Schmidt on a Gaussian draw.
pub(crate) fn orthogonal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    if rows >= cols {
        orthonormal_columns(rows, cols, rng)
    } else {
        orthonormal_columns(cols, rows, rng).t().to_owned()
    }
}

fn orthonormal_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    debug_assert!(rows >= cols);
    let mut m = gaussian_matrix(rows, cols, rng);
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|i| m[[i, j]] * m[[i, k]]).sum();
            for i in 0..rows {
                m[[i, j]] -= dot * m[[i, k]];
            }
        }
        let norm: f64 = (0..rows).map(|i| m[[i, j]] * m[[i, j]]).sum::<f64>().sqrt();
        // A fresh Gaussian column is almost surely independent of the span of
        // the previous ones, so the norm is positive; the guard keeps the
        // division defined in the measure-zero degenerate case.
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for i in 0..rows {
            m[[i, j]] *= inv;
        }
    }
    m
}

/// Row-wise softmax with max subtraction for overflow safety.
pub(crate) fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// log(sum(exp(x))) with max subtraction for overflow safety.
pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Mean over rows, producing one value per column.
pub(crate) fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    let n = m.nrows().max(1) as f64;
    m.sum_axis(ndarray::Axis(0)) / n
}

pub(crate) fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
