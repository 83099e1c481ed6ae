//! Dense-matrix helpers shared by the attention modules: activations with
//! their derivatives, row softmax, and seeded initialisation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Matrix = DMatrix<f64>;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Subgradient of `|r|`, zero at the kink.
pub fn l1_grad(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise softmax with max subtraction. Entries where `mask(i, j)` is
/// false get probability zero.
pub fn softmax_rows(scores: &Matrix, mask: impl Fn(usize, usize) -> bool) -> Matrix {
    let mut out = Matrix::zeros(scores.nrows(), scores.ncols());
    for i in 0..scores.nrows() {
        let max = (0..scores.ncols())
            .filter(|&j| mask(i, j))
            .map(|j| scores[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..scores.ncols() {
            if mask(i, j) {
                let e = (scores[(i, j)] - max).exp();
                out[(i, j)] = e;
                sum += e;
            }
        }
        for j in 0..scores.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// Backward of a row softmax: `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
pub fn softmax_rows_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.nrows(), probs.ncols());
    for i in 0..probs.nrows() {
        let dot: f64 = (0..probs.ncols()).map(|j| probs[(i, j)] * d_probs[(i, j)]).sum();
        for j in 0..probs.ncols() {
            out[(i, j)] = probs[(i, j)] * (d_probs[(i, j)] - dot);
        }
    }
    out
}

/// Gaussian matrix with standard deviation `scale / sqrt(rows)`.
pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, scale / (rows as f64).sqrt()).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Broadcast-adds a `1 × n` row to every row of `m`.
pub fn add_row(m: &Matrix, row: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r += row;
    }
    out
}

/// Column sums as a `1 × n` row.
pub fn sum_rows(m: &Matrix) -> Matrix {
    Matrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

pub fn row_major(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_row_major(rows: &[Vec<f64>]) -> Option<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
