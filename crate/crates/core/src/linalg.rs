//! Complex dense linear algebra shared by the estimator and the unfolded layers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Number of jitter escalations attempted before a Hermitian solve gives up.
const MAX_JITTER_ROUNDS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite even after diagonal jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("non-finite entries in a {rows}x{cols} system")]
    NonFinite { rows: usize, cols: usize },
}

/// Cholesky factor of a Hermitian positive-definite matrix, possibly jittered.
pub struct HermitianFactor {
    chol: nalgebra::linalg::Cholesky<C64, nalgebra::Dyn>,
    /// Diagonal jitter that was needed for the factorization to succeed (0 if none).
    pub jitter: f64,
}

impl HermitianFactor {
    /// Factorizes `m`, adding `1e-12 * trace / n` (then escalating) to the
    /// diagonal when the plain factorization fails.
    pub fn new(m: &CMat) -> Result<Self, LinalgError> {
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(LinalgError::NonFinite {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        if let Some(chol) = m.clone().cholesky() {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let n = m.nrows().max(1) as f64;
        let trace: f64 = m.diagonal().iter().map(|z| z.re).sum();
        let mut jitter = 1e-12 * trace.abs().max(f64::MIN_POSITIVE) / n;
        for _ in 0..MAX_JITTER_ROUNDS {
            let mut shifted = m.clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)].re += jitter;
            }
            if let Some(chol) = shifted.cholesky() {
                return Ok(Self { chol, jitter });
            }
            jitter *= 100.0;
        }
        Err(LinalgError::NotPositiveDefinite { jitter })
    }

    pub fn inverse(&self) -> CMat {
        let mut inv = self.chol.inverse();
        hermitianize(&mut inv);
        inv
    }

    pub fn solve(&self, b: &CVec) -> CVec {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &CMat) -> CMat {
        self.chol.solve(b)
    }

    /// `ln det` of the factored matrix.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum()
    }
}

/// Replaces `m` by `(m + mᴴ)/2`.
pub fn hermitianize(m: &mut CMat) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

fn svd_tolerance(sv: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let max_sv = sv.iter().cloned().fold(0.0, f64::max);
    max_sv * rows.max(cols) as f64 * f64::EPSILON
}

/// Minimum-norm least-squares solution of `a w = b`.
pub fn min_norm_lstsq(a: &CMat, b: &CVec) -> CVec {
    if a.ncols() == 0 {
        return CVec::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let tol = svd_tolerance(&svd.singular_values, a.nrows(), a.ncols());
    if svd.singular_values.iter().all(|&s| s <= tol) {
        return CVec::zeros(a.ncols());
    }
    svd.solve(b, tol).expect("svd computed with both factors")
}

/// Moore–Penrose pseudo-inverse.
pub fn pinv(a: &CMat) -> CMat {
    let svd = a.clone().svd(true, true);
    let tol = svd_tolerance(&svd.singular_values, a.nrows(), a.ncols());
    if svd.singular_values.iter().all(|&s| s <= tol) {
        return CMat::zeros(a.ncols(), a.nrows());
    }
    svd.pseudo_inverse(tol).expect("svd computed with both factors")
}

/// Circularly-symmetric complex Gaussian draw with total variance `var`,
/// split equally between real and imaginary parts.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

pub fn norm_sq(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// `‖a − b‖²` without allocating.
pub fn dist_sq(a: &CVec, b: &CVec) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum()
}

/// `xᴴ y`.
pub fn dotc(x: &CVec, y: &CVec) -> C64 {
    x.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// Normalized squared error `‖ĥ − h‖² / ‖h‖²`.
pub fn nmse(h_hat: &CVec, h: &CVec) -> f64 {
    let denom = norm_sq(h);
    if denom == 0.0 {
        return norm_sq(h_hat);
    }
    dist_sq(h_hat, h) / denom
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}
