//! Dense symmetric positive-definite factorization with adaptive jitter.

use crate::{Error, Result};

/// First diagonal jitter tried; doubled after every failed attempt.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower-triangular `L` with `L·Lᵀ = A + jitter·I`, row-major.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    pub jitter: f64,
}

fn factor(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                s += jitter;
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

impl Cholesky {
    /// Factors the row-major `n × n` matrix `a`, adding jitter from
    /// [`JITTER_START`] doubling up to [`JITTER_MAX`].
    pub fn new(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}×{n} matrix", a.len())));
        }
        let mut jitter = JITTER_START;
        while jitter <= JITTER_MAX {
            if let Some(l) = factor(a, n, jitter) {
                return Ok(Self { n, l, jitter });
            }
            jitter *= 2.0;
        }
        Err(Error::Numerical(format!(
            "{n}×{n} Cholesky failed with jitter up to {JITTER_MAX:e}"
        )))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor(&self) -> &[f64] {
        &self.l
    }

    /// Solves `L·x = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
    }

    /// Solves `Lᵀ·x = b` in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `(L·Lᵀ)·x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// `log det(L·Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// `L·z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| self.l[i * n..i * n + i + 1].iter().zip(z).map(|(l, x)| l * x).sum())
            .collect()
    }
}
