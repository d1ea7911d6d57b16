//! Stationary kernels with unit signal variance and GP prior draws.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::Cholesky;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Rbf,
    Periodic,
}

/// `ell` is the lengthscale of an RBF kernel and the period of a periodic
/// kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub ell: f64,
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.family {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Periodic => "periodic",
        };
        write!(f, "{name}(ell={:.4})", self.ell)
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, ell: f64) -> Result<Self> {
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(Error::Domain(format!("kernel parameter {ell} must be positive")));
        }
        Ok(Self { family, ell })
    }

    pub fn rbf(ell: f64) -> Self {
        Self::new(KernelFamily::Rbf, ell).expect("positive lengthscale")
    }

    pub fn periodic(period: f64) -> Self {
        Self::new(KernelFamily::Periodic, period).expect("positive period")
    }

    /// `k(x, x')` for inputs of any width; the periodic kernel uses the
    /// Euclidean distance.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b).powi(2)).sum();
        match self.family {
            KernelFamily::Rbf => (-r2 / (2.0 * self.ell * self.ell)).exp(),
            KernelFamily::Periodic => {
                let s = (std::f64::consts::PI * r2.sqrt() / self.ell).sin();
                (-2.0 * s * s).exp()
            }
        }
    }

    /// Row-major Gram matrix between the rows of `a` and `b`, both of width `d`.
    pub fn gram(&self, a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
        let (n, m) = (a.len() / d.max(1), b.len() / d.max(1));
        let mut k = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                k.push(self.eval(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]));
            }
        }
        k
    }
}

/// Scalar convenience for one-dimensional inputs.
pub fn kernel_eval(spec: &KernelSpec, x: f64, x2: f64) -> f64 {
    spec.eval(&[x], &[x2])
}

/// One draw of `y ~ N(0, K + σ_n² I)` at the rows of `xs` (width `d`).
pub fn gp_sample(spec: &KernelSpec, xs: &[f64], d: usize, sigma_n: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let n = xs.len() / d.max(1);
    if n == 0 {
        return Err(Error::Domain("GP sample at no inputs".into()));
    }
    let mut k = spec.gram(xs, xs, d);
    for i in 0..n {
        k[i * n + i] += sigma_n * sigma_n;
    }
    let chol = Cholesky::new(&k, n)?;
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(chol.mul_lower(&z))
}
