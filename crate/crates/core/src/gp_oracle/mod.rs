//! Exact GP predictives, mixtures over a finite kernel grid, Monte-Carlo KL
//! and entropy estimates, and the in-context conditioning inequality check.

mod theorem;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use theorem::{verify_theorem1, Estimate, TheoremConfig, TheoremReport};

use crate::linalg::Cholesky;
use crate::rng::Rng;
use crate::task::{Dataset, GaussianPrediction, Task};
use crate::task_gen::{KernelFamily, KernelSpec};
use crate::{Error, Result, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn normal_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mean).powi(2) / var)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn single_output(d: &Dataset) -> Result<()> {
    if d.d_y() != 1 {
        return Err(Error::Shape(format!("GP oracle needs one output, got {}", d.d_y())));
    }
    Ok(())
}

/// Cholesky of `K(X, X) + σ_n² I` for the inputs of `d`.
fn noisy_gram(spec: &KernelSpec, d: &Dataset, sigma_n: f64) -> Result<Cholesky> {
    let n = d.len();
    let mut k = spec.gram(d.x.data(), d.x.data(), d.d_x());
    for i in 0..n {
        k[i * n + i] += sigma_n * sigma_n;
    }
    Cholesky::new(&k, n)
}

/// Per-point predictive mean and variance of `y` at the rows of `x_star`.
/// Variances include the observation noise `σ_n²`; an empty `d` gives the
/// prior.
pub fn gp_posterior(spec: &KernelSpec, d: &Dataset, x_star: &Tensor, sigma_n: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    single_output(d)?;
    let dx = d.d_x();
    if x_star.rank() != 2 || x_star.cols() != dx {
        return Err(Error::Shape(format!(
            "query inputs {:?} for data of width {dx}",
            x_star.shape()
        )));
    }
    let chol = noisy_gram(spec, d, sigma_n)?;
    let mut alpha = d.y.data().to_vec();
    chol.solve(&mut alpha);
    let mut means = Vec::with_capacity(x_star.rows());
    let mut vars = Vec::with_capacity(x_star.rows());
    for r in 0..x_star.rows() {
        let xs = x_star.row(r);
        let mut k: Vec<f64> = (0..d.len()).map(|i| spec.eval(xs, d.x.row(i))).collect();
        means.push(k.iter().zip(&alpha).map(|(a, b)| a * b).sum());
        chol.solve_lower(&mut k);
        let explained: f64 = k.iter().map(|v| v * v).sum();
        vars.push((spec.eval(xs, xs) - explained).max(0.0) + sigma_n * sigma_n);
    }
    Ok((means, vars))
}

/// `log N(y; 0, K + σ_n² I)`; zero for an empty dataset.
pub fn log_marginal_likelihood(spec: &KernelSpec, d: &Dataset, sigma_n: f64) -> Result<f64> {
    single_output(d)?;
    let chol = noisy_gram(spec, d, sigma_n)?;
    let mut z = d.y.data().to_vec();
    chol.solve_lower(&mut z);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    Ok(-0.5 * (quad + chol.log_det() + d.len() as f64 * LN_2PI))
}

/// Exact predictive of the targets of `task` given its context and the true
/// kernel. In-context datasets carry no extra information once the kernel is
/// known.
pub fn oracle_prediction(spec: &KernelSpec, task: &Task, sigma_n: f64) -> Result<GaussianPrediction> {
    let (mean, var) = gp_posterior(spec, &task.context, &task.target_x, sigma_n)?;
    let n = mean.len();
    Ok(GaussianPrediction {
        mean: Tensor::matrix(n, 1, mean)?,
        var: Tensor::matrix(n, 1, var)?,
    })
}

/// Kernels with prior weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    points: Vec<(KernelSpec, f64)>,
}

impl LatentGrid {
    pub fn new(points: Vec<(KernelSpec, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("latent grid is empty".into()));
        }
        if points.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::Config("grid weights must be non-negative".into()));
        }
        let total: f64 = points.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("grid weights sum to {total}")));
        }
        Ok(Self { points })
    }

    /// Every family crossed with `count` log-spaced parameters from `lo` to
    /// `hi` inclusive, uniformly weighted. `count = 1` uses `lo`.
    pub fn log_uniform(families: &[KernelFamily], lo: f64, hi: f64, count: usize) -> Result<Self> {
        if families.is_empty() || count == 0 || !(lo > 0.0) || !(hi >= lo) {
            return Err(Error::Config(format!(
                "grid of {count} values on [{lo}, {hi}] over {} families",
                families.len()
            )));
        }
        let ells: Vec<f64> = (0..count)
            .map(|i| {
                if count == 1 {
                    lo
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp()
                }
            })
            .collect();
        let w = 1.0 / (families.len() * count) as f64;
        let points = families
            .iter()
            .flat_map(|&f| ells.iter().map(move |&ell| (KernelSpec { family: f, ell }, w)))
            .collect();
        Self::new(points)
    }

    pub fn singleton(spec: KernelSpec) -> Self {
        Self {
            points: vec![(spec, 1.0)],
        }
    }

    pub fn points(&self) -> &[(KernelSpec, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> KernelSpec {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (spec, w) in &self.points {
            acc += w;
            if u < acc {
                return *spec;
            }
        }
        self.points[self.points.len() - 1].0
    }

    pub fn describe(&self) -> String {
        self.points
            .iter()
            .map(|(s, w)| format!("{s}:{w:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A one-dimensional Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl Mixture1d {
    pub fn gaussian(mean: f64, var: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            vars: vec![var],
        }
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        if self.weights.len() == 1 {
            return normal_log_pdf(y, self.means[0], self.vars[0]);
        }
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.vars))
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, (m, v))| w.ln() + normal_log_pdf(y, *m, *v))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.vars[k].sqrt() * z
    }
}

/// Posterior weights over a grid with each component's per-target
/// predictive.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMixture {
    pub weights: Vec<f64>,
    /// `means[k][t]` and `vars[k][t]` for component `k` and target `t`.
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl PosteriorMixture {
    pub fn n_targets(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn marginal(&self, t: usize) -> Mixture1d {
        Mixture1d {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m[t]).collect(),
            vars: self.vars.iter().map(|v| v[t]).collect(),
        }
    }
}

/// `w_k ∝ prior_k · p(D | k) · Π_j p(D_j | k)`, with each component
/// predicting from `d` alone.
pub fn mixture_posterior(
    grid: &LatentGrid,
    d: &Dataset,
    extra: &[Dataset],
    x_star: &Tensor,
    sigma_n: f64,
) -> Result<PosteriorMixture> {
    let mut log_w = Vec::with_capacity(grid.len());
    let mut means = Vec::with_capacity(grid.len());
    let mut vars = Vec::with_capacity(grid.len());
    for (spec, prior) in grid.points() {
        let mut lw = prior.ln() + log_marginal_likelihood(spec, d, sigma_n)?;
        for dj in extra {
            lw += log_marginal_likelihood(spec, dj, sigma_n)?;
        }
        log_w.push(lw);
        let (m, v) = gp_posterior(spec, d, x_star, sigma_n)?;
        means.push(m);
        vars.push(v);
    }
    let norm = log_sum_exp(&log_w);
    assert!(norm.is_finite(), "posterior weights underflowed");
    let weights = log_w.iter().map(|l| (l - norm).exp()).collect();
    Ok(PosteriorMixture { weights, means, vars })
}

/// Monte-Carlo mean with its standard error.
pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Smallest Monte-Carlo sample count accepted.
pub const MIN_SAMPLES: usize = 1000;

/// `E_{y∼p}[log p(y) − log q(y)]` with its standard error.
pub fn mc_kl_predictive(p: &Mixture1d, q: &Mixture1d, n_samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::Domain(format!(
            "{n_samples} samples, at least {MIN_SAMPLES} needed"
        )));
    }
    let terms: Vec<f64> = (0..n_samples)
        .map(|_| {
            let y = p.sample(rng);
            p.log_pdf(y) - q.log_pdf(y)
        })
        .collect();
    Ok(mean_and_se(&terms))
}

/// `KL(N(m1, v1) ‖ N(m2, v2))`.
pub fn kl_gaussian(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
}

/// `−E_{y∼q}[log q(y)]` with its standard error.
pub fn mc_entropy(q: &Mixture1d, n_samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::Domain(format!(
            "{n_samples} samples, at least {MIN_SAMPLES} needed"
        )));
    }
    let terms: Vec<f64> = (0..n_samples).map(|_| -q.log_pdf(q.sample(rng))).collect();
    Ok(mean_and_se(&terms))
}
