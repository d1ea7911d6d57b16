//! Monte-Carlo check that in-context datasets bring the mixture predictive
//! closer to the true-kernel predictive, and that they do not raise its
//! entropy.

use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gp_posterior, mean_and_se, mixture_posterior, LatentGrid, Mixture1d, MIN_SAMPLES};
use crate::rng::{stream, stream_rng, Rng};
use crate::task::Dataset;
use crate::task_gen::{gp_sample, KernelFamily};
use crate::{Error, Result, Tensor};

/// Grid, task distribution and Monte-Carlo budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    pub families: Vec<KernelFamily>,
    /// Log-spaced grid values from `ell[0]` to `ell[1]`.
    pub ell: [f64; 2],
    pub grid_points: usize,
    pub n_c: [usize; 2],
    pub n_ic: [usize; 2],
    pub n_ic_points: usize,
    pub n_targets: usize,
    pub x_c: [f64; 2],
    pub x_t: [f64; 2],
    pub x_ic: [f64; 2],
    pub sigma_n: f64,
    pub n_tasks: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            families: vec![KernelFamily::Rbf, KernelFamily::Periodic],
            ell: [0.25, 4.0],
            grid_points: 8,
            n_c: [1, 10],
            n_ic: [1, 3],
            n_ic_points: 64,
            n_targets: 8,
            x_c: [-2.0, 2.0],
            x_t: [-2.0, 2.0],
            x_ic: [-2.0, 2.0],
            sigma_n: 0.2,
            n_tasks: 500,
            n_samples: 4000,
            seed: 0,
        }
    }
}

impl TheoremConfig {
    pub fn grid(&self) -> Result<LatentGrid> {
        LatentGrid::log_uniform(&self.families, self.ell[0], self.ell[1], self.grid_points)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_c[0] > self.n_c[1] || self.n_ic[0] > self.n_ic[1] {
            return bad(format!("empty ranges n_c {:?} or n_ic {:?}", self.n_c, self.n_ic));
        }
        if self.n_ic[1] > 0 && self.n_ic_points == 0 {
            return bad("in-context datasets need at least one point".into());
        }
        if self.n_targets == 0 || self.n_tasks == 0 {
            return bad("n_targets and n_tasks must be positive".into());
        }
        if self.n_samples < MIN_SAMPLES {
            return bad(format!("n_samples must be at least {MIN_SAMPLES}"));
        }
        if !(self.sigma_n > 0.0) {
            return bad("sigma_n must be positive".into());
        }
        for r in [self.x_c, self.x_t, self.x_ic] {
            if !(r[0] <= r[1]) {
                return bad(format!("empty interval {r:?}"));
            }
        }
        self.grid().map(|_| ())
    }
}

/// Mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    fn of(xs: &[f64]) -> Self {
        let (mean, se) = mean_and_se(xs);
        Self { mean, se }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ± {:.6}", self.mean, self.se)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub grid: String,
    pub n_tasks: usize,
    pub n_samples: usize,
    /// KL from the true-kernel predictive to the mixture given `{D_j}`.
    pub lhs: Estimate,
    /// KL from the true-kernel predictive to the mixture without `{D_j}`.
    pub rhs: Estimate,
    /// `rhs − lhs` per task, so the error reflects the common samples.
    pub gap: Estimate,
    /// `√(se_lhs² + se_rhs²)`.
    pub combined_se: f64,
    /// `lhs ≤ rhs + 3·combined_se`.
    pub holds: bool,
    /// `rhs − lhs > 3·combined_se`.
    pub significant: bool,
    pub entropy_with: Estimate,
    pub entropy_without: Estimate,
    pub entropy_combined_se: f64,
    /// `entropy_with ≤ entropy_without + 3·entropy_combined_se`.
    pub entropy_holds: bool,
    /// Both KL estimates are at least `−3·se`.
    pub non_negative: bool,
}

impl fmt::Display for TheoremReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid            {}", self.grid)?;
        writeln!(f, "tasks           {}", self.n_tasks)?;
        writeln!(f, "samples         {}", self.n_samples)?;
        writeln!(f, "KL with D_j     {}", self.lhs)?;
        writeln!(f, "KL without D_j  {}", self.rhs)?;
        writeln!(f, "gap (paired)    {}", self.gap)?;
        writeln!(f, "combined se     {:.6}", self.combined_se)?;
        writeln!(f, "holds           {}", self.holds)?;
        writeln!(f, "significant     {}", self.significant)?;
        writeln!(f, "entropy with    {}", self.entropy_with)?;
        writeln!(f, "entropy without {}", self.entropy_without)?;
        writeln!(f, "entropy holds   {}", self.entropy_holds)?;
        write!(f, "non-negative    {}", self.non_negative)
    }
}

struct TaskResult {
    lhs: f64,
    rhs: f64,
    h_with: f64,
    h_without: f64,
}

fn uniform(rng: &mut Rng, n: usize, r: [f64; 2]) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        })
        .collect()
}

fn run_task(cfg: &TheoremConfig, grid: &LatentGrid, index: usize) -> Result<TaskResult> {
    let mut rng = stream_rng(cfg.seed, stream::ORACLE, index as u64);
    let spec = grid.sample(&mut rng);
    let draw = |rng: &mut Rng, n: usize, r: [f64; 2]| -> Result<Dataset> {
        let xs = uniform(rng, n, r);
        let ys = gp_sample(&spec, &xs, 1, cfg.sigma_n, rng)?;
        Dataset::from_1d(&xs, &ys)
    };
    let n_c = rng.random_range(cfg.n_c[0]..=cfg.n_c[1]);
    let d = if n_c == 0 {
        Dataset::empty(1, 1)
    } else {
        draw(&mut rng, n_c, cfg.x_c)?
    };
    let n_ic = rng.random_range(cfg.n_ic[0]..=cfg.n_ic[1]);
    let extra = (0..n_ic)
        .map(|_| draw(&mut rng, cfg.n_ic_points, cfg.x_ic))
        .collect::<Result<Vec<_>>>()?;
    let xt = Tensor::matrix(cfg.n_targets, 1, uniform(&mut rng, cfg.n_targets, cfg.x_t))?;

    let (p_mean, p_var) = gp_posterior(&spec, &d, &xt, cfg.sigma_n)?;
    let with = mixture_posterior(grid, &d, &extra, &xt, cfg.sigma_n)?;
    let without = mixture_posterior(grid, &d, &[], &xt, cfg.sigma_n)?;

    let n = cfg.n_samples as f64;
    let (mut lhs, mut rhs, mut h_with, mut h_without) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..cfg.n_targets {
        let p = Mixture1d::gaussian(p_mean[t], p_var[t]);
        let (qw, qo) = (with.marginal(t), without.marginal(t));
        let (mut l, mut r) = (0.0, 0.0);
        for _ in 0..cfg.n_samples {
            let y = p.sample(&mut rng);
            let lp = p.log_pdf(y);
            l += lp - qw.log_pdf(y);
            r += lp - qo.log_pdf(y);
        }
        lhs += l / n;
        rhs += r / n;
        let (mut hw, mut ho) = (0.0, 0.0);
        for _ in 0..cfg.n_samples {
            hw -= qw.log_pdf(qw.sample(&mut rng));
            ho -= qo.log_pdf(qo.sample(&mut rng));
        }
        h_with += hw / n;
        h_without += ho / n;
    }
    let m = cfg.n_targets as f64;
    Ok(TaskResult {
        lhs: lhs / m,
        rhs: rhs / m,
        h_with: h_with / m,
        h_without: h_without / m,
    })
}

/// Estimates both expected KL divergences and both expected entropies over
/// `cfg.n_tasks` tasks whose kernels are drawn from `grid`. Task `i` uses
/// its own stream so results do not depend on the thread count. The grid
/// fields of `cfg` are ignored.
pub fn verify_theorem1(grid: &LatentGrid, cfg: &TheoremConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let results = (0..cfg.n_tasks)
        .into_par_iter()
        .map(|i| run_task(cfg, grid, i))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&TaskResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let lhs = Estimate::of(&col(|r| r.lhs));
    let rhs = Estimate::of(&col(|r| r.rhs));
    let gap = Estimate::of(&col(|r| r.rhs - r.lhs));
    let entropy_with = Estimate::of(&col(|r| r.h_with));
    let entropy_without = Estimate::of(&col(|r| r.h_without));
    let combined_se = lhs.se.hypot(rhs.se);
    let entropy_combined_se = entropy_with.se.hypot(entropy_without.se);
    Ok(TheoremReport {
        grid: grid.describe(),
        n_tasks: cfg.n_tasks,
        n_samples: cfg.n_samples,
        lhs,
        rhs,
        gap,
        combined_se,
        holds: lhs.mean <= rhs.mean + 3.0 * combined_se,
        significant: rhs.mean - lhs.mean > 3.0 * combined_se,
        entropy_with,
        entropy_without,
        entropy_combined_se,
        entropy_holds: entropy_with.mean <= entropy_without.mean + 3.0 * entropy_combined_se,
        non_negative: lhs.mean >= -3.0 * lhs.se && rhs.mean >= -3.0 * rhs.se,
    })
}
