//! One-dimensional GP regression tasks with in-context datasets drawn from
//! the same kernel.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::kernel::{gp_sample, KernelFamily, KernelSpec};
use crate::rng::Rng;
use crate::task::{Dataset, Task};
use crate::{Error, Result};

/// Kernel parameter range used out of distribution: the union of
/// `[0.1, 0.25]` and `[4, 10]`, log-uniform.
pub const OOD_ELL: [[f64; 2]; 2] = [[0.1, 0.25], [4.0, 10.0]];

/// Inclusive integer ranges `[lo, hi]` and closed real intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTaskConfig {
    pub n_c: [usize; 2],
    pub n_t: usize,
    pub n_ic: [usize; 2],
    pub n_ic_points: [usize; 2],
    pub x_c: [f64; 2],
    pub x_t: [f64; 2],
    pub x_ic: [f64; 2],
    pub sigma_n: f64,
    /// `ell` is log-uniform on this interval in distribution.
    pub ell: [f64; 2],
    /// Draw `ell` from [`OOD_ELL`] instead of `ell`.
    pub ood: bool,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            n_c: [1, 64],
            n_t: 128,
            n_ic: [0, 5],
            n_ic_points: [64, 128],
            x_c: [-2.0, 2.0],
            x_t: [-4.0, 4.0],
            x_ic: [-4.0, 4.0],
            sigma_n: 0.2,
            ell: [0.25, 4.0],
            ood: false,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let int = |name: &str, r: [usize; 2]| {
            if r[0] > r[1] {
                Err(Error::Config(format!("{name} range {r:?} is empty")))
            } else {
                Ok(())
            }
        };
        let real = |name: &str, r: [f64; 2]| {
            if !(r[0] <= r[1]) {
                Err(Error::Config(format!("{name} interval {r:?} is empty")))
            } else {
                Ok(())
            }
        };
        int("n_c", self.n_c)?;
        int("n_ic", self.n_ic)?;
        int("n_ic_points", self.n_ic_points)?;
        real("x_c", self.x_c)?;
        real("x_t", self.x_t)?;
        real("x_ic", self.x_ic)?;
        real("ell", self.ell)?;
        if self.n_t == 0 {
            return Err(Error::Config("n_t must be positive".into()));
        }
        if self.n_ic_points[0] == 0 && self.n_ic[1] > 0 {
            return Err(Error::Config("in-context datasets need at least one point".into()));
        }
        if !(self.ell[0] > 0.0) || !(self.sigma_n >= 0.0) {
            return Err(Error::Config("ell must be positive and sigma_n non-negative".into()));
        }
        Ok(())
    }

    /// Log-uniform draw of the kernel parameter.
    pub fn sample_ell(&self, rng: &mut Rng) -> f64 {
        let log = |r: [f64; 2]| [r[0].ln(), r[1].ln()];
        if self.ood {
            let [a, b] = OOD_ELL.map(log);
            let (wa, wb) = (a[1] - a[0], b[1] - b[0]);
            let u = rng.random_range(0.0..wa + wb);
            let l = if u < wa { a[0] + u } else { b[0] + (u - wa) };
            l.exp()
        } else {
            let [lo, hi] = log(self.ell);
            if lo == hi {
                lo.exp()
            } else {
                rng.random_range(lo..hi).exp()
            }
        }
    }
}

fn uniform_points(rng: &mut Rng, n: usize, r: [f64; 2]) -> Vec<f64> {
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

fn count(rng: &mut Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn draw_dataset(spec: &KernelSpec, rng: &mut Rng, xs: Vec<f64>, sigma_n: f64) -> Result<Dataset> {
    let ys = gp_sample(spec, &xs, 1, sigma_n, rng)?;
    Dataset::from_1d(&xs, &ys)
}

/// Kernel and dataset sizes of one synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPlan {
    pub spec: KernelSpec,
    pub n_c: usize,
    pub n_ic_points: Vec<usize>,
}

/// Draws the kernel and all dataset sizes; the first step of
/// [`sample_synth_task`].
pub fn sample_plan(cfg: &SynthTaskConfig, rng: &mut Rng) -> Result<TaskPlan> {
    let family = if rng.random_bool(0.5) {
        KernelFamily::Rbf
    } else {
        KernelFamily::Periodic
    };
    let spec = KernelSpec::new(family, cfg.sample_ell(rng))?;
    let n_c = count(rng, cfg.n_c);
    let n_ic = count(rng, cfg.n_ic);
    let n_ic_points = (0..n_ic).map(|_| count(rng, cfg.n_ic_points)).collect();
    Ok(TaskPlan { spec, n_c, n_ic_points })
}

/// Draws a kernel, then the context and targets from one function and each
/// in-context dataset from its own independent function of that kernel.
pub fn sample_synth_task(cfg: &SynthTaskConfig, rng: &mut Rng) -> Result<(Task, KernelSpec)> {
    let plan = sample_plan(cfg, rng)?;
    let spec = plan.spec;
    let n_c = plan.n_c;
    let mut xs = uniform_points(rng, n_c, cfg.x_c);
    xs.extend(uniform_points(rng, cfg.n_t, cfg.x_t));
    let joint = draw_dataset(&spec, rng, xs, cfg.sigma_n)?;
    let context = joint.select(&(0..n_c).collect::<Vec<_>>());
    let target = joint.select(&(n_c..n_c + cfg.n_t).collect::<Vec<_>>());
    let in_context = plan
        .n_ic_points
        .iter()
        .map(|&n| {
            let xs = uniform_points(rng, n, cfg.x_ic);
            draw_dataset(&spec, rng, xs, cfg.sigma_n)
        })
        .collect::<Result<Vec<_>>>()?;
    let task = Task {
        context,
        in_context,
        target_x: target.x,
        target_y: Some(target.y),
    };
    Ok((task, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, stream_rng};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn tasks_respect_the_configured_ranges() {
        let cfg = SynthTaskConfig::default();
        let mut rng = seeded(1);
        for _ in 0..40 {
            let (t, spec) = sample_synth_task(&cfg, &mut rng).unwrap();
            t.validate(1, 1).unwrap();
            assert_eq!(t.n_t(), 128);
            assert!((1..=64).contains(&t.context.len()));
            assert!(t.n_ic() <= 5);
            assert!(t.context.x.data().iter().all(|x| (-2.0..=2.0).contains(x)));
            assert!(t.target_x.data().iter().all(|x| (-4.0..=4.0).contains(x)));
            for d in &t.in_context {
                assert!((64..=128).contains(&d.len()));
                assert!(d.x.data().iter().all(|x| (-4.0..=4.0).contains(x)));
            }
            assert!((0.25..=4.0).contains(&spec.ell));
            assert!(t.target_y.as_ref().unwrap().all_finite());
        }
    }

    #[test]
    fn fixed_seed_gives_identical_tasks() {
        let cfg = SynthTaskConfig::default();
        let a = sample_synth_task(&cfg, &mut stream_rng(9, 2, 5)).unwrap();
        let b = sample_synth_task(&cfg, &mut stream_rng(9, 2, 5)).unwrap();
        assert_eq!(a, b);
        let c = sample_synth_task(&cfg, &mut stream_rng(9, 2, 6)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn plan_is_the_prefix_of_the_task_draw() {
        let cfg = SynthTaskConfig::default();
        let plan = sample_plan(&cfg, &mut seeded(12)).unwrap();
        let (t, spec) = sample_synth_task(&cfg, &mut seeded(12)).unwrap();
        assert_eq!(plan.spec, spec);
        assert_eq!(plan.n_c, t.context.len());
        let sizes: Vec<usize> = t.in_context.iter().map(|d| d.len()).collect();
        assert_eq!(plan.n_ic_points, sizes);
    }

    #[test]
    fn context_sizes_pass_chi_squared_uniformity() {
        let cfg = SynthTaskConfig::default();
        let mut rng = seeded(21);
        let n = 10_000;
        let mut counts = [0usize; 64];
        for _ in 0..n {
            counts[sample_plan(&cfg, &mut rng).unwrap().n_c - 1] += 1;
        }
        let expected = n as f64 / 64.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new(63.0).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "chi-squared {stat} above {critical}");
    }

    #[test]
    fn log_ell_is_uniform_in_kolmogorov_smirnov_distance() {
        let cfg = SynthTaskConfig::default();
        let mut rng = seeded(22);
        let n = 10_000;
        let (lo, hi) = (0.25f64.ln(), 4.0f64.ln());
        let mut logs: Vec<f64> = (0..n)
            .map(|_| sample_plan(&cfg, &mut rng).unwrap().spec.ell.ln())
            .collect();
        logs.sort_by(f64::total_cmp);
        let ks = logs
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let f = (l - lo) / (hi - lo);
                (f - i as f64 / n as f64)
                    .abs()
                    .max((f - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.02, "KS distance {ks}");
    }

    #[test]
    fn out_of_distribution_ell_avoids_the_training_range() {
        let cfg = SynthTaskConfig {
            ood: true,
            ..SynthTaskConfig::default()
        };
        let mut rng = seeded(23);
        let mut low = 0;
        for _ in 0..2000 {
            let ell = sample_plan(&cfg, &mut rng).unwrap().spec.ell;
            assert!((0.1..=0.25).contains(&ell) || (4.0..=10.0).contains(&ell), "{ell}");
            low += usize::from(ell < 1.0);
        }
        // Both intervals have the same log-width.
        assert!((800..1200).contains(&low), "{low}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SynthTaskConfig {
            n_c: [5, 2],
            ..SynthTaskConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthTaskConfig {
            ell: [0.0, 1.0],
            ..SynthTaskConfig::default()
        };
        assert!(bad.validate().is_err());
        SynthTaskConfig::default().validate().unwrap();
    }
}
