use std::fmt::Write as _;
use std::time::Instant;

use icicl_core::models::{count_flops, full_attention_tnp_flops, ModelConfig, ModelKind, NeuralProcess, TaskSizes};
use icicl_core::rng::{stream, stream_rng};
use icicl_core::task::{Dataset, Task};
use icicl_core::Tensor;
use rand::Rng as _;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const FULL_TNP: &str = "full-tnp";
pub const HEADER: &str = "model,N_c,N_t,N_ic,flops,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub n_c: usize,
    pub n_t: usize,
    pub n_ic: usize,
    pub flops: u64,
    /// Median forward time; absent for formula-only rows.
    pub wall_ms: Option<f64>,
}

/// Least-squares line `y ≈ slope·x + intercept` with its R².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LinearFit { slope, intercept, r2 }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Wall time against `N_c` per timed model.
    pub fits: Vec<(String, LinearFit)>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for r in &self.rows {
            let ms = r.wall_ms.map_or_else(String::new, |m| format!("{m:.4}"));
            writeln!(s, "{},{},{},{},{},{ms}", r.model, r.n_c, r.n_t, r.n_ic, r.flops).unwrap();
        }
        s
    }
}

pub fn model_config(cfg: &ExperimentConfig, kind: ModelKind) -> ModelConfig {
    let b = &cfg.bench;
    ModelConfig {
        kind,
        d_x: 1,
        d_y: 1,
        d_z: b.d_z,
        layers: b.layers,
        m: b.m,
        m_ic: b.m,
        seed: cfg.seed(),
        ..cfg.model.clone()
    }
}

fn random_task(seed: u64, index: u64, sizes: &TaskSizes) -> Result<Task> {
    let mut rng = stream_rng(seed, stream::BENCH, index);
    let mut data = |n: usize| -> Result<Dataset> {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Dataset::from_1d(&x, &y)?)
    };
    let context = data(sizes.n_c)?;
    let in_context = sizes.n_ic.iter().map(|&n| data(n)).collect::<Result<Vec<_>>>()?;
    let target = data(sizes.n_t)?;
    Ok(Task {
        context,
        in_context,
        target_x: target.x,
        target_y: None::<Tensor>,
    })
}

/// Times inference for every model and context size and adds the
/// full-attention FLOP formula for comparison.
pub fn run(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let b = &cfg.bench;
    if b.n_c.is_empty() || b.repeats == 0 || b.kinds.is_empty() {
        return Err(CliError::Usage(
            "bench needs model kinds, context sizes and repeats".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &kind in &b.kinds {
        let mcfg = model_config(cfg, kind);
        let model = NeuralProcess::new(mcfg.clone())?;
        let n_ic = if kind.uses_in_context() { b.n_ic } else { 0 };
        let mut times = Vec::new();
        for (i, &n_c) in b.n_c.iter().enumerate() {
            let sizes = TaskSizes {
                n_c,
                n_t: b.n_t,
                n_ic: vec![b.n_ic_points; n_ic],
            };
            let task = random_task(cfg.seed(), i as u64, &sizes)?;
            model.predict(&task)?;
            let mut samples: Vec<f64> = (0..b.repeats)
                .map(|_| {
                    let t = Instant::now();
                    model.predict(&task).map(|_| t.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<icicl_core::Result<_>>()?;
            samples.sort_by(f64::total_cmp);
            let ms = samples[samples.len() / 2];
            times.push(ms);
            rows.push(BenchRow {
                model: kind.name().into(),
                n_c,
                n_t: b.n_t,
                n_ic,
                flops: count_flops(&mcfg, &sizes),
                wall_ms: Some(ms),
            });
        }
        let xs: Vec<f64> = b.n_c.iter().map(|&n| n as f64).collect();
        if xs.len() >= 2 {
            fits.push((kind.name().to_string(), linear_fit(&xs, &times)));
        }
    }
    let full = model_config(cfg, ModelKind::PtTnp);
    for &n_c in &b.n_c {
        rows.push(BenchRow {
            model: FULL_TNP.into(),
            n_c,
            n_t: b.n_t,
            n_ic: 0,
            flops: full_attention_tnp_flops(&full, n_c, b.n_t),
            wall_ms: None,
        });
    }
    let report = BenchReport { rows, fits };
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("bench.csv"), report.to_csv())?;
    Ok(report)
}
