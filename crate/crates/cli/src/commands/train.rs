use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use icicl_core::checkpoint::Checkpoint;
use icicl_core::models::NeuralProcess;
use icicl_core::task_gen::{write_task_cache, CachedTask};
use icicl_core::training::{evaluate_prefixes, MetricsLog, StepRecord, Trainer};

use crate::config::ExperimentConfig;
use crate::data::{self, Source};
use crate::error::{CliError, Result};

pub const LATEST: &str = "latest.ckpt";
pub const FINAL: &str = "final.ckpt";

pub fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints")
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    /// Every loss recorded by this invocation, in step order.
    pub losses: Vec<f64>,
    pub final_checkpoint: PathBuf,
}

fn save(trainer: &Trainer, dir: &std::path::Path, names: &[String]) -> Result<()> {
    let bytes = trainer.checkpoint()?.to_bytes()?;
    std::fs::create_dir_all(dir)?;
    for n in names {
        std::fs::write(dir.join(n), &bytes)?;
    }
    Ok(())
}

fn resume(cfg: &ExperimentConfig) -> Result<Trainer> {
    let path = checkpoint_dir(cfg).join(LATEST);
    let trainer = Trainer::resume(&Checkpoint::load(&path)?)?;
    if trainer.model.config() != &cfg.model || trainer.config() != &cfg.train {
        return Err(CliError::Usage(format!(
            "{} was written with a different model or training config",
            path.display()
        )));
    }
    Ok(trainer)
}

/// Trains from scratch, or from `checkpoints/latest.ckpt` when `resume` is
/// set, writing metrics, periodic evaluations, checkpoints and a report.
pub fn run(cfg: &ExperimentConfig, resume_run: bool) -> Result<TrainSummary> {
    cfg.write_snapshot()?;
    let source = Source::open(cfg)?;
    let mut trainer = if resume_run {
        resume(cfg)?
    } else {
        Trainer::new(NeuralProcess::new(cfg.model.clone())?, cfg.train.clone())?
    };
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = if resume_run {
        MetricsLog::resume(&metrics_path, trainer.step)?
    } else {
        MetricsLog::create(&metrics_path)?
    };
    let eval_set: Vec<CachedTask> = if cfg.train.eval_every > 0 {
        let mut all = data::eval_tasks(cfg, &source)?;
        all.truncate(cfg.train.eval_tasks.max(1));
        all
    } else {
        Vec::new()
    };
    let ckpt_dir = checkpoint_dir(cfg);
    let iterations = cfg.train.iterations as u64;
    let total = cfg.train.total_steps();
    let started = Instant::now();
    let mut losses = Vec::new();

    source.with_train(cfg, |sampler| -> Result<()> {
        while trainer.step < total {
            let rec: StepRecord = match trainer.step(sampler) {
                Ok(r) => r,
                Err(e) => {
                    metrics.flush()?;
                    return Err(dump_failure(cfg, &trainer, e));
                }
            };
            metrics.record(&rec)?;
            losses.push(rec.loss);
            if !rec.step.is_multiple_of(iterations) {
                continue;
            }
            let epoch = (rec.step / iterations) as usize;
            metrics.flush()?;
            eprintln!(
                "epoch {epoch}/{}  step {}  loss {:.5}  {:.1}s",
                cfg.train.epochs,
                rec.step,
                rec.loss,
                started.elapsed().as_secs_f64()
            );
            if cfg.train.eval_every > 0 && epoch.is_multiple_of(cfg.train.eval_every) {
                let tasks: Vec<_> = eval_set.iter().map(|c| c.task.clone()).collect();
                let model = &trainer.model;
                let report = evaluate_prefixes(&tasks, cfg.eval.n_ic, |_, t| model.predict(t))?;
                let dir = cfg.out_dir.join("eval");
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(format!("epoch-{epoch}.csv")), report.to_csv())?;
            }
            if cfg.train.checkpoint_every > 0 && epoch.is_multiple_of(cfg.train.checkpoint_every) {
                save(&trainer, &ckpt_dir, &[format!("epoch-{epoch}.ckpt"), LATEST.into()])?;
            }
        }
        Ok(())
    })?;
    metrics.flush()?;
    save(&trainer, &ckpt_dir, &[FINAL.into(), LATEST.into()])?;

    let mut report = String::new();
    writeln!(report, "model        {}", cfg.model.kind.name()).unwrap();
    writeln!(report, "parameters   {}", trainer.model.params.num_scalars()).unwrap();
    writeln!(report, "steps        {}", trainer.step).unwrap();
    if !losses.is_empty() {
        let tail = &losses[losses.len().saturating_sub(100)..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        writeln!(report, "final loss   {mean:.6} (mean of last {} steps)", tail.len()).unwrap();
    }
    std::fs::write(cfg.out_dir.join("report.txt"), report)?;
    Ok(TrainSummary {
        steps: trainer.step,
        losses,
        final_checkpoint: ckpt_dir.join(FINAL),
    })
}

/// Writes the failing batch next to the outputs and names it in the error.
fn dump_failure(cfg: &ExperimentConfig, trainer: &Trainer, e: icicl_core::Error) -> CliError {
    let err = CliError::from(e);
    let dir = cfg.out_dir.join("failure");
    let path = dir.join("batch.tasks");
    let batch: Vec<CachedTask> = trainer
        .last_batch()
        .iter()
        .map(|t| CachedTask {
            task: t.clone(),
            kernel: None,
        })
        .collect();
    let written = std::fs::create_dir_all(&dir)
        .map_err(icicl_core::Error::from)
        .and_then(|_| write_task_cache(&path, "failure", &batch));
    let note = match written {
        Ok(()) => format!("batch written to {}", path.display()),
        Err(w) => format!("batch could not be written: {w}"),
    };
    match err {
        CliError::Numerical(m) => CliError::Numerical(format!("{m}; {note}")),
        other => other,
    }
}
