use std::fmt::Write as _;
use std::path::PathBuf;

use icicl_core::checkpoint::Checkpoint;
use icicl_core::gp_oracle::oracle_prediction;
use icicl_core::models::NeuralProcess;
use icicl_core::task::Task;
use icicl_core::training::{evaluate_prefixes, load_model, EvalReport};

use super::train::{checkpoint_dir, FINAL};
use crate::config::ExperimentConfig;
use crate::data::{self, Source};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Defaults to `checkpoints/final.ckpt` under the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Score the freshly initialized model instead of a checkpoint.
    pub untrained: bool,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub model: EvalReport,
    pub oracle: Option<EvalReport>,
}

/// Scores the model on every in-context prefix of the cached evaluation
/// tasks, plus the true-kernel oracle on synthetic tasks.
pub fn run(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<EvalSummary> {
    let model = if opts.untrained {
        NeuralProcess::new(cfg.model.clone())?
    } else {
        let path = opts
            .checkpoint
            .clone()
            .unwrap_or_else(|| checkpoint_dir(cfg).join(FINAL));
        if !path.exists() {
            return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
        }
        load_model(&Checkpoint::load(&path)?)?
    };
    if model.config().d_x != cfg.task.d_x() {
        return Err(CliError::Usage(
            "checkpoint was trained on a different task kind".into(),
        ));
    }
    let source = Source::open(cfg)?;
    let cached = data::eval_tasks(cfg, &source)?;
    let tasks: Vec<Task> = cached.iter().map(|c| c.task.clone()).collect();
    let report = evaluate_prefixes(&tasks, cfg.eval.n_ic, |_, t| model.predict(t))?;

    let sigma_n = cfg.task.synth.sigma_n;
    let oracle = if cfg.eval.oracle && cached.iter().all(|c| c.kernel.is_some()) {
        Some(evaluate_prefixes(&tasks, cfg.eval.n_ic, |i, t| {
            oracle_prediction(&cached[i].kernel.expect("checked"), t, sigma_n)
        })?)
    } else {
        None
    };

    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let name = model.config().kind.name();
    std::fs::write(dir.join(format!("{name}.csv")), report.to_csv())?;
    let mut text = format!("{name} on {} tasks\n{report}", tasks.len());
    if let Some(o) = &oracle {
        std::fs::write(dir.join("oracle.csv"), o.to_csv())?;
        write!(text, "\noracle\n{o}").unwrap();
    }
    std::fs::write(dir.join(format!("{name}.txt")), &text)?;
    print!("{text}");
    Ok(EvalSummary { model: report, oracle })
}
