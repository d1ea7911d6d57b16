use crate::config::ExperimentConfig;
use crate::data::{write_eval_cache, Source};
use crate::error::Result;

/// Writes the evaluation task set and its manifest; returns the task count.
pub fn run(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.write_snapshot()?;
    let source = Source::open(cfg)?;
    let n = write_eval_cache(cfg, &source)?.len();
    Ok(n)
}
