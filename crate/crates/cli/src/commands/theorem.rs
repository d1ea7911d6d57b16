use icicl_core::gp_oracle::{verify_theorem1, TheoremReport};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Runs the oracle check on the grid described by `cfg.theorem`, prints the
/// report and stores it as `theorem.txt`.
pub fn run(cfg: &ExperimentConfig) -> Result<TheoremReport> {
    let t = &cfg.theorem;
    if t.n_tasks == 0 {
        return Err(CliError::Usage("n_tasks must be positive".into()));
    }
    let grid = t.grid()?;
    let report = verify_theorem1(&grid, t)?;
    let verdict = if report.holds { "PASS" } else { "FAIL" };
    let text = format!("{report}\nresult          {verdict}\n");
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("theorem.txt"), &text)?;
    print!("{text}");
    Ok(report)
}
