//! Command-line flags and their mapping onto [`ExperimentConfig`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use icicl_core::models::ModelKind;
use icicl_core::task_gen::KernelFamily;

use crate::commands::{bench, eval, gen, theorem, train};
use crate::config::{ExperimentConfig, DATA_DIR_ENV};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "icicl", version, about = "Neural processes conditioned on sets of datasets")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory with the MNIST IDX files.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Worker threads for task generation, evaluation and the oracle.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and cache the evaluation task set.
    Gen {
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from checkpoints/latest.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the cached task set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the initialized model instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        no_oracle: bool,
    },
    /// Check that in-context datasets tighten the exact GP-mixture predictive.
    VerifyTheorem {
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Kernel parameter values per family.
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<FamilyArg>>,
        /// Draw tasks without in-context datasets.
        #[arg(long)]
        no_in_context: bool,
    },
    /// Time forward passes and tabulate FLOPs against context size.
    Bench {
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        #[arg(long, value_delimiter = ',')]
        n_c: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum FamilyArg {
    Rbf,
    Periodic,
}

impl From<FamilyArg> for KernelFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Rbf => Self::Rbf,
            FamilyArg::Periodic => Self::Periodic,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Cli {
    /// File values, then flags, then validation.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let c = &self.common;
        if c.seed.is_some() {
            cfg.seed = c.seed;
        }
        set(&mut cfg.out_dir, c.out.clone());
        if c.data_dir.is_some() {
            cfg.data_dir = c.data_dir.clone();
        }
        if c.threads.is_some() {
            cfg.threads = c.threads;
        }
        match &self.command {
            Command::Gen { tasks } => set(&mut cfg.eval.tasks, *tasks),
            Command::Train {
                model,
                epochs,
                iterations,
                batch_size,
                lr,
                ..
            } => {
                set(&mut cfg.model.kind, *model);
                set(&mut cfg.train.epochs, *epochs);
                set(&mut cfg.train.iterations, *iterations);
                set(&mut cfg.train.batch_size, *batch_size);
                set(&mut cfg.train.optimizer.lr, *lr);
            }
            Command::Eval {
                model,
                tasks,
                no_oracle,
                ..
            } => {
                set(&mut cfg.model.kind, *model);
                set(&mut cfg.eval.tasks, *tasks);
                cfg.eval.oracle &= !no_oracle;
            }
            Command::VerifyTheorem {
                n_tasks,
                n_samples,
                grid_points,
                families,
                no_in_context,
            } => {
                let t = &mut cfg.theorem;
                if *n_tasks == Some(0) {
                    return Err(CliError::Usage("--n-tasks must be positive".into()));
                }
                set(&mut t.n_tasks, *n_tasks);
                set(&mut t.n_samples, *n_samples);
                set(&mut t.grid_points, *grid_points);
                set(
                    &mut t.families,
                    families.as_ref().map(|f| f.iter().map(|&x| x.into()).collect()),
                );
                if *no_in_context {
                    t.n_ic = [0, 0];
                }
            }
            Command::Bench { models, n_c, repeats } => {
                set(&mut cfg.bench.kinds, models.clone());
                set(&mut cfg.bench.n_c, n_c.clone());
                set(&mut cfg.bench.repeats, *repeats);
            }
        }
        cfg.resolve()
    }

    pub fn run(&self) -> Result<()> {
        let cfg = self.config()?;
        if let Some(n) = cfg.threads {
            // Fails only if a pool already exists, which then stays in use.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        match &self.command {
            Command::Gen { .. } => {
                let n = gen::run(&cfg)?;
                println!("{n} tasks written to {}", crate::data::cache_path(&cfg).display());
            }
            Command::Train { resume, .. } => {
                train::run(&cfg, *resume)?;
            }
            Command::Eval {
                checkpoint, untrained, ..
            } => {
                let opts = eval::EvalOptions {
                    checkpoint: checkpoint.clone(),
                    untrained: *untrained,
                };
                let summary = eval::run(&cfg, &opts)?;
                println!("{}\n{}", cfg.model.kind.name(), summary.model);
                if let Some(oracle) = &summary.oracle {
                    println!("oracle\n{oracle}");
                }
            }
            Command::VerifyTheorem { .. } => print!("{}", theorem::run(&cfg)?),
            Command::Bench { .. } => {
                let report = bench::run(&cfg)?;
                print!("{}", report.to_csv());
                for (name, f) in &report.fits {
                    println!(
                        "{name}: wall_ms = {:.5} N_c + {:.3}, R² {:.4}",
                        f.slope, f.intercept, f.r2
                    );
                }
            }
        }
        Ok(())
    }
}
