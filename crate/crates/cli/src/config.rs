//! Experiment configuration files.
//!
//! A config is a TOML document whose tables mirror [`ExperimentConfig`];
//! every key is optional except `seed`. Command-line flags override file
//! values, and the resolved config is written next to the outputs.

use std::path::{Path, PathBuf};

use icicl_core::gp_oracle::TheoremConfig;
use icicl_core::models::{ModelConfig, ModelKind};
use icicl_core::task_gen::{config_hash, ImageTaskConfig, SynthTaskConfig};
use icicl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the directory with the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "ICICL_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    Synth,
    Image,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub synth: SynthTaskConfig,
    pub image: ImageTaskConfig,
    /// Use only the first images of each split.
    pub max_images: Option<usize>,
}

impl TaskConfig {
    pub fn d_x(&self) -> usize {
        match self.kind {
            TaskKind::Synth => 1,
            TaskKind::Image => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks: usize,
    /// Evaluation tasks carry exactly this many in-context datasets and are
    /// scored on every prefix `0..=n_ic`.
    pub n_ic: usize,
    /// Also score the true-kernel GP predictive on synthetic tasks.
    pub oracle: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 2000,
            n_ic: 5,
            oracle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub kinds: Vec<ModelKind>,
    pub n_c: Vec<usize>,
    pub n_t: usize,
    pub n_ic: usize,
    pub n_ic_points: usize,
    /// Timed forward passes per size; the median is reported.
    pub repeats: usize,
    pub d_z: usize,
    pub layers: usize,
    pub m: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ModelKind::PtTnp, ModelKind::IciclTnp],
            n_c: vec![128, 256, 512, 1024, 2048],
            n_t: 128,
            n_ic: 2,
            n_ic_points: 64,
            repeats: 5,
            d_z: 64,
            layers: 2,
            m: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required. Seeds model initialization, training tasks, evaluation
    /// tasks and the oracle check through separate streams.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    pub theorem: TheoremConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            threads: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
            theorem: TheoremConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Propagates the seed and task widths and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        let seed = self
            .seed
            .ok_or_else(|| CliError::Usage("a seed is required (config `seed` or --seed)".into()))?;
        self.model.seed = seed;
        self.train.seed = seed;
        self.theorem.seed = seed;
        self.model.d_x = self.task.d_x();
        self.model.d_y = 1;
        self.model.validate()?;
        self.train.validate()?;
        match self.task.kind {
            TaskKind::Synth => self.task.synth.validate()?,
            TaskKind::Image => self.task.image.validate()?,
        }
        if self.eval.tasks == 0 {
            return Err(CliError::Usage("eval.tasks must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("threads must be positive".into()));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config")
    }

    /// Flag, then config, then environment, then the default.
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    /// Identifies the evaluation task set.
    pub fn eval_hash(&self) -> Result<String> {
        Ok(config_hash(&(self.seed, &self.task, &self.eval))?)
    }

    pub fn write_snapshot(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join("config.snapshot"), self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert!(matches!(cfg.resolve(), Err(CliError::Usage(_))));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig::parse(
            "seed = 4\n[model]\nkind = \"pt-tnp\"\nd_z = 32\n[task]\nkind = \"image\"\n[train]\nepochs = 2\n[train.optimizer]\nlr = 0.001\n",
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.model.d_x, 2);
        assert_eq!(cfg.model.seed, 4);
        assert_eq!(cfg.train.optimizer.lr, 0.001);
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("seed = 1\n[model]\nwidth = 3\n").is_err());
    }
}
