//! Task sources and the cached evaluation task set.

use std::path::{Path, PathBuf};

use icicl_core::rng::stream;
use icicl_core::task_gen::{load_idx, read_task_cache, write_task_cache, CachedTask, ImagePool, IntensityStats};
use icicl_core::training::{sample_tasks, ImageSampler, TaskSampler};
use serde::Serialize;

use crate::config::{ExperimentConfig, TaskKind};
use crate::error::{CliError, Result};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Training and test pools, both standardized with training statistics.
pub struct ImageData {
    pub train: ImagePool,
    pub test: ImagePool,
}

impl ImageData {
    pub fn load(dir: &Path, max_images: Option<usize>) -> Result<Self> {
        let read = |images: &str, labels: &str| {
            let (i, l) = (dir.join(images), dir.join(labels));
            if !i.exists() || !l.exists() {
                return Err(CliError::Data(format!(
                    "MNIST files {images} and {labels} not found in {}; set --data-dir or ICICL_DATA_DIR",
                    dir.display()
                )));
            }
            let set = load_idx(&i, &l)?;
            Ok(match max_images {
                Some(n) => set.truncate(n),
                None => set,
            })
        };
        let train = read(TRAIN_IMAGES, TRAIN_LABELS)?;
        let test = read(TEST_IMAGES, TEST_LABELS)?;
        let stats = IntensityStats::of(&train)?;
        Ok(Self {
            train: ImagePool::new(train, stats)?,
            test: ImagePool::new(test, stats)?,
        })
    }
}

/// Everything needed to draw training and evaluation tasks.
pub enum Source {
    Synth,
    Image(ImageData),
}

impl Source {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.task.kind {
            TaskKind::Synth => Self::Synth,
            TaskKind::Image => Self::Image(ImageData::load(&cfg.data_dir(), cfg.task.max_images)?),
        })
    }

    pub fn with_train<T>(&self, cfg: &ExperimentConfig, f: impl FnOnce(&dyn TaskSampler) -> T) -> T {
        match self {
            Self::Synth => f(&cfg.task.synth),
            Self::Image(d) => f(&ImageSampler {
                config: cfg.task.image.clone(),
                pool: &d.train,
            }),
        }
    }

    /// Evaluation tasks have exactly `eval.n_ic` in-context datasets and
    /// images come from the test split.
    pub fn eval_tasks(&self, cfg: &ExperimentConfig) -> Result<Vec<CachedTask>> {
        let n_ic = [cfg.eval.n_ic; 2];
        let seed = cfg.seed();
        let tasks = match self {
            Self::Synth => {
                let mut c = cfg.task.synth.clone();
                c.n_ic = n_ic;
                sample_tasks(&c, seed, stream::EVAL_TASKS, 0, cfg.eval.tasks)?
            }
            Self::Image(d) => {
                let mut c = cfg.task.image.clone();
                c.n_ic = n_ic;
                let s = ImageSampler {
                    config: c,
                    pool: &d.test,
                };
                sample_tasks(&s, seed, stream::EVAL_TASKS, 0, cfg.eval.tasks)?
            }
        };
        Ok(tasks)
    }
}

pub fn cache_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("tasks").join("eval.tasks")
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    file: &'a str,
    tasks: usize,
    seed: u64,
}

/// Generates the evaluation set and writes it with a manifest.
pub fn write_eval_cache(cfg: &ExperimentConfig, source: &Source) -> Result<Vec<CachedTask>> {
    let tasks = source.eval_tasks(cfg)?;
    let path = cache_path(cfg);
    let dir = path.parent().expect("cache lives in a directory");
    std::fs::create_dir_all(dir)?;
    let hash = cfg.eval_hash()?;
    write_task_cache(&path, &hash, &tasks)?;
    let manifest = Manifest {
        config_hash: &hash,
        file: "eval.tasks",
        tasks: tasks.len(),
        seed: cfg.seed(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(tasks)
}

/// The cached evaluation set, generated on first use. A cache written for a
/// different config is refused.
pub fn eval_tasks(cfg: &ExperimentConfig, source: &Source) -> Result<Vec<CachedTask>> {
    let path = cache_path(cfg);
    if path.exists() {
        Ok(read_task_cache(&path, Some(&cfg.eval_hash()?))?)
    } else {
        write_eval_cache(cfg, source)
    }
}
