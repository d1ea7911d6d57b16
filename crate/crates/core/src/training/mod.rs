//! Maximum-likelihood training over streams of generated tasks, and
//! evaluation of predictive log-likelihoods.

mod eval;
mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, evaluate_prefixes, evaluate_with, task_log_likelihood, EvalBucket, EvalReport};
pub use metrics::MetricsLog;

use crate::checkpoint::Checkpoint;
use crate::models::{ModelConfig, NeuralProcess};
use crate::nn::Graph;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::rng::{stream, stream_rng, Rng};
use crate::tape::Var;
use crate::task::Task;
use crate::task_gen::{sample_image_task, sample_synth_task, CachedTask, ImagePool, ImageTaskConfig, SynthTaskConfig};
use crate::{Error, Result, Tensor};

/// Anything that can draw one task from a generator.
pub trait TaskSampler: Sync {
    fn sample(&self, rng: &mut Rng) -> Result<CachedTask>;
}

impl TaskSampler for SynthTaskConfig {
    fn sample(&self, rng: &mut Rng) -> Result<CachedTask> {
        let (task, kernel) = sample_synth_task(self, rng)?;
        Ok(CachedTask {
            task,
            kernel: Some(kernel),
        })
    }
}

/// Image-completion tasks from a loaded pool.
pub struct ImageSampler<'a> {
    pub config: ImageTaskConfig,
    pub pool: &'a ImagePool,
}

impl TaskSampler for ImageSampler<'_> {
    fn sample(&self, rng: &mut Rng) -> Result<CachedTask> {
        Ok(CachedTask {
            task: sample_image_task(&self.config, self.pool, rng)?,
            kernel: None,
        })
    }
}

/// Tasks `first..first + n` of `stream`; task `i` depends only on
/// `(seed, stream, i)`.
pub fn sample_tasks(
    sampler: &dyn TaskSampler,
    seed: u64,
    stream: u64,
    first: u64,
    n: usize,
) -> Result<Vec<CachedTask>> {
    (first..first + n as u64)
        .into_par_iter()
        .map(|i| sampler.sample(&mut stream_rng(seed, stream, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Seeds the training task stream; model initialization has its own seed.
    pub seed: u64,
    /// Epochs between evaluations; zero disables them.
    pub eval_every: usize,
    /// Tasks per periodic evaluation.
    pub eval_tasks: usize,
    /// Epochs between checkpoints; the final state is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iterations: 250,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            eval_every: 0,
            eval_tasks: 256,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || o.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config(
                "lr and clip must be positive, weight decay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.iterations) as u64
    }
}

/// Negative mean per-point log-likelihood of a batch, recorded on `g`: each
/// task's targets are averaged, then tasks are averaged.
pub fn loss_var(model: &NeuralProcess, g: &mut Graph, tasks: &[Task]) -> Result<Var> {
    let pred = model.forward_batch(g, tasks)?;
    let d_y = model.config().d_y as f64;
    let b = tasks.len() as f64;
    let mut ys = Vec::with_capacity(tasks.len());
    let mut weights = Vec::new();
    for t in tasks {
        let y = t
            .target_y
            .as_ref()
            .ok_or_else(|| Error::InvalidTask("training task without target outputs".into()))?;
        ys.push(y);
        let w = -1.0 / (b * t.n_t() as f64 * d_y);
        weights.extend(std::iter::repeat_n(w, t.n_t()));
    }
    let y = g.constant(Tensor::stack_rows(&ys)?);
    g.tape
        .weighted_gaussian_log_likelihood(y, pred.mean, pred.var, &weights)
}

/// Value of [`loss_var`] without recording gradients.
pub fn loss(model: &NeuralProcess, tasks: &[Task]) -> Result<f64> {
    let mut g = Graph::inference(&model.params);
    let l = loss_var(model, &mut g, tasks)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// One-based index of the completed step.
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model, optimizer state and position in the task stream.
pub struct Trainer {
    pub model: NeuralProcess,
    pub optimizer: OptimizerState,
    /// Completed steps.
    pub step: u64,
    config: TrainConfig,
    last_batch: Vec<Task>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

impl Trainer {
    pub fn new(model: NeuralProcess, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params, config.optimizer);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            config,
            last_batch: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// The batch of step `step` (zero-based).
    pub fn batch(&self, sampler: &dyn TaskSampler, step: u64) -> Result<Vec<Task>> {
        let b = self.config.batch_size;
        let tasks = sample_tasks(sampler, self.config.seed, stream::TRAIN_TASKS, step * b as u64, b)?;
        Ok(tasks.into_iter().map(|c| c.task).collect())
    }

    /// Tasks of the most recent step, kept for diagnosing failures.
    pub fn last_batch(&self) -> &[Task] {
        &self.last_batch
    }

    /// One optimizer step on the next batch. A non-finite loss or gradient
    /// leaves the parameters untouched and returns a numerical error.
    pub fn step(&mut self, sampler: &dyn TaskSampler) -> Result<StepRecord> {
        self.last_batch = self.batch(sampler, self.step)?;
        let mut g = Graph::new(&self.model.params);
        let step = self.step + 1;
        // Variances are floored, so a rejected variance can only be NaN.
        let l = loss_var(&self.model, &mut g, &self.last_batch).map_err(|e| match e {
            Error::Domain(m) => Error::Numerical(format!("{m} at step {step}")),
            e => e,
        })?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss {value} at step {}", self.step + 1)));
        }
        g.tape.backward(l)?;
        let mut grads = g.param_grads();
        drop(g);
        if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at step {}",
                self.model.params.names()[i],
                self.step + 1
            )));
        }
        let stats = self.optimizer.step(&mut self.model.params, &mut grads)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: value,
            grad_norm: stats.grad_norm,
        })
    }

    /// Parameters, optimizer moments and position, with both configs in the
    /// metadata.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let names = self.model.params.names();
        let mut tensors = Vec::with_capacity(3 * names.len());
        for (prefix, values) in [
            (PARAM, self.model.params.values()),
            (ADAM_M, &self.optimizer.m[..]),
            (ADAM_V, &self.optimizer.v[..]),
        ] {
            tensors.extend(
                names
                    .iter()
                    .zip(values)
                    .map(|(n, t)| (format!("{prefix}{n}"), t.clone())),
            );
        }
        let meta = serde_json::json!({
            "step": self.step,
            "adam_t": self.optimizer.t,
            "model": self.model.config(),
            "train": self.config,
        });
        Ok(Checkpoint { tensors, meta })
    }

    /// Rebuilds a trainer from [`checkpoint`](Self::checkpoint) output.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let parse = |e: serde_json::Error| Error::Format(format!("checkpoint metadata: {e}"));
        let model_cfg: ModelConfig = serde_json::from_value(field("model")?).map_err(parse)?;
        let config: TrainConfig = serde_json::from_value(field("train")?).map_err(parse)?;
        let step: u64 = serde_json::from_value(field("step")?).map_err(parse)?;
        let adam_t: u64 = serde_json::from_value(field("adam_t")?).map_err(parse)?;
        let mut trainer = Self::new(NeuralProcess::new(model_cfg)?, config)?;
        trainer.model.params.load_from(&ckpt.with_prefix(PARAM))?;
        let moments = |prefix| -> Result<Vec<Tensor>> {
            let mut store = trainer.model.params.clone();
            store.load_from(&ckpt.with_prefix(prefix))?;
            Ok(store.values().to_vec())
        };
        trainer.optimizer.m = moments(ADAM_M)?;
        trainer.optimizer.v = moments(ADAM_V)?;
        trainer.optimizer.t = adam_t;
        trainer.step = step;
        Ok(trainer)
    }
}

/// Parameters of a model saved by [`Trainer::checkpoint`].
pub fn load_model(ckpt: &Checkpoint) -> Result<NeuralProcess> {
    Ok(Trainer::resume(ckpt)?.model)
}
