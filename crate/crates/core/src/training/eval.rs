use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::models::NeuralProcess;
use crate::task::{GaussianPrediction, Task};
use crate::{Error, Result};

/// Mean log-likelihood of a group of tasks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalBucket {
    /// In-context dataset count; `None` for an unstratified report.
    pub n_ic: Option<usize>,
    pub mean: f64,
    /// Sample standard deviation over `√count`.
    pub std_err: f64,
    pub count: usize,
    /// Per-task values in task order.
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl EvalBucket {
    fn new(n_ic: Option<usize>, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_err = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        Self {
            n_ic,
            mean,
            std_err,
            count: values.len(),
            values,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub buckets: Vec<EvalBucket>,
}

impl EvalReport {
    pub fn bucket(&self, n_ic: usize) -> Option<&EvalBucket> {
        self.buckets.iter().find(|b| b.n_ic == Some(n_ic))
    }

    pub fn total_count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_ic,mean,std_err,count\n");
        for b in &self.buckets {
            let n_ic = b.n_ic.map_or_else(|| "all".to_string(), |n| n.to_string());
            s.push_str(&format!("{n_ic},{},{},{}\n", b.mean, b.std_err, b.count));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>10}  {:>9}  {:>6}", "n_ic", "mean", "std_err", "count")?;
        for b in &self.buckets {
            let n_ic = b.n_ic.map_or_else(|| "all".to_string(), |n| n.to_string());
            writeln!(f, "{n_ic:>5}  {:>10.5}  {:>9.5}  {:>6}", b.mean, b.std_err, b.count)?;
        }
        Ok(())
    }
}

/// Mean per-point log-likelihood of the targets of `task`.
pub fn task_log_likelihood(pred: &GaussianPrediction, task: &Task) -> Result<f64> {
    let y = task
        .target_y
        .as_ref()
        .ok_or_else(|| Error::InvalidTask("evaluation task without target outputs".into()))?;
    pred.mean_log_likelihood(y)
}

/// Scores every task with `predict(index, task)`, optionally grouping tasks
/// by their number of in-context datasets.
pub fn evaluate_with<F>(tasks: &[Task], stratify: bool, predict: F) -> Result<EvalReport>
where
    F: Fn(usize, &Task) -> Result<GaussianPrediction> + Sync,
{
    if tasks.is_empty() {
        return Err(Error::InvalidTask("no evaluation tasks".into()));
    }
    let values = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| task_log_likelihood(&predict(i, t)?, t))
        .collect::<Result<Vec<_>>>()?;
    if !stratify {
        return Ok(EvalReport {
            buckets: vec![EvalBucket::new(None, values)],
        });
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (t, v) in tasks.iter().zip(values) {
        groups.entry(t.n_ic()).or_default().push(v);
    }
    Ok(EvalReport {
        buckets: groups.into_iter().map(|(k, v)| EvalBucket::new(Some(k), v)).collect(),
    })
}

pub fn evaluate(model: &NeuralProcess, tasks: &[Task], stratify: bool) -> Result<EvalReport> {
    evaluate_with(tasks, stratify, |_, t| model.predict(t))
}

/// Bucket `k` scores every task holding at least `k` in-context datasets
/// restricted to its first `k`, for `k = 0..=max_n_ic`. Buckets share tasks,
/// so their differences are paired.
pub fn evaluate_prefixes<F>(tasks: &[Task], max_n_ic: usize, predict: F) -> Result<EvalReport>
where
    F: Fn(usize, &Task) -> Result<GaussianPrediction> + Sync,
{
    let mut buckets = Vec::with_capacity(max_n_ic + 1);
    for k in 0..=max_n_ic {
        let (idx, sub): (Vec<usize>, Vec<Task>) = tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.n_ic() >= k)
            .map(|(i, t)| (i, t.with_in_context_prefix(k)))
            .unzip();
        if sub.is_empty() {
            continue;
        }
        let r = evaluate_with(&sub, false, |j, t| predict(idx[j], t))?;
        let mut b = r.buckets.into_iter().next().expect("one bucket");
        b.n_ic = Some(k);
        buckets.push(b);
    }
    if buckets.is_empty() {
        return Err(Error::InvalidTask("no evaluation tasks".into()));
    }
    Ok(EvalReport { buckets })
}
