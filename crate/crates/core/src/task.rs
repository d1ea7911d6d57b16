//! Datasets, meta-learning tasks and Gaussian predictions.

use crate::{Error, Result, Tensor};

/// Paired inputs `N×D_x` and outputs `N×D_y`; `N` may be zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "dataset inputs {:?} and outputs {:?} disagree",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn empty(d_x: usize, d_y: usize) -> Self {
        Self {
            x: Tensor::zeros(&[0, d_x]),
            y: Tensor::zeros(&[0, d_y]),
        }
    }

    /// One-dimensional inputs and outputs.
    pub fn from_1d(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(
            Tensor::matrix(x.len(), 1, x.to_vec())?,
            Tensor::matrix(y.len(), 1, y.to_vec())?,
        )
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn d_y(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        Self::stack(&[self, other])
    }

    /// Rows of every dataset in order; all must share widths.
    pub fn stack(parts: &[&Dataset]) -> Result<Self> {
        let xs: Vec<&Tensor> = parts.iter().map(|d| &d.x).collect();
        let ys: Vec<&Tensor> = parts.iter().map(|d| &d.y).collect();
        Self::new(Tensor::stack_rows(&xs)?, Tensor::stack_rows(&ys)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub context: Dataset,
    pub in_context: Vec<Dataset>,
    pub target_x: Tensor,
    /// Absent only when predicting.
    pub target_y: Option<Tensor>,
}

impl Task {
    pub fn n_ic(&self) -> usize {
        self.in_context.len()
    }

    pub fn n_t(&self) -> usize {
        self.target_x.rows()
    }

    /// Same task restricted to its first `n` in-context datasets.
    pub fn with_in_context_prefix(&self, n: usize) -> Self {
        Self {
            in_context: self.in_context[..n.min(self.n_ic())].to_vec(),
            ..self.clone()
        }
    }

    pub fn target(&self) -> Result<Dataset> {
        let y = self
            .target_y
            .clone()
            .ok_or_else(|| Error::InvalidTask("task has no target outputs".into()))?;
        Dataset::new(self.target_x.clone(), y)
    }

    /// Checks widths against `(d_x, d_y)`, requires at least one target and
    /// rejects empty in-context datasets.
    pub fn validate(&self, d_x: usize, d_y: usize) -> Result<()> {
        let check = |what: &str, t: &Tensor, d: usize| {
            if t.rank() != 2 || t.shape()[1] != d {
                Err(Error::InvalidTask(format!(
                    "{what} has shape {:?}, expected width {d}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        check("context inputs", &self.context.x, d_x)?;
        check("context outputs", &self.context.y, d_y)?;
        check("target inputs", &self.target_x, d_x)?;
        if self.n_t() == 0 {
            return Err(Error::InvalidTask("no target points".into()));
        }
        if let Some(y) = &self.target_y {
            check("target outputs", y, d_y)?;
            if y.rows() != self.n_t() {
                return Err(Error::InvalidTask("target inputs and outputs disagree".into()));
            }
        }
        for (j, d) in self.in_context.iter().enumerate() {
            check("in-context inputs", &d.x, d_x)?;
            check("in-context outputs", &d.y, d_y)?;
            if d.is_empty() {
                return Err(Error::InvalidTask(format!("in-context dataset {j} is empty")));
            }
        }
        Ok(())
    }
}

/// Per-target mean and variance, both `N_t×D_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianPrediction {
    /// Mean log density per target element.
    pub fn mean_log_likelihood(&self, y: &Tensor) -> Result<f64> {
        if y.shape() != self.mean.shape() {
            return Err(Error::Shape(format!(
                "targets {:?} against predictions {:?}",
                y.shape(),
                self.mean.shape()
            )));
        }
        let total = crate::tape::gaussian_log_density_sum(y.data(), self.mean.data(), self.var.data());
        Ok(total / y.len().max(1) as f64)
    }
}
