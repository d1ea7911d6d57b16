//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global ℓ2 norm above which all gradients are rescaled.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Tensor]) -> Result<StepStats> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.values().iter().zip(grads.iter()).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        let c = self.config;
        let grad_norm = match c.clip {
            Some(max) => clip_global_norm(grads, max),
            None => global_norm(grads),
        };
        let applied_norm = c.clip.map_or(grad_norm, |max| grad_norm.min(max));
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                p[j] -= c.lr * c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            applied_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn zero_grads_only_decay() {
        let mut store = scalar_store(2.0);
        let mut opt = OptimizerState::new(&store, AdamWConfig::default());
        opt.step(&mut store, &mut [Tensor::vector(vec![0.0])]).unwrap();
        let expected = 2.0 - 5e-4 * 0.01 * 2.0;
        assert_eq!(store.values()[0].item(), expected);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = scalar_store(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            clip: None,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(&store, cfg);
        opt.step(&mut store, &mut [Tensor::vector(vec![0.1])]).unwrap();
        // m̂ = 0.1, v̂ = 0.01 after bias correction.
        let expected = 1.0 - 5e-4 * 0.1 / (0.1 + 1e-8);
        assert!((store.values()[0].item() - expected).abs() < 1e-15);
        assert!((1.0 - store.values()[0].item() - 5e-4).abs() < 1e-10);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn clipping_halves_unit_norm_grads() {
        let mut grads = vec![Tensor::vector(vec![0.6, 0.8])];
        let before = clip_global_norm(&mut grads, 0.5);
        assert!((before - 1.0).abs() < 1e-15);
        assert!((grads[0].data()[0] - 0.3).abs() < 1e-15);
        assert!((grads[0].data()[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = scalar_store(1.0);
        let mut opt = OptimizerState::new(&store, AdamWConfig::default());
        let err = opt.step(&mut store, &mut [Tensor::vector(vec![0.0, 1.0])]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    proptest::proptest! {
        #[test]
        fn clipped_norm_never_exceeds_threshold(vals in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
            let mut grads = vec![Tensor::vector(vals)];
            clip_global_norm(&mut grads, 0.5);
            proptest::prop_assert!(global_norm(&grads) <= 0.5 + 1e-12);
        }
    }
}
