//! Parameter storage and the small layers everything else is built from.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.values.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                other.len()
            )));
        }
        for (i, (name, t)) in other.iter().enumerate() {
            if name != &self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, found {} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    name,
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.values.iter_mut().zip(other) {
            *slot = t.clone();
        }
        Ok(())
    }
}

/// A tape bound to a parameter store. Parameters are copied onto the tape
/// on first use and reused afterwards, so each has exactly one leaf.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track_grads: true,
        }
    }

    /// A graph whose parameters are constants; used for inference.
    pub fn inference(params: &'a ParamStore) -> Self {
        Self {
            track_grads: false,
            ..Self::new(params)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradient of every parameter after `tape.backward`; parameters the loss
    /// does not reach get zeros.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .values()
            .iter()
            .zip(&self.bound)
            .map(|(p, b)| {
                b.and_then(|v| self.tape.grad_tensor(v))
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    }

    /// Whether parameter `id` received a gradient in the last backward pass.
    pub fn param_reached(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some_and(|v| self.tape.grad(v).is_some())
    }
}

/// Uniform Glorot initialization bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("normal shape")
}

/// Affine map `x·W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.tape.matmul(x, w)?;
        g.tape.add_bias(h, b)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in * self.d_out) as u64
    }
}

/// Stack of affine layers with ReLU between consecutive layers and no
/// activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, hidden.., d_out]`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.tape.relu(h);
            }
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.macs(rows)).sum()
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}
