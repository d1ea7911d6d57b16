//! Neural process architectures mapping a [`Task`] to Gaussian predictions.

mod cnp;
mod flops;
mod tnp;

use serde::{Deserialize, Serialize};

use crate::attention::TransformerBlockConfig;
use crate::nn::{Graph, Mlp, ParamStore};
use crate::rng::{stream, stream_rng, Rng};
use crate::tape::Var;
use crate::task::{Dataset, GaussianPrediction, Task};
use crate::{Error, Result, Tensor};

pub use flops::{count_flops, full_attention_tnp_flops, TaskSizes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnp,
    IciclCnp,
    PtTnp,
    IciclTnp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cnp => "cnp",
            Self::IciclCnp => "icicl-cnp",
            Self::PtTnp => "pt-tnp",
            Self::IciclTnp => "icicl-tnp",
        }
    }

    pub fn uses_in_context(self) -> bool {
        matches!(self, Self::IciclCnp | Self::IciclTnp)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Cnp, Self::IciclCnp, Self::PtTnp, Self::IciclTnp]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Pseudo-token layer layout of a PT-TNP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PtStyle {
    /// Context pseudo-tokens read the context, then self-attend.
    #[default]
    Perceiver,
    /// Context pseudo-tokens read the context, then the context reads them back.
    Ist,
}

/// Order of the cross-modulation steps in an ICICL-TNP layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IciclVariant {
    /// In-context pseudo-tokens read `U`, both self-attend, then `U` reads them.
    #[default]
    Main,
    /// `U` reads the in-context pseudo-tokens, both self-attend, then they read `U`.
    Alt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_qk: usize,
    /// Context pseudo-tokens.
    pub m: usize,
    /// Pseudo-tokens per in-context dataset.
    pub m_ic: usize,
    pub style: PtStyle,
    pub variant: IciclVariant,
    /// Scale attention logits by `1/sqrt(d_qk)`.
    pub scaled: bool,
    pub var_floor: f64,
    /// Layers of the point-wise deepset MLP in CNP models.
    pub cnp_encoder_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::IciclTnp,
            d_x: 1,
            d_y: 1,
            d_z: 128,
            layers: 5,
            heads: 8,
            d_v: 16,
            d_qk: 16,
            m: 32,
            m_ic: 32,
            style: PtStyle::Perceiver,
            variant: IciclVariant::Main,
            scaled: false,
            var_floor: 1e-6,
            cnp_encoder_layers: 5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            d_z: self.d_z,
            heads: self.heads,
            d_v: self.d_v,
            d_qk: self.d_qk,
            layers: self.layers,
            scaled: self.scaled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        let extents = [
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("m", self.m),
            ("m_ic", self.m_ic),
            ("cnp_encoder_layers", self.cnp_encoder_layers),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return Err(Error::Config("var_floor must be positive".into()));
        }
        Ok(())
    }

    /// Point-wise MLP widths: two hidden layers of width `d_z`.
    pub(crate) fn pointwise_dims(&self, d_in: usize, d_out: usize) -> [usize; 4] {
        [d_in, self.d_z, self.d_z, d_out]
    }

    pub(crate) fn deepset_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_x + self.d_y];
        dims.extend(std::iter::repeat_n(self.d_z, self.cnp_encoder_layers));
        dims
    }
}

/// Tape handles of a prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub mean: Var,
    pub var: Var,
}

/// Maps decoder features to a mean and a floored softplus variance.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    mlp: Mlp,
    d_y: usize,
    var_floor: f64,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, d_in: usize) -> Self {
        Self {
            mlp: Mlp::new(store, rng, "decoder", &cfg.pointwise_dims(d_in, 2 * cfg.d_y)),
            d_y: cfg.d_y,
            var_floor: cfg.var_floor,
        }
    }

    fn forward(&self, g: &mut Graph, h: Var) -> Result<PredictionVars> {
        let out = self.mlp.forward(g, h)?;
        let mean = g.tape.slice_cols(out, 0, self.d_y)?;
        let raw = g.tape.slice_cols(out, self.d_y, 2 * self.d_y)?;
        let var = g.tape.softplus(raw);
        let var = g.tape.add_scalar(var, self.var_floor);
        Ok(PredictionVars { mean, var })
    }
}

/// `cat(x, y)` for every point of `d`.
pub(crate) fn xy_tokens(g: &mut Graph, d: &Dataset) -> Result<Var> {
    let x = g.constant(d.x.clone());
    let y = g.constant(d.y.clone());
    g.tape.concat_cols(&[x, y])
}

#[derive(Clone, Debug)]
enum Arch {
    Cnp(cnp::Cnp),
    PtTnp(tnp::PtTnp),
    IciclTnp(tnp::IciclTnp),
}

/// A model architecture together with its parameters.
#[derive(Clone, Debug)]
pub struct NeuralProcess {
    config: ModelConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl NeuralProcess {
    /// Builds the architecture and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, stream::INIT, 0);
        let mut params = ParamStore::new();
        let arch = match config.kind {
            ModelKind::Cnp | ModelKind::IciclCnp => Arch::Cnp(cnp::Cnp::new(&mut params, &mut rng, &config)),
            ModelKind::PtTnp => Arch::PtTnp(tnp::PtTnp::new(&mut params, &mut rng, &config)),
            ModelKind::IciclTnp => Arch::IciclTnp(tnp::IciclTnp::new(&mut params, &mut rng, &config)),
        };
        Ok(Self { config, params, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Records the forward pass of `task` on `g`, which must be bound to
    /// `self.params`.
    pub fn forward(&self, g: &mut Graph, task: &Task) -> Result<PredictionVars> {
        self.forward_batch(g, std::slice::from_ref(task))
    }

    /// Predictions for every target of `tasks`, rows stacked in task order.
    /// Each task is processed independently of the others.
    pub fn forward_batch(&self, g: &mut Graph, tasks: &[Task]) -> Result<PredictionVars> {
        if tasks.is_empty() {
            return Err(Error::InvalidTask("empty batch".into()));
        }
        for t in tasks {
            t.validate(self.config.d_x, self.config.d_y)?;
        }
        match &self.arch {
            Arch::Cnp(m) => {
                let each = tasks.iter().map(|t| m.forward(g, t)).collect::<Result<Vec<_>>>()?;
                if each.len() == 1 {
                    return Ok(each[0]);
                }
                let means: Vec<Var> = each.iter().map(|p| p.mean).collect();
                let vars: Vec<Var> = each.iter().map(|p| p.var).collect();
                Ok(PredictionVars {
                    mean: g.tape.concat_rows(&means)?,
                    var: g.tape.concat_rows(&vars)?,
                })
            }
            Arch::PtTnp(m) => m.forward(g, tasks),
            Arch::IciclTnp(m) => m.forward(g, tasks),
        }
    }

    pub fn predict(&self, task: &Task) -> Result<GaussianPrediction> {
        let mut g = Graph::inference(&self.params);
        let p = self.forward(&mut g, task)?;
        Ok(GaussianPrediction {
            mean: g.value(p.mean).clone(),
            var: g.value(p.var).clone(),
        })
    }

    /// Multiply-accumulates of one forward pass on `task`.
    pub fn count_flops(&self, task: &Task) -> u64 {
        count_flops(&self.config, &TaskSizes::of(task))
    }

    /// Point-wise context embedding `[N×D_z]` of a TNP; empty for `N = 0`.
    pub fn embed_context(&self, g: &mut Graph, d: &Dataset) -> Result<Var> {
        match &self.arch {
            Arch::PtTnp(m) => m.embed.context(g, d),
            Arch::IciclTnp(m) => m.embed.context(g, d),
            Arch::Cnp(_) => Err(Error::Config("CNP models have no token embedding".into())),
        }
    }

    /// Point-wise target embedding `[N×D_z]` of a TNP.
    pub fn embed_targets(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        match &self.arch {
            Arch::PtTnp(m) => m.embed.targets(g, x),
            Arch::IciclTnp(m) => m.embed.targets(g, x),
            Arch::Cnp(_) => Err(Error::Config("CNP models have no token embedding".into())),
        }
    }
}

#[cfg(test)]
mod tests;
