//! Deepset conditional neural processes, with optional in-context branch.

use super::{xy_tokens, Decoder, ModelConfig, ModelKind, PredictionVars};
use crate::nn::{Graph, Mlp, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::task::{Dataset, Task};
use crate::{Result, Tensor};

#[derive(Clone, Debug)]
pub(crate) struct Cnp {
    context: Mlp,
    /// Present for the in-context variant.
    in_context: Option<Mlp>,
    target: Mlp,
    decoder: Decoder,
    d_z: usize,
}

impl Cnp {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let dims = cfg.deepset_dims();
        let context = Mlp::new(store, rng, "context_deepset", &dims);
        let in_context = (cfg.kind == ModelKind::IciclCnp).then(|| Mlp::new(store, rng, "in_context_deepset", &dims));
        let target = Mlp::new(store, rng, "target_embed", &cfg.pointwise_dims(cfg.d_x, cfg.d_z));
        let latents = if in_context.is_some() { 3 } else { 2 };
        let decoder = Decoder::new(store, rng, cfg, latents * cfg.d_z);
        Self {
            context,
            in_context,
            target,
            decoder,
            d_z: cfg.d_z,
        }
    }

    /// Mean point-wise embedding `[1×D_z]`; zeros for an empty dataset.
    fn latent(&self, mlp: &Mlp, g: &mut Graph, d: &Dataset) -> Result<Var> {
        if d.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[1, self.d_z])));
        }
        let tokens = xy_tokens(g, d)?;
        let h = mlp.forward(g, tokens)?;
        g.tape.mean_rows(h)
    }

    pub(crate) fn forward(&self, g: &mut Graph, task: &Task) -> Result<PredictionVars> {
        let mut parts = vec![self.latent(&self.context, g, &task.context)?];
        if let Some(ic) = &self.in_context {
            let latent = if task.in_context.is_empty() {
                g.constant(Tensor::zeros(&[1, self.d_z]))
            } else {
                let each = task
                    .in_context
                    .iter()
                    .map(|d| self.latent(ic, g, d))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = g.tape.concat_rows(&each)?;
                g.tape.mean_rows(stacked)?
            };
            parts.push(latent);
        }
        let latent = g.tape.concat_cols(&parts)?;
        let latent = g.tape.repeat_rows(latent, task.n_t())?;
        let xt = g.constant(task.target_x.clone());
        let zt = self.target.forward(g, xt)?;
        let h = g.tape.concat_cols(&[latent, zt])?;
        self.decoder.forward(g, h)
    }
}
