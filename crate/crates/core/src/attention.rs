//! Multi-head attention and the pre-norm residual transformer block.

use serde::{Deserialize, Serialize};

use crate::nn::{glorot_uniform, Graph, LayerNorm, Mlp, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{AttnGroup, Var};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerBlockConfig {
    pub d_z: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_qk: usize,
    pub layers: usize,
    /// Multiply logits by `1/sqrt(d_qk)`. Off by default.
    pub scaled: bool,
}

impl Default for TransformerBlockConfig {
    fn default() -> Self {
        Self {
            d_z: 128,
            heads: 8,
            d_v: 16,
            d_qk: 16,
            layers: 5,
            scaled: false,
        }
    }
}

impl TransformerBlockConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_z", self.d_z),
            ("heads", self.heads),
            ("d_v", self.d_v),
            ("d_qk", self.d_qk),
            ("layers", self.layers),
        ];
        match extents.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    pub fn logit_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.d_qk as f64).sqrt()
        } else {
            1.0
        }
    }
}

enum Layout<'a> {
    Mask(Option<&'a [bool]>),
    Groups(Vec<AttnGroup>),
}

/// Per-head projections stored side by side: head `h` owns column block `h`
/// of `W_Q`, `W_K` and `W_V`. One output projection is shared by all heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub config: TransformerBlockConfig,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, config: TransformerBlockConfig) -> Self {
        let c = config;
        let (hq, hv) = (c.heads * c.d_qk, c.heads * c.d_v);
        Self {
            w_q: store.add(format!("{name}.w_q"), glorot_uniform(rng, c.d_z, hq)),
            w_k: store.add(format!("{name}.w_k"), glorot_uniform(rng, c.d_z, hq)),
            w_v: store.add(format!("{name}.w_v"), glorot_uniform(rng, c.d_z, hv)),
            w_o: store.add(format!("{name}.w_o"), glorot_uniform(rng, hv, c.d_z)),
            config,
        }
    }

    /// Attends from `queries` to `keys`; `blocked[n * M + m]` removes key `m`
    /// from query `n`.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, blocked: Option<&[bool]>) -> Result<Var> {
        self.attend(g, queries, keys, Layout::Mask(blocked))
    }

    /// Block-diagonal attention over row groups of `queries` and `keys`.
    pub fn grouped(&self, g: &mut Graph, queries: Var, keys: Var, groups: Vec<AttnGroup>) -> Result<Var> {
        self.attend(g, queries, keys, Layout::Groups(groups))
    }

    fn attend(&self, g: &mut Graph, queries: Var, keys: Var, layout: Layout<'_>) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            g.param(self.w_q),
            g.param(self.w_k),
            g.param(self.w_v),
            g.param(self.w_o),
        );
        let q = g.tape.matmul(queries, wq)?;
        let k = g.tape.matmul(keys, wk)?;
        let v = g.tape.matmul(keys, wv)?;
        let (heads, scale) = (self.config.heads, self.config.logit_scale());
        let o = match layout {
            Layout::Groups(groups) => g.tape.grouped_attention(q, k, v, heads, groups, scale)?,
            Layout::Mask(blocked) => g.tape.attention(q, k, v, heads, blocked, scale)?,
        };
        g.tape.matmul(o, wo)
    }

    pub fn mhsa(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.forward(g, z, z, None)
    }

    pub fn masked_mhsa(&self, g: &mut Graph, z: Var, blocked: &[bool]) -> Result<Var> {
        self.forward(g, z, z, Some(blocked))
    }

    pub fn mhca(&self, g: &mut Graph, queries: Var, keys: Var) -> Result<Var> {
        self.forward(g, queries, keys, None)
    }

    /// Attention weights `[N×M]` of `head` for concrete inputs.
    pub fn attention_weights(
        &self,
        params: &ParamStore,
        queries: &Tensor,
        keys: &Tensor,
        head: usize,
    ) -> Result<Tensor> {
        let c = self.config;
        if head >= c.heads {
            return Err(Error::Shape(format!("head {head} of {}", c.heads)));
        }
        let mut g = Graph::inference(params);
        let qs = g.constant(queries.clone());
        let ks = g.constant(keys.clone());
        let (wq, wk, wv) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v));
        let q = g.tape.matmul(qs, wq)?;
        let k = g.tape.matmul(ks, wk)?;
        let v = g.tape.matmul(ks, wv)?;
        let o = g.tape.attention(q, k, v, c.heads, None, c.logit_scale())?;
        let (n, m) = (queries.rows(), keys.rows());
        let w = g.tape.attention_weights(o).expect("attention node");
        Tensor::matrix(n, m, w[head * n * m..(head + 1) * n * m].to_vec())
    }
}

/// `x ← x + Attn(LN(x), LN(ctx or x))`, then `x ← x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_q: LayerNorm,
    /// Present only for cross-attention blocks.
    pub ln_kv: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, config: TransformerBlockConfig, cross: bool) -> Self {
        let d = config.d_z;
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            ln_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_kv"), d)),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), config),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), &[d, d, d, d]),
        }
    }

    pub fn is_cross(&self) -> bool {
        self.ln_kv.is_some()
    }

    /// Self-attention when `context` is `None`, cross-attention otherwise.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Option<Var>) -> Result<Var> {
        self.run(g, x, context, None)
    }

    /// As [`forward`](Self::forward) with attention restricted to `groups`;
    /// key ranges index `context`, or `x` itself for self-attention.
    pub fn forward_grouped(&self, g: &mut Graph, x: Var, context: Option<Var>, groups: Vec<AttnGroup>) -> Result<Var> {
        self.run(g, x, context, Some(groups))
    }

    fn run(&self, g: &mut Graph, x: Var, context: Option<Var>, groups: Option<Vec<AttnGroup>>) -> Result<Var> {
        let xq = self.ln_q.forward(g, x)?;
        let kv = match (context, &self.ln_kv) {
            (None, _) => xq,
            (Some(ctx), Some(ln)) => ln.forward(g, ctx)?,
            (Some(_), None) => return Err(Error::Shape("context given to a self-attention block".into())),
        };
        let attended = match groups {
            Some(groups) => self.attn.grouped(g, xq, kv, groups)?,
            None => self.attn.forward(g, xq, kv, None)?,
        };
        let x = g.tape.add(x, attended)?;
        let h = self.ln_mlp.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.tape.add(x, h)
    }
}
