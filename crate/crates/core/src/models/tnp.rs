//! Pseudo-token transformer neural processes.

use super::{xy_tokens, Decoder, IciclVariant, ModelConfig, PredictionVars, PtStyle};
use crate::attention::TransformerBlock;
use crate::nn::{standard_normal, Graph, Mlp, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::AttnGroup;
use crate::tape::Var;
use crate::task::{Dataset, Task};
use crate::{Result, Tensor};
use std::ops::Range;

/// Point-wise embeddings: `cat(x, y)` for observed points, `x` for targets.
#[derive(Clone, Debug)]
pub(crate) struct PointEmbedding {
    context: Mlp,
    target: Mlp,
    d_z: usize,
}

impl PointEmbedding {
    fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Self {
        Self {
            context: Mlp::new(
                store,
                rng,
                "context_embed",
                &cfg.pointwise_dims(cfg.d_x + cfg.d_y, cfg.d_z),
            ),
            target: Mlp::new(store, rng, "target_embed", &cfg.pointwise_dims(cfg.d_x, cfg.d_z)),
            d_z: cfg.d_z,
        }
    }

    pub(crate) fn context(&self, g: &mut Graph, d: &Dataset) -> Result<Var> {
        if d.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, self.d_z])));
        }
        let tokens = xy_tokens(g, d)?;
        self.context.forward(g, tokens)
    }

    pub(crate) fn targets(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let xt = g.constant(x.clone());
        self.target.forward(g, xt)
    }
}

fn cross(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, name: String) -> TransformerBlock {
    TransformerBlock::new(store, rng, &name, cfg.block(), true)
}

fn selfattn(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, name: String) -> TransformerBlock {
    TransformerBlock::new(store, rng, &name, cfg.block(), false)
}

/// Datasets stacked top to bottom with the row range of each.
fn stack<'a>(
    parts: impl IntoIterator<Item = &'a Dataset>,
    d_x: usize,
    d_y: usize,
) -> Result<(Dataset, Vec<Range<usize>>)> {
    let parts: Vec<&Dataset> = parts.into_iter().collect();
    let stacked = if parts.is_empty() {
        Dataset::empty(d_x, d_y)
    } else {
        Dataset::stack(&parts)?
    };
    Ok((stacked, ranges(parts.iter().map(|d| d.len()))))
}

fn ranges(lens: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lens.into_iter()
        .map(|n| {
            start += n;
            start - n..start
        })
        .collect()
}

/// `copies` copies of the parameter `id` stacked top to bottom.
fn tile(g: &mut Graph, id: ParamId, copies: usize) -> Result<Var> {
    let p = g.param(id);
    if copies == 1 {
        Ok(p)
    } else {
        g.tape.concat_rows(&vec![p; copies])
    }
}

fn groups(queries: &[Range<usize>], keys: &[Range<usize>]) -> Vec<AttnGroup> {
    queries
        .iter()
        .zip(keys)
        .map(|(q, k)| AttnGroup {
            queries: q.clone(),
            keys: k.clone(),
        })
        .collect()
}

/// Updates rows `queries[i]` of `x` by cross-attending to rows `keys[i]` of
/// `context`. Groups with no queries or no keys skip the block entirely and
/// their rows pass through unchanged.
fn cross_grouped(
    g: &mut Graph,
    block: &TransformerBlock,
    x: Var,
    context: Var,
    queries: &[Range<usize>],
    keys: &[Range<usize>],
) -> Result<Var> {
    let active: Vec<usize> = (0..queries.len())
        .filter(|&i| !queries[i].is_empty() && !keys[i].is_empty())
        .collect();
    if active.is_empty() {
        return Ok(x);
    }
    let n = g.value(x).rows();
    if active.iter().map(|&i| queries[i].len()).sum::<usize>() == n {
        let live: Vec<_> = active.iter().map(|&i| queries[i].clone()).collect();
        let live_keys: Vec<_> = active.iter().map(|&i| keys[i].clone()).collect();
        return block.forward_grouped(g, x, Some(context), groups(&live, &live_keys));
    }
    let rows: Vec<usize> = active.iter().flat_map(|&i| queries[i].clone()).collect();
    let sub_groups = groups(
        &ranges(active.iter().map(|&i| queries[i].len())),
        &active.iter().map(|&i| keys[i].clone()).collect::<Vec<_>>(),
    );
    let sub = g.tape.gather_rows(x, &rows)?;
    let updated = block.forward_grouped(g, sub, Some(context), sub_groups)?;
    let mut order: Vec<usize> = (0..n).collect();
    for (p, &r) in rows.iter().enumerate() {
        order[r] = n + p;
    }
    let both = g.tape.concat_rows(&[x, updated])?;
    g.tape.gather_rows(both, &order)
}

/// Self-attention within each row range of `x`.
fn self_grouped(g: &mut Graph, block: &TransformerBlock, x: Var, rows: &[Range<usize>]) -> Result<Var> {
    block.forward_grouped(g, x, None, groups(rows, rows))
}

/// Row layout shared by both pseudo-token models for a batch of tasks.
struct Layout {
    zc: Var,
    zt: Var,
    ctx_rows: Vec<Range<usize>>,
    target_rows: Vec<Range<usize>>,
    u: Var,
    u_rows: Vec<Range<usize>>,
}

impl Layout {
    fn new(g: &mut Graph, embed: &PointEmbedding, u0: ParamId, tasks: &[Task]) -> Result<Self> {
        let (d_x, d_y) = (tasks[0].target_x.cols(), tasks[0].context.d_y());
        let (ctx, ctx_rows) = stack(tasks.iter().map(|t| &t.context), d_x, d_y)?;
        let zc = embed.context(g, &ctx)?;
        let xs: Vec<&Tensor> = tasks.iter().map(|t| &t.target_x).collect();
        let zt = embed.targets(g, &Tensor::stack_rows(&xs)?)?;
        let target_rows = ranges(tasks.iter().map(|t| t.n_t()));
        let u = tile(g, u0, tasks.len())?;
        let p = g.param(u0);
        let m = g.value(p).rows();
        Ok(Self {
            zc,
            zt,
            ctx_rows,
            target_rows,
            u,
            u_rows: ranges(vec![m; tasks.len()]),
        })
    }
}

#[derive(Clone, Debug)]
struct PtLayer {
    u_from_ctx: TransformerBlock,
    /// Self-attention on `U` (perceiver) or context reading `U` (IST).
    mix: TransformerBlock,
    t_from_u: TransformerBlock,
}

#[derive(Clone, Debug)]
pub(crate) struct PtTnp {
    pub(crate) embed: PointEmbedding,
    u0: ParamId,
    layers: Vec<PtLayer>,
    decoder: Decoder,
    style: PtStyle,
}

impl PtTnp {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let embed = PointEmbedding::new(store, rng, cfg);
        let u0 = store.add("u", standard_normal(rng, cfg.m, cfg.d_z));
        let layers = (0..cfg.layers)
            .map(|l| PtLayer {
                u_from_ctx: cross(store, rng, cfg, format!("layer{l}.u_from_ctx")),
                mix: match cfg.style {
                    PtStyle::Perceiver => selfattn(store, rng, cfg, format!("layer{l}.u_self")),
                    PtStyle::Ist => cross(store, rng, cfg, format!("layer{l}.ctx_from_u")),
                },
                t_from_u: cross(store, rng, cfg, format!("layer{l}.t_from_u")),
            })
            .collect();
        let decoder = Decoder::new(store, rng, cfg, cfg.d_z);
        Self {
            embed,
            u0,
            layers,
            decoder,
            style: cfg.style,
        }
    }

    /// Target rows of all `tasks` stacked in order; tasks never see each other.
    pub(crate) fn forward(&self, g: &mut Graph, tasks: &[Task]) -> Result<PredictionVars> {
        let Layout {
            mut zc,
            mut zt,
            ctx_rows,
            target_rows,
            mut u,
            u_rows,
        } = Layout::new(g, &self.embed, self.u0, tasks)?;
        for layer in &self.layers {
            u = cross_grouped(g, &layer.u_from_ctx, u, zc, &u_rows, &ctx_rows)?;
            match self.style {
                PtStyle::Perceiver => u = self_grouped(g, &layer.mix, u, &u_rows)?,
                PtStyle::Ist => zc = cross_grouped(g, &layer.mix, zc, u, &ctx_rows, &u_rows)?,
            }
            zt = cross_grouped(g, &layer.t_from_u, zt, u, &target_rows, &u_rows)?;
        }
        self.decoder.forward(g, zt)
    }
}

#[derive(Clone, Debug)]
struct IciclLayer {
    u_from_ctx: TransformerBlock,
    u_self: TransformerBlock,
    t_from_u: TransformerBlock,
    ic_from_data: TransformerBlock,
    ic_from_u: TransformerBlock,
    ic_self: TransformerBlock,
    u_from_ic: TransformerBlock,
}

/// Weights of the in-context branch and the initial `U_ic` are shared by
/// every in-context dataset.
#[derive(Clone, Debug)]
pub(crate) struct IciclTnp {
    pub(crate) embed: PointEmbedding,
    u0: ParamId,
    u_ic0: ParamId,
    layers: Vec<IciclLayer>,
    decoder: Decoder,
    variant: IciclVariant,
}

impl IciclTnp {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let embed = PointEmbedding::new(store, rng, cfg);
        let u0 = store.add("u", standard_normal(rng, cfg.m, cfg.d_z));
        let u_ic0 = store.add("u_ic", standard_normal(rng, cfg.m_ic, cfg.d_z));
        let layers = (0..cfg.layers)
            .map(|l| IciclLayer {
                u_from_ctx: cross(store, rng, cfg, format!("layer{l}.u_from_ctx")),
                u_self: selfattn(store, rng, cfg, format!("layer{l}.u_self")),
                t_from_u: cross(store, rng, cfg, format!("layer{l}.t_from_u")),
                ic_from_data: cross(store, rng, cfg, format!("layer{l}.ic_from_data")),
                ic_from_u: cross(store, rng, cfg, format!("layer{l}.ic_from_u")),
                ic_self: selfattn(store, rng, cfg, format!("layer{l}.ic_self")),
                u_from_ic: cross(store, rng, cfg, format!("layer{l}.u_from_ic")),
            })
            .collect();
        let decoder = Decoder::new(store, rng, cfg, cfg.d_z);
        Self {
            embed,
            u0,
            u_ic0,
            layers,
            decoder,
            variant: cfg.variant,
        }
    }

    /// Target rows of all `tasks` stacked in order. Every in-context dataset
    /// of every task runs through the branch at once; grouped attention keeps
    /// datasets and tasks apart.
    pub(crate) fn forward(&self, g: &mut Graph, tasks: &[Task]) -> Result<PredictionVars> {
        let Layout {
            zc,
            mut zt,
            ctx_rows,
            target_rows,
            mut u,
            u_rows,
        } = Layout::new(g, &self.embed, self.u0, tasks)?;
        let (d_x, d_y) = (tasks[0].target_x.cols(), tasks[0].context.d_y());
        let (ic, data_rows) = stack(tasks.iter().flat_map(|t| &t.in_context), d_x, d_y)?;
        let n_ic = data_rows.len();
        let u_ic0 = g.param(self.u_ic0);
        let m_ic = g.value(u_ic0).rows();
        let slots = ranges(vec![m_ic; n_ic]);
        // Pseudo-token rows of all in-context datasets of task `b`, and the
        // pseudo-token rows of the task each dataset belongs to.
        let mut task_slots = Vec::with_capacity(tasks.len());
        let mut owner_rows = Vec::with_capacity(n_ic);
        for (b, t) in tasks.iter().enumerate() {
            let first = owner_rows.len() * m_ic;
            task_slots.push(first..first + t.n_ic() * m_ic);
            owner_rows.extend(std::iter::repeat_n(u_rows[b].clone(), t.n_ic()));
        }
        let mut branch = None;
        if n_ic > 0 {
            let z_ic = self.embed.context(g, &ic)?;
            branch = Some((z_ic, tile(g, self.u_ic0, n_ic)?));
        }
        for layer in &self.layers {
            if let Some((z_ic, u_ic)) = branch.as_mut() {
                *u_ic = cross_grouped(g, &layer.ic_from_data, *u_ic, *z_ic, &slots, &data_rows)?;
            }
            u = cross_grouped(g, &layer.u_from_ctx, u, zc, &u_rows, &ctx_rows)?;
            if self.variant == IciclVariant::Alt {
                if let Some((_, u_ic)) = branch {
                    u = cross_grouped(g, &layer.u_from_ic, u, u_ic, &u_rows, &task_slots)?;
                }
            }
            if let Some((_, u_ic)) = branch.as_mut() {
                if self.variant == IciclVariant::Main {
                    *u_ic = cross_grouped(g, &layer.ic_from_u, *u_ic, u, &slots, &owner_rows)?;
                }
                *u_ic = self_grouped(g, &layer.ic_self, *u_ic, &slots)?;
            }
            u = self_grouped(g, &layer.u_self, u, &u_rows)?;
            if let Some((_, u_ic)) = branch.as_mut() {
                match self.variant {
                    IciclVariant::Main => u = cross_grouped(g, &layer.u_from_ic, u, *u_ic, &u_rows, &task_slots)?,
                    IciclVariant::Alt => *u_ic = cross_grouped(g, &layer.ic_from_u, *u_ic, u, &slots, &owner_rows)?,
                }
            }
            zt = cross_grouped(g, &layer.t_from_u, zt, u, &target_rows, &u_rows)?;
        }
        self.decoder.forward(g, zt)
    }
}
