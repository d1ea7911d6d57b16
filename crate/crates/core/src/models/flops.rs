//! Analytic multiply-accumulate counts of a forward pass.

use super::{ModelConfig, ModelKind, PtStyle};
use crate::task::Task;

/// Dataset sizes that determine the cost of a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskSizes {
    pub n_c: usize,
    pub n_t: usize,
    /// Size of each in-context dataset.
    pub n_ic: Vec<usize>,
}

impl TaskSizes {
    pub fn of(task: &Task) -> Self {
        Self {
            n_c: task.context.len(),
            n_t: task.n_t(),
            n_ic: task.in_context.iter().map(|d| d.len()).collect(),
        }
    }
}

fn mlp(dims: &[usize], rows: usize) -> u64 {
    dims.windows(2).map(|w| (rows * w[0] * w[1]) as u64).sum()
}

fn pointwise(cfg: &ModelConfig, d_in: usize, d_out: usize, rows: usize) -> u64 {
    mlp(&cfg.pointwise_dims(d_in, d_out), rows)
}

/// Projections, per-head products and output projection of one attention call.
fn attention(cfg: &ModelConfig, n: usize, m: usize) -> u64 {
    let (hq, hv) = (cfg.heads * cfg.d_qk, cfg.heads * cfg.d_v);
    let proj = n * cfg.d_z * hq + m * cfg.d_z * (hq + hv) + n * hv * cfg.d_z;
    (proj + cfg.heads * n * m * (cfg.d_qk + cfg.d_v)) as u64
}

/// Residual block with `n` primary rows attending to `m` keys.
fn block(cfg: &ModelConfig, n: usize, m: usize) -> u64 {
    attention(cfg, n, m) + (3 * n * cfg.d_z * cfg.d_z) as u64
}

fn decoder(cfg: &ModelConfig, d_in: usize, n_t: usize) -> u64 {
    pointwise(cfg, d_in, 2 * cfg.d_y, n_t)
}

/// Multiply-accumulates of one forward pass of `cfg` on a task of `sizes`.
pub fn count_flops(cfg: &ModelConfig, sizes: &TaskSizes) -> u64 {
    let (n_c, n_t) = (sizes.n_c, sizes.n_t);
    let d_xy = cfg.d_x + cfg.d_y;
    let target = pointwise(cfg, cfg.d_x, cfg.d_z, n_t);
    match cfg.kind {
        ModelKind::Cnp | ModelKind::IciclCnp => {
            let deepset = |n| mlp(&cfg.deepset_dims(), n);
            let mut total = deepset(n_c) + target;
            let latents = if cfg.kind == ModelKind::IciclCnp {
                total += sizes.n_ic.iter().map(|&n| deepset(n)).sum::<u64>();
                3
            } else {
                2
            };
            total + decoder(cfg, latents * cfg.d_z, n_t)
        }
        ModelKind::PtTnp => {
            let mut layer = block(cfg, n_t, cfg.m);
            if n_c > 0 {
                layer += block(cfg, cfg.m, n_c);
            }
            layer += match cfg.style {
                PtStyle::Perceiver => block(cfg, cfg.m, cfg.m),
                PtStyle::Ist if n_c > 0 => block(cfg, n_c, cfg.m),
                PtStyle::Ist => 0,
            };
            pointwise(cfg, d_xy, cfg.d_z, n_c) + target + cfg.layers as u64 * layer + decoder(cfg, cfg.d_z, n_t)
        }
        ModelKind::IciclTnp => {
            let (m, m_ic) = (cfg.m, cfg.m_ic);
            let mut layer = block(cfg, m, m) + block(cfg, n_t, m);
            if n_c > 0 {
                layer += block(cfg, m, n_c);
            }
            let n_ic = sizes.n_ic.len();
            for &n in &sizes.n_ic {
                layer += block(cfg, m_ic, n) + block(cfg, m_ic, m_ic);
            }
            if n_ic > 0 {
                // Keys and values of `U` are projected once for all datasets.
                layer += block(cfg, n_ic * m_ic, m) + block(cfg, m, n_ic * m_ic);
            }
            let embed: u64 = std::iter::once(n_c)
                .chain(sizes.n_ic.iter().copied())
                .map(|n| pointwise(cfg, d_xy, cfg.d_z, n))
                .sum();
            embed + target + cfg.layers as u64 * layer + decoder(cfg, cfg.d_z, n_t)
        }
    }
}

/// Reference cost of a transformer NP in which every context and target
/// token attends to all context tokens.
pub fn full_attention_tnp_flops(cfg: &ModelConfig, n_c: usize, n_t: usize) -> u64 {
    pointwise(cfg, cfg.d_x + cfg.d_y, cfg.d_z, n_c)
        + pointwise(cfg, cfg.d_x, cfg.d_z, n_t)
        + cfg.layers as u64 * block(cfg, n_c + n_t, n_c)
        + decoder(cfg, cfg.d_z, n_t)
}
