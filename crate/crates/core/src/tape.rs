//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! tape is already in topological order and `backward` is a single reverse
//! sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::ops::Range;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Large negative logit used for blocked attention pairs.
pub const MASK_SENTINEL: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        groups: Vec<AttnGroup>,
        weights: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    RepeatRows(Var),
    SliceCols(Var, usize),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    GaussianLogLik {
        y: Var,
        mean: Var,
        var: Var,
        /// Per-row weights; empty means all ones.
        row_weights: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::MeanRows(a)
            | Op::RepeatRows(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a) => vec![*a],
            Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::GaussianLogLik { y, mean, var, .. } => vec![*y, *mean, *var],
        }
    }
}

/// Query rows `queries` attend only to key rows `keys`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

impl AttnGroup {
    fn size(&self) -> usize {
        self.queries.len() * self.keys.len()
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// `c = a·b + beta·c` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the assertions above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of an `rows × cols` block, in place.
pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

fn mat_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matmuls and attention so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.value(v).rows()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = mat_dims(self.value(a), "matmul")?;
        let (k2, m) = mat_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            m,
            1,
            &mut out,
            m,
            1,
            0.0,
        );
        self.macs += (n * k * m) as u64;
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[N×D] + b[D]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.value(b).len() != d {
            return Err(Error::Shape(format!(
                "bias {:?} against input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                for (v, bb) in row.iter_mut().zip(&bias) {
                    *v += bb;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    /// `log(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| softplus_scalar(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Softplus(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }))
    }

    /// Normalizes each row over the last dimension, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape(format!(
                "layer norm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let rows = src.len().checked_div(d).unwrap_or(0);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head dot-product attention.
    ///
    /// `q` is `N × H·d_k`, `k` is `M × H·d_k` and `v` is `M × H·d_v`; head `h`
    /// owns column block `h`. `blocked`, when given, is an `N × M` row-major
    /// mask shared by all heads. Logits are multiplied by `scale` before the
    /// softmax over keys. Output is `N × H·d_v`, heads concatenated.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocked: Option<&[bool]>,
        scale: f64,
    ) -> Result<Var> {
        let group = AttnGroup {
            queries: 0..self.rows(q),
            keys: 0..self.rows(k),
        };
        self.attention_impl(q, k, v, heads, vec![group], blocked, scale)
    }

    /// Block-diagonal attention: each group's query rows see only its key
    /// rows. Query ranges must tile `0..N` in order; key ranges are non-empty
    /// and may overlap.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
        scale: f64,
    ) -> Result<Var> {
        let (n, m) = (self.rows(q), self.rows(k));
        let mut next = 0;
        for gr in &groups {
            if gr.queries.start != next || gr.queries.end < next {
                return Err(Error::Shape(format!("query ranges must tile 0..{n}")));
            }
            next = gr.queries.end;
            if gr.keys.is_empty() {
                return Err(Error::EmptyKeys);
            }
            if gr.keys.end > m {
                return Err(Error::Shape(format!("key range {:?} beyond {m} keys", gr.keys)));
            }
        }
        if next != n {
            return Err(Error::Shape(format!("query ranges must tile 0..{n}")));
        }
        self.attention_impl(q, k, v, heads, groups, None, scale)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_impl(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<AttnGroup>,
        blocked: Option<&[bool]>,
        scale: f64,
    ) -> Result<Var> {
        let (n, qw) = mat_dims(self.value(q), "attention queries")?;
        let (m, kw) = mat_dims(self.value(k), "attention keys")?;
        let (m2, vw) = mat_dims(self.value(v), "attention values")?;
        if heads == 0 || qw != kw || m != m2 || qw % heads != 0 || vw % heads != 0 {
            return Err(Error::Shape(format!(
                "attention with {heads} heads over q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if m == 0 {
            return Err(Error::EmptyKeys);
        }
        // A mask is only combined with the single full group.
        if let Some(mask) = blocked {
            if mask.len() != n * m {
                return Err(Error::Shape(format!(
                    "mask of length {} for {n}×{m} attention",
                    mask.len()
                )));
            }
            if let Some(row) = (0..n).find(|&r| mask[r * m..(r + 1) * m].iter().all(|&b| b)) {
                return Err(Error::DegenerateMask { row });
            }
        }
        let dk = qw / heads;
        let dv = vw / heads;
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let total: usize = groups.iter().map(AttnGroup::size).sum();
        let mut weights = vec![0.0; heads * total];
        let mut out = vec![0.0; n * vw];
        let mut off = 0;
        for gr in &groups {
            let (gn, gm) = (gr.queries.len(), gr.keys.len());
            if gn == 0 {
                continue;
            }
            let (q0, k0) = (gr.queries.start, gr.keys.start);
            for h in 0..heads {
                let w = &mut weights[off + h * gn * gm..off + (h + 1) * gn * gm];
                gemm(
                    gn,
                    dk,
                    gm,
                    &qd[q0 * qw + h * dk..],
                    qw,
                    1,
                    &kd[k0 * kw + h * dk..],
                    1,
                    kw,
                    w,
                    gm,
                    1,
                    0.0,
                );
                if scale != 1.0 {
                    w.iter_mut().for_each(|x| *x *= scale);
                }
                if let Some(mask) = blocked {
                    for (x, &b) in w.iter_mut().zip(mask) {
                        if b {
                            *x = MASK_SENTINEL;
                        }
                    }
                }
                softmax_rows_in_place(w, gm);
                if let Some(mask) = blocked {
                    for (x, &b) in w.iter_mut().zip(mask) {
                        if b {
                            *x = 0.0;
                        }
                    }
                }
                gemm(
                    gn,
                    gm,
                    dv,
                    w,
                    gm,
                    1,
                    &vd[k0 * vw + h * dv..],
                    vw,
                    1,
                    &mut out[q0 * vw + h * dv..],
                    vw,
                    1,
                    0.0,
                );
            }
            off += heads * gn * gm;
        }
        self.macs += (heads * total * (dk + dv)) as u64;
        let t = Tensor::matrix(n, vw, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                groups,
                weights,
            },
        ))
    }

    /// Attention weights recorded by an attention node: `H × N × M` for plain
    /// attention, one such block per group otherwise.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.rows(p));
        for &p in parts {
            mat_dims(self.value(p), "concat_cols")?;
            if self.rows(p) != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row counts {} and {}",
                    rows,
                    self.rows(p)
                )));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let (_, cols) = mat_dims(self.value(*first), "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = mat_dims(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::Shape(format!("concat_rows widths {cols} and {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Mean over rows as a `1 × D` matrix; an empty input yields zeros.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = mat_dims(self.value(x), "mean_rows")?;
        let mut out = vec![0.0; d];
        if n > 0 {
            for r in 0..n {
                for (o, v) in out.iter_mut().zip(self.value(x).row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
        }
        let t = Tensor::matrix(1, d, out)?;
        Ok(self.push(t, Op::MeanRows(x)))
    }

    /// Tiles a `1 × D` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, d) = mat_dims(self.value(x), "repeat_rows")?;
        if r != 1 {
            return Err(Error::Shape(format!("repeat_rows expects one row, got {r}")));
        }
        let row = self.value(x).data().to_vec();
        let out = row.repeat(n);
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::RepeatRows(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = mat_dims(self.value(x), "slice_cols")?;
        if start > end || end > d {
            return Err(Error::Shape(format!("columns {start}..{end} of width {d}")));
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&self.value(x).row(r)[start..end]);
        }
        let t = Tensor::matrix(n, end - start, out)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ −½ log(2π var) − (y − mean)² / (2 var)` over all elements.
    pub fn gaussian_log_likelihood(&mut self, y: Var, mean: Var, var: Var) -> Result<Var> {
        self.weighted_gaussian_log_likelihood(y, mean, var, &[])
    }

    /// As [`gaussian_log_likelihood`](Self::gaussian_log_likelihood) with the
    /// terms of row `r` multiplied by `row_weights[r]`; empty weights mean one.
    pub fn weighted_gaussian_log_likelihood(
        &mut self,
        y: Var,
        mean: Var,
        var: Var,
        row_weights: &[f64],
    ) -> Result<Var> {
        self.same_shape(y, mean, "log-likelihood")?;
        self.same_shape(y, var, "log-likelihood")?;
        if !row_weights.is_empty() {
            let (n, _) = mat_dims(self.value(y), "log-likelihood")?;
            if row_weights.len() != n {
                return Err(Error::Shape(format!("{} row weights for {n} rows", row_weights.len())));
            }
        }
        let vs = self.value(var).data();
        if let Some(bad) = vs.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("non-positive variance {bad}")));
        }
        let (yd, md) = (self.value(y).data(), self.value(mean).data());
        let total = if row_weights.is_empty() {
            gaussian_log_density_sum(yd, md, vs)
        } else {
            let d = self.shape(y)[1];
            (0..row_weights.len())
                .map(|r| {
                    let rows = r * d..(r + 1) * d;
                    row_weights[r] * gaussian_log_density_sum(&yd[rows.clone()], &md[rows.clone()], &vs[rows])
                })
                .sum()
        };
        let op = Op::GaussianLogLik {
            y,
            mean,
            var,
            row_weights: row_weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Rows `idx` of `x`, in order; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = mat_dims(self.value(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} of {n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            out.extend_from_slice(self.value(x).row(r));
        }
        let t = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec())))
    }

    /// Fills gradients of `loss` with respect to every tape node that requires
    /// them and is reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Runs `f` against the (lazily zeroed) gradient buffer of `v`, if `v`
    /// needs one.
    fn with_grad<F: FnOnce(&[Node], &mut [f64])>(&mut self, v: Var, f: F) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let mut buf = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; len]);
        f(&self.nodes, &mut buf);
        self.grads[v.0] = Some(buf);
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Detach the op so its cached buffers can be read while input grads
        // are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                // dA = G · Bᵀ
                self.with_grad(a, |nodes, ga| {
                    gemm(n, m, k, g, m, 1, nodes[b.0].value.data(), 1, m, ga, k, 1, 1.0)
                });
                // dB = Aᵀ · G
                self.with_grad(b, |nodes, gb| {
                    gemm(k, n, m, nodes[a.0].value.data(), 1, k, g, m, 1, gb, m, 1, 1.0)
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.with_grad(v, |_, ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (this, other) in [(a, b), (b, a)] {
                    self.with_grad(this, |nodes, gt| {
                        let o = nodes[other.0].value.data();
                        for ((x, gg), ov) in gt.iter_mut().zip(g).zip(o) {
                            *x += gg * ov;
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                self.with_grad(*x, |_, gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y));
                self.with_grad(*b, |_, gb| {
                    let d = gb.len();
                    if d > 0 {
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.with_grad(*x, |_, gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += c * y));
            }
            Op::AddScalar(x) => {
                self.with_grad(*x, |_, gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y));
            }
            Op::Relu(x) => {
                self.with_grad(*x, |nodes, gx| {
                    for ((a, y), o) in gx.iter_mut().zip(g).zip(nodes[i].value.data()) {
                        if *o > 0.0 {
                            *a += y;
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let x = *x;
                self.with_grad(x, |nodes, gx| {
                    for ((a, y), v) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        *a += y * sigmoid(*v);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.with_grad(*x, |nodes, gx| {
                    let y = nodes[i].value.data();
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + k;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain = *gain;
                let d = self.value(gain).len();
                let rows = inv_std.len();
                self.with_grad(*bias, |_, gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                self.with_grad(gain, |_, gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.with_grad(*x, |nodes, gx| {
                    let gain_v = nodes[gain.0].value.data();
                    let mut dxhat = vec![0.0; d];
                    let df = d as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gain_v[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            gx[r * d + j] += inv / df * (df * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                groups,
                weights,
            } => self.attention_backward(*q, *k, *v, *heads, *scale, groups, weights, g),
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.with_grad(p, |_, gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.with_grad(p, |_, gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, y)| *a += y);
                    });
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = 1.0 / n.max(1) as f64;
                self.with_grad(*x, |_, gx| {
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::RepeatRows(x) => {
                self.with_grad(*x, |_, gx| {
                    let d = gx.len();
                    if d > 0 {
                        for row in g.chunks(d) {
                            gx.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let start = *start;
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = self.shape(Var(i))[1];
                self.with_grad(*x, |_, gx| {
                    for r in 0..n {
                        for j in 0..w {
                            gx[r * d + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gs = g[0];
                self.with_grad(*x, |_, gx| gx.iter_mut().for_each(|a| *a += gs));
            }
            Op::GatherRows(x, idx) => {
                let d = self.shape(*x)[1];
                self.with_grad(*x, |_, gx| {
                    for (o, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[o * d + j];
                        }
                    }
                });
            }
            Op::GaussianLogLik {
                y,
                mean,
                var,
                row_weights,
            } => {
                let (y, mean, var) = (*y, *mean, *var);
                let len = self.value(y).len();
                let scale: Vec<f64> = if row_weights.is_empty() {
                    vec![g[0]; len]
                } else {
                    let d = len / row_weights.len();
                    (0..len).map(|j| g[0] * row_weights[j / d]).collect()
                };
                let resid = |nodes: &[Node], j: usize| nodes[y.0].value.data()[j] - nodes[mean.0].value.data()[j];
                self.with_grad(mean, |nodes, gm| {
                    let vv = nodes[var.0].value.data();
                    for (j, a) in gm.iter_mut().enumerate() {
                        *a += scale[j] * resid(nodes, j) / vv[j];
                    }
                });
                self.with_grad(y, |nodes, gy| {
                    let vv = nodes[var.0].value.data();
                    for (j, a) in gy.iter_mut().enumerate() {
                        *a -= scale[j] * resid(nodes, j) / vv[j];
                    }
                });
                self.with_grad(var, |nodes, gv| {
                    let vv = nodes[var.0].value.data();
                    for (j, a) in gv.iter_mut().enumerate() {
                        let r2 = resid(nodes, j).powi(2);
                        *a += scale[j] * (-0.5 / vv[j] + 0.5 * r2 / (vv[j] * vv[j]));
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        groups: &[AttnGroup],
        weights: &[f64],
        g: &[f64],
    ) {
        let qw = self.shape(q)[1];
        let vw = self.shape(v)[1];
        let (dk, dv) = (qw / heads, vw / heads);
        let need_logits = self.requires_grad(q) || self.requires_grad(k);
        // Offset of each group's weights.
        let offsets: Vec<usize> = groups
            .iter()
            .scan(0, |off, gr| {
                let o = *off;
                *off += heads * gr.size();
                Some(o)
            })
            .collect();
        // dV_h = A_hᵀ · dOut_h
        self.with_grad(v, |_, gv| {
            for (gr, &off) in groups.iter().zip(&offsets) {
                let (gn, gm) = (gr.queries.len(), gr.keys.len());
                if gn == 0 {
                    continue;
                }
                let (q0, k0) = (gr.queries.start, gr.keys.start);
                for h in 0..heads {
                    let w = &weights[off + h * gn * gm..off + (h + 1) * gn * gm];
                    gemm(
                        gm,
                        gn,
                        dv,
                        w,
                        1,
                        gm,
                        &g[q0 * vw + h * dv..],
                        vw,
                        1,
                        &mut gv[k0 * vw + h * dv..],
                        vw,
                        1,
                        1.0,
                    );
                }
            }
        });
        if !need_logits {
            return;
        }
        // Gradient of the pre-softmax logits, per head, already scaled.
        let mut dlogits = vec![0.0; weights.len()];
        {
            let vd = self.value(v).data();
            for (gr, &off) in groups.iter().zip(&offsets) {
                let (gn, gm) = (gr.queries.len(), gr.keys.len());
                if gn == 0 {
                    continue;
                }
                let (q0, k0) = (gr.queries.start, gr.keys.start);
                for h in 0..heads {
                    let range = off + h * gn * gm..off + (h + 1) * gn * gm;
                    let w = &weights[range.clone()];
                    let dl = &mut dlogits[range];
                    // dA = dOut_h · V_hᵀ
                    gemm(
                        gn,
                        dv,
                        gm,
                        &g[q0 * vw + h * dv..],
                        vw,
                        1,
                        &vd[k0 * vw + h * dv..],
                        1,
                        vw,
                        dl,
                        gm,
                        1,
                        0.0,
                    );
                    for r in 0..gn {
                        let wr = &w[r * gm..(r + 1) * gm];
                        let dr = &mut dl[r * gm..(r + 1) * gm];
                        let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (d, a) in dr.iter_mut().zip(wr) {
                            *d = a * (*d - dot) * scale;
                        }
                    }
                }
            }
        }
        // dQ_h = dL_h · K_h
        self.with_grad(q, |nodes, gq| {
            let kd = nodes[k.0].value.data();
            for (gr, &off) in groups.iter().zip(&offsets) {
                let (gn, gm) = (gr.queries.len(), gr.keys.len());
                if gn == 0 {
                    continue;
                }
                let (q0, k0) = (gr.queries.start, gr.keys.start);
                for h in 0..heads {
                    let dl = &dlogits[off + h * gn * gm..off + (h + 1) * gn * gm];
                    gemm(
                        gn,
                        gm,
                        dk,
                        dl,
                        gm,
                        1,
                        &kd[k0 * qw + h * dk..],
                        qw,
                        1,
                        &mut gq[q0 * qw + h * dk..],
                        qw,
                        1,
                        1.0,
                    );
                }
            }
        });
        // dK_h = dL_hᵀ · Q_h
        self.with_grad(k, |nodes, gk| {
            let qd = nodes[q.0].value.data();
            for (gr, &off) in groups.iter().zip(&offsets) {
                let (gn, gm) = (gr.queries.len(), gr.keys.len());
                if gn == 0 {
                    continue;
                }
                let (q0, k0) = (gr.queries.start, gr.keys.start);
                for h in 0..heads {
                    let dl = &dlogits[off + h * gn * gm..off + (h + 1) * gn * gm];
                    gemm(
                        gm,
                        gn,
                        dk,
                        dl,
                        1,
                        gm,
                        &qd[q0 * qw + h * dk..],
                        qw,
                        1,
                        &mut gk[k0 * qw + h * dk..],
                        qw,
                        1,
                        1.0,
                    );
                }
            }
        });
    }
}

pub(crate) fn gaussian_log_density_sum(y: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    y.iter()
        .zip(mean)
        .zip(var)
        .map(|((y, m), v)| -0.5 * (LN_2PI + v.ln()) - (y - m).powi(2) / (2.0 * v))
        .sum()
}
