//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns one gradient per node that depends on a trainable leaf.
//!
//! Learnable weights live in a [`ParamStore`]; the tape borrows the store and
//! creates at most one leaf per parameter, so weights reused several times in
//! one pass (the shared scheme) accumulate their gradients automatically.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, BilinearCell, Tensor, NORM_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

static EMPTY_STORE: ParamStore = ParamStore {
    names: Vec::new(),
    values: Vec::new(),
};

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Every parameter tensor, in registration order.
    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    L2NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    BilinearGather {
        maps: Vec<Var>,
        coords: Var,
        points: usize,
    },
    HeadWeightedSum {
        values: Var,
        weights: Var,
        heads: usize,
    },
    FocalCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new(&EMPTY_STORE)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param => true,
            op => op_parents(op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.shape().last().copied().unwrap_or(1);
        if xv.ndim() != 2 || bv.shape() != [n] {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = tensor::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Row-wise `x / ||x||`, with rows of norm below `1e-12` mapped to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        if xv.ndim() != 2 {
            return Err(Error::Invalid("l2_normalize_rows expects a matrix".into()));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for row in out.data_mut().chunks_mut(n) {
            let normalized = tensor::l2_normalize(row);
            row.copy_from_slice(&normalized);
        }
        Ok(self.push(out, Op::L2NormalizeRows(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.ndim() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.ndim() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || start + len > xv.cols() || len == 0 {
            return Err(Error::Invalid(format!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || index.iter().any(|&i| i >= xv.rows()) || index.is_empty() {
            return Err(Error::Invalid(format!(
                "gather_rows index {index:?} invalid for {:?}",
                xv.shape()
            )));
        }
        let data: Vec<f64> = index.iter().flat_map(|&i| xv.row(i).to_vec()).collect();
        let out = Tensor::new(vec![index.len(), xv.cols()], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Bilinear lookups into a stack of `C×H×W` maps.
    ///
    /// `coords` is `R×2` in pixel units `(x, y)`; row `r` reads level
    /// `(r / points) % maps.len()`. The result is `R×C`.
    pub fn bilinear_gather(&mut self, maps: &[Var], coords: Var, points: usize) -> Result<Var> {
        let cv = self.value(coords);
        if cv.ndim() != 2 || cv.cols() != 2 || points == 0 || maps.is_empty() {
            return Err(Error::Invalid(format!(
                "bilinear_gather expects R×2 coordinates, got {:?}",
                cv.shape()
            )));
        }
        let channels = self.value(maps[0]).shape()[0];
        for m in maps {
            let s = self.value(*m).shape();
            if s.len() != 3 || s[0] != channels {
                return Err(Error::shape("bilinear_gather", self.shape(maps[0]), s));
            }
        }
        let rows = cv.rows();
        let mut data = Vec::with_capacity(rows * channels);
        for r in 0..rows {
            let map = self.value(maps[(r / points) % maps.len()]);
            let (x, y) = (cv.at2(r, 0), cv.at2(r, 1));
            data.extend(tensor::bilinear_sample(map, x, y)?);
        }
        let out = Tensor::new(vec![rows, channels], data)?;
        Ok(self.push(
            out,
            Op::BilinearGather {
                maps: maps.to_vec(),
                coords,
                points,
            },
        ))
    }

    /// Per-head weighted sums of sampled values.
    ///
    /// `values` is `(N·H·P)×D`, `weights` is `(N·H)×P`; head `h` owns the
    /// column block `[h·D/H, (h+1)·D/H)`. Output row `n`, block `h` is
    /// `Σ_p weights[n·H+h, p] · values[(n·H+h)·P+p, block h]`.
    pub fn head_weighted_sum(&mut self, values: Var, weights: Var, heads: usize) -> Result<Var> {
        let (vv, wv) = (self.value(values), self.value(weights));
        if vv.ndim() != 2 || wv.ndim() != 2 || heads == 0 {
            return Err(Error::shape("head_weighted_sum", vv.shape(), wv.shape()));
        }
        let (groups, points) = (wv.rows(), wv.cols());
        let width = vv.cols();
        if groups % heads != 0 || width % heads != 0 || vv.rows() != groups * points {
            return Err(Error::shape("head_weighted_sum", vv.shape(), wv.shape()));
        }
        let n = groups / heads;
        let dh = width / heads;
        let mut out = Tensor::zeros(&[n, width]);
        let od = out.data_mut();
        for g in 0..groups {
            let (q, h) = (g / heads, g % heads);
            let orow = &mut od[q * width + h * dh..q * width + (h + 1) * dh];
            for p in 0..points {
                let a = wv.at2(g, p);
                let vrow = &vv.row(g * points + p)[h * dh..(h + 1) * dh];
                for (o, v) in orow.iter_mut().zip(vrow) {
                    *o += a * v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::HeadWeightedSum {
                values,
                weights,
                heads,
            },
        ))
    }

    /// Mean over target rows of `-(1 - p_t)^gamma · ln p_t` with `p = softmax(logits)`.
    /// Rows without a target are skipped; with no target rows the loss is zero.
    pub fn focal_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        gamma: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.rows() != targets.len() {
            return Err(Error::shape("focal_cross_entropy", lv.shape(), &[targets.len()]));
        }
        if gamma < 0.0 {
            return Err(Error::Invalid("focal gamma must be non-negative".into()));
        }
        let classes = lv.cols();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= classes {
                return Err(Error::Invalid(format!("target {t} out of {classes} classes")));
            }
            let (log_pt, pt) = log_softmax_at(lv.row(r), t);
            total += -(1.0 - pt).powf(gamma) * log_pt;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalCrossEntropy {
                logits,
                targets: targets.to_vec(),
                gamma,
            },
        ))
    }

    /// Vector-Jacobian products of `loss` (a one-element node) against every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contrib) in self.vjp(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Constant | Op::Input | Op::Param => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, tensor::matmul(g, &tensor::transpose(val(*b))?)?));
                }
                if needs(*b) {
                    out.push((*b, tensor::matmul(&tensor::transpose(val(*a))?, g)?));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, tensor::transpose(g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRowBias(x, b) => {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(&gb))]
            }
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = y.clone();
                for (gr, (yr, gin)) in gx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n).zip(g.data().chunks(n)))
                {
                    let inner = tensor::dot(yr, gin);
                    for ((o, yv), gv) in gr.iter_mut().zip(yr).zip(gin) {
                        *o = yv * (gv - inner);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (xv, gm) = (val(*x), val(*gamma));
                let d = gm.numel();
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gxh = vec![0.0; d];
                for ((xr, gr), out) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                {
                    let (mean, rstd) = tensor::moments(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        gxh[j] = gr[j] * gm.data()[j];
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                    let m1 = gxh.iter().sum::<f64>() / d as f64;
                    let m2 = tensor::dot(&gxh, &xhat) / d as f64;
                    for j in 0..d {
                        out[j] = rstd * (gxh[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::vector(&ggamma)),
                    (*beta, Tensor::vector(&gbeta)),
                ]
            }
            Op::L2NormalizeRows(a) => {
                let (xv, y) = (val(*a), &node.value);
                let n = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let norm = tensor::dot(xv.row(r), xv.row(r)).sqrt();
                    if norm <= NORM_FLOOR {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = tensor::dot(yr, gr);
                    let out = &mut gx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] = (gr[j] - yr[j] * inner) / norm;
                    }
                }
                vec![(*a, gx)]
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = val(*p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    out.push((*p, Tensor::new(vec![rows, w], data)?));
                    offset += w;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let rows = val(*p).rows();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    out.push((*p, Tensor::new(vec![rows, cols], data)?));
                    offset += rows;
                }
                out
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (cols, len) = (xv.cols(), g.cols());
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..g.rows() {
                    gx.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(g.row(r));
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { x, index } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &i) in index.iter().enumerate() {
                    for (o, v) in gx.data_mut()[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(g.row(k))
                    {
                        *o += v;
                    }
                }
                vec![(*x, gx)]
            }
            Op::BilinearGather {
                maps,
                coords,
                points,
            } => bilinear_gather_vjp(&self.nodes, maps, *coords, *points, g)?,
            Op::HeadWeightedSum {
                values,
                weights,
                heads,
            } => {
                let (vv, wv) = (val(*values), val(*weights));
                let (groups, points) = (wv.rows(), wv.cols());
                let width = vv.cols();
                let dh = width / heads;
                let mut gv = Tensor::zeros(vv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                for grp in 0..groups {
                    let (q, h) = (grp / heads, grp % heads);
                    let grow = &g.row(q)[h * dh..(h + 1) * dh];
                    for p in 0..points {
                        let r = grp * points + p;
                        let vrow = &vv.row(r)[h * dh..(h + 1) * dh];
                        gw.data_mut()[grp * points + p] = tensor::dot(grow, vrow);
                        let a = wv.at2(grp, p);
                        let out = &mut gv.data_mut()[r * width + h * dh..r * width + (h + 1) * dh];
                        for (o, gval) in out.iter_mut().zip(grow) {
                            *o = a * gval;
                        }
                    }
                }
                vec![(*values, gv), (*weights, gw)]
            }
            Op::FocalCrossEntropy {
                logits,
                targets,
                gamma,
            } => {
                let lv = val(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut gl = Tensor::zeros(lv.shape());
                if count > 0 {
                    let scale = g.item() / count as f64;
                    let classes = lv.cols();
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let mut p = lv.row(r).to_vec();
                        tensor::softmax_in_place(&mut p);
                        let (log_pt, pt) = log_softmax_at(lv.row(r), t);
                        // a = dℓ/dp_t · p_t, so dℓ/dz_j = a · (δ_tj − p_j)
                        let q = 1.0 - pt;
                        let focal = if *gamma == 0.0 || q == 0.0 {
                            0.0
                        } else {
                            gamma * q.powf(gamma - 1.0) * pt * log_pt
                        };
                        let a = focal - q.powf(*gamma);
                        let out = &mut gl.data_mut()[r * classes..(r + 1) * classes];
                        for j in 0..classes {
                            let delta = if j == t { 1.0 } else { 0.0 };
                            out[j] = scale * a * (delta - p[j]);
                        }
                    }
                }
                vec![(*logits, gl)]
            }
        })
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Input | Op::Param => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Sum(a)
        | Op::Reshape(a)
        | Op::SoftmaxRows(a)
        | Op::L2NormalizeRows(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::SliceCols { x, .. } | Op::GatherRows { x, .. } => vec![*x],
        Op::BilinearGather { maps, coords, .. } => {
            let mut v = maps.clone();
            v.push(*coords);
            v
        }
        Op::HeadWeightedSum {
            values, weights, ..
        } => vec![*values, *weights],
        Op::FocalCrossEntropy { logits, .. } => vec![*logits],
    }
}

/// `(ln p_t, p_t)` for the softmax of `row`.
fn log_softmax_at(row: &[f64], t: usize) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_pt = row[t] - lse;
    (log_pt, log_pt.exp())
}

fn bilinear_gather_vjp(
    nodes: &[Node],
    maps: &[Var],
    coords: Var,
    points: usize,
    g: &Tensor,
) -> Result<Vec<(Var, Tensor)>> {
    let cv = &nodes[coords.0].value;
    let channels = g.cols();
    let mut gmaps: Vec<Tensor> = maps
        .iter()
        .map(|m| Tensor::zeros(nodes[m.0].value.shape()))
        .collect();
    let mut gc = Tensor::zeros(cv.shape());
    for r in 0..cv.rows() {
        let level = (r / points) % maps.len();
        let map = &nodes[maps[level].0].value;
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let cell = BilinearCell::locate(cv.at2(r, 0), cv.at2(r, 1));
        let grow = g.row(r);
        let (mut gx, mut gy) = (0.0, 0.0);
        for (xi, yi, wgt, dwx, dwy) in cell.corners() {
            if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                continue;
            }
            let base = yi as usize * w + xi as usize;
            let gm = gmaps[level].data_mut();
            for c in 0..channels {
                let v = map.data()[c * h * w + base];
                gx += grow[c] * dwx * v;
                gy += grow[c] * dwy * v;
                gm[c * h * w + base] += grow[c] * wgt;
            }
        }
        gc.data_mut()[2 * r] = gx;
        gc.data_mut()[2 * r + 1] = gy;
    }
    let mut out: Vec<(Var, Tensor)> = maps.iter().copied().zip(gmaps).collect();
    out.push((coords, gc));
    Ok(out)
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a stored parameter, or `None` if the pass never touched it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// One gradient per parameter in store order, zero-filled for unused parameters.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Relative error used by all gradient checks: `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let value = t.item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} is not finite")));
    }
    Ok(value)
}

/// Checks the analytic gradient of `f` at `x` against central differences
/// with step `h` and returns the maximum relative error over coordinates.
pub fn central_diff_gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    fd_check(f, x, h, false)
}

/// Like [`central_diff_gradcheck`], but the numeric derivative is the
/// Richardson combination `(4·D(h/2) − D(h)) / 3` of two central differences,
/// which is accurate to `O(h⁴)` and tolerates a much larger step.
pub fn extrapolated_gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    fd_check(f, x, h, true)
}

fn fd_check<F>(f: F, x: &Tensor, h: f64, extrapolate: bool) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::default();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::default();
        let v = tape.input(point.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut central = |step: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * step))
        };
        let numeric = if extrapolate {
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            (4.0 * fine - coarse) / 3.0
        } else {
            central(h)?
        };
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`gradcheck_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

/// Settings of [`gradcheck_params`].
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    /// Probe at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    /// Use the Richardson-extrapolated difference of [`extrapolated_gradcheck`].
    pub extrapolate: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_FD_STEP,
            max_coords: None,
            extrapolate: false,
        }
    }
}

/// Finite-difference check of every parameter in `store` for the scalar
/// built by `f`. `tamper` may edit the analytic gradients before comparison
/// (used to exercise failure paths).
pub fn gradcheck_params<F, R>(
    store: &ParamStore,
    opts: CheckOptions,
    rng: &mut R,
    tamper: impl Fn(&mut [Tensor]),
    f: F,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
    R: Rng + ?Sized,
{
    if opts.step <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?.param_grads(store)
    };
    tamper(&mut analytic);

    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = f(&mut tape)?;
        scalar_of(&tape, out)
    };
    let mut report = Vec::with_capacity(store.len());
    for (id, name, value) in store.iter() {
        let n = value.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => rand::seq::index::sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = value.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = orig + h;
                let plus = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig - h;
                let minus = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = if opts.extrapolate {
                let coarse = central(opts.step)?;
                (4.0 * central(opts.step / 2.0)? - coarse) / 3.0
            } else {
                central(opts.step)?
            };
            worst = worst.max(relative_error(analytic[id.0].data()[i], numeric));
        }
        report.push(ParamCheck {
            name: name.to_string(),
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
