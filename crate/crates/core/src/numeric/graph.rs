use std::collections::HashMap;

use super::kernels::{self, Bcast, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::tensor::{numel, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Relu,
    Gelu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    /// Output flat index `i` reads input flat index `map[i]`.
    Gather {
        a: Var,
        map: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    BroadcastTo {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SumAxis {
        a: Var,
        axis: usize,
        scale: f64,
    },
    SumAll {
        a: Var,
        scale: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resize {
        a: Var,
    },
    MaxPool2 {
        a: Var,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of executed operations supporting reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is always
/// topologically sorted.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Input node indices of `v`; leaves have none.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.inputs_of(&self.nodes[v.0].op).collect()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let tracked = self.grad_enabled
            && match &op {
                Op::Leaf => value.requires_grad(),
                _ => self.inputs_of(&op).any(|v| self.nodes[v.0].value.requires_grad()),
            };
        value = value.with_requires_grad(tracked);
        // Drop bookkeeping the backward pass will never read.
        let op = if tracked { op } else { self.untracked(op) };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn untracked(&self, op: Op) -> Op {
        match op {
            Op::Gather { a, .. } => Op::Gather { a, map: Vec::new() },
            Op::LayerNorm { x, gamma, beta, axis, .. } => Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat: Vec::new(),
                rstd: Vec::new(),
            },
            Op::MaxPool2 { a, .. } => Op::MaxPool2 { a, argmax: Vec::new() },
            other => other,
        }
    }

    fn inputs_of<'a>(&'a self, op: &'a Op) -> impl Iterator<Item = Var> + 'a {
        let list: Vec<Var> = match op {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape { a }
            | Op::BroadcastTo { a }
            | Op::Softmax { a, .. }
            | Op::SumAxis { a, .. }
            | Op::SumAll { a, .. }
            | Op::Resize { a }
            | Op::MaxPool2 { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        };
        list.into_iter()
    }

    // ---- leaves ----------------------------------------------------------

    /// Records a leaf. It is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf holding a copy of a stored parameter; repeated calls within one
    /// graph return the same node. A graph must therefore only be used with
    /// one store, and edits made to the store afterwards are not seen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id).tensor().clone();
        let mut t = t.with_requires_grad(true);
        t.set_grad(None);
        let v = self.push(t, Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// `(parameter, node)` pairs recorded in this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(p, v)| (*p, *v))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = kernels::broadcast_shapes(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let ia = Bcast::new(sa, &out_shape);
        let ib = Bcast::new(sb, &out_shape);
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&out_shape);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(da[ia.at(i)], db[ib.at(i)])).collect(),
        };
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let x = self.value(a);
        let f: fn(f64, f64) -> f64 = match kind {
            UnaryKind::Scale(_) => |x, c| x * c,
            UnaryKind::AddScalar(_) => |x, c| x + c,
            UnaryKind::Exp => |x, _| x.exp(),
            UnaryKind::Log => |x, _| x.ln(),
            UnaryKind::Sigmoid => |x, _| sigmoid(x),
            UnaryKind::LogSigmoid => |x, _| log_sigmoid(x),
            UnaryKind::Relu => |x, _| x.max(0.0),
            UnaryKind::Gelu => |x, _| gelu(x),
        };
        let c = match kind {
            UnaryKind::Scale(c) | UnaryKind::AddScalar(c) => c,
            _ => 0.0,
        };
        let data = x.data().iter().map(|&v| f(v, c)).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(&shape, data).expect("shape preserved"), Op::Unary { kind, a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// `ln(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::LogSigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    // ---- linear algebra --------------------------------------------------

    /// Batched matrix product `[..., M, K] x [..., K, N]`; leading batch
    /// dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = kernels::broadcast_shapes(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let (ia, ib) = (Bcast::new(ba, &batch), Bcast::new(bb, &batch));
        let nb = numel(&batch);
        let mut out = vec![0.0; nb * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..nb {
            let (oa, ob) = (ia.at(bi) * m * k, ib.at(bi) * k * n);
            kernels::gemm(
                m,
                k,
                n,
                &da[oa..oa + m * k],
                false,
                &db[ob..ob + k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }))
    }

    // ---- layout ----------------------------------------------------------

    fn gather(&mut self, a: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = self.data(a);
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(&shape, data).expect("gather shape"), Op::Gather { a, map })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let eff: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
        let map = strided_map(&out_shape, &eff);
        Ok(self.gather(a, out_shape, map))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if d0 >= axes.len() || d1 >= axes.len() {
            return Err(Error::shape("transpose", self.shape(a), &[d0, d1]));
        }
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        match kernels::broadcast_shapes(&src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", &src, shape)),
        }
        let idx = Bcast::new(&src, shape);
        let d = self.data(a);
        let data = (0..numel(shape)).map(|i| d[idx.at(i)]).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastTo { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            map.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(a, out_shape, map))
    }

    /// Reorders rows of a `[B, N, D]` tensor: `out[b, j] = a[b, order[b * N + j]]`.
    pub fn gather_rows(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || order.len() != shape[0] * shape[1] || order.iter().any(|&r| r >= shape[1]) {
            return Err(Error::shape("gather_rows", &shape, &[order.len()]));
        }
        let (n, d) = (shape[1], shape[2]);
        let mut map = Vec::with_capacity(numel(&shape));
        for (j, &r) in order.iter().enumerate() {
            let base = ((j / n) * n + r) * d;
            map.extend(base..base + d);
        }
        Ok(self.gather(a, shape, map))
    }

    // ---- normalization & reductions -------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..n {
                    out[at(j)] *= inv;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, axis }))
    }

    /// Normalizes along `axis` to zero mean / unit variance, then applies
    /// per-position `gamma` and `beta` (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", &shape, &[axis]));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xs = self.data(x);
        let (gs, bs) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| xs[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (xs[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let h = (xs[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    out[at(j)] = h * gs[j] + bs[j];
                }
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum", &shape, &[axis]));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &x[(o * n + j) * inner..][..inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, v)| *acc += v);
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { a, axis, scale }))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_all(&mut self, a: Var, mean: bool) -> Var {
        let x = self.data(a);
        let scale = if mean { 1.0 / x.len() as f64 } else { 1.0 };
        let s = x.iter().sum::<f64>() * scale;
        self.push(Tensor::scalar(s), Op::SumAll { a, scale })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.reduce_all(a, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.reduce_all(a, true)
    }

    // ---- spatial ---------------------------------------------------------

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [C_out, C, k, k]` and
    /// optional bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            pad,
        };
        if sx[2] + 2 * pad < geom.kernel || sx[3] + 2 * pad < geom.kernel {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, c_out) = (sx[0], sw[0]);
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let plane = ho * wo;
        let img_len = sx[1] * sx[2] * sx[3];
        let mut out = vec![0.0; batch * c_out * plane];
        let mut cols = vec![0.0; geom.col_rows() * plane];
        let (xd, wd) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        for n in 0..batch {
            let dst = &mut out[n * c_out * plane..(n + 1) * c_out * plane];
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            let img = &xd[n * img_len..(n + 1) * img_len];
            if geom.kernel == 1 && stride == 1 && pad == 0 {
                kernels::gemm(c_out, geom.channels, plane, wd, false, img, false, dst, 1.0);
            } else {
                kernels::im2col(img, geom, &mut cols);
                kernels::gemm(c_out, geom.col_rows(), plane, wd, false, &cols, false, dst, 1.0);
            }
        }
        Ok(self.push(
            Tensor::new(&[batch, c_out, ho, wo], out)?,
            Op::Conv2d { x, w, b, geom },
        ))
    }

    /// Pointwise convolution of `[C_in, H, W]` (or `[B, C_in, H, W]`) by
    /// `weight: [C_out, C_in]` plus `bias: [C_out]`.
    pub fn conv2d_1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sw.len() != 2 || !(sx.len() == 3 || sx.len() == 4) || sx[sx.len() - 3] != sw[1] {
            return Err(Error::shape("conv2d_1x1", &sx, &sw));
        }
        let x4 = if sx.len() == 3 {
            self.reshape(x, &[1, sx[0], sx[1], sx[2]])?
        } else {
            x
        };
        let w4 = self.reshape(weight, &[sw[0], sw[1], 1, 1])?;
        let y = self.conv2d(x4, w4, Some(bias), 1, 0)?;
        if sx.len() == 3 {
            self.reshape(y, &[sw[0], sx[1], sx[2]])
        } else {
            Ok(y)
        }
    }

    /// Bilinear resampling of the last two axes (align-corners-false).
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", &shape, &[out_h, out_w]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = numel(&shape[..shape.len() - 2]);
        let (ty, tx) = (kernels::linear_taps(h, out_h), kernels::linear_taps(w, out_w));
        let x = self.data(a);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape[nd - 2] = out_h;
        out_shape[nd - 1] = out_w;
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Resize { a }))
    }

    /// 2x2 max pooling with stride 2 over the last two axes (odd trailing
    /// rows/columns are dropped).
    pub fn max_pool2d(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] < 2 || shape[shape.len() - 1] < 2 {
            return Err(Error::shape("max_pool2d", &shape, &[2, 2]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = numel(&shape[..shape.len() - 2]);
        let x = self.data(a);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MaxPool2 { a, argmax }))
    }

    // ---- differentiation -------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Every tracked node reachable
    /// from `loss` receives its gradient (accumulated into any existing one).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].value.requires_grad() {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].value.requires_grad();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let ia = Bcast::new(va.shape(), out_shape);
                let ib = Bcast::new(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                if tracked(*a) {
                    let acc = slot(grads, *a, da.len());
                    for (j, gj) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => db[ib.at(j)],
                            BinaryKind::Div => 1.0 / db[ib.at(j)],
                        };
                        acc[ia.at(j)] += gj * d;
                    }
                }
                if tracked(*b) {
                    let acc = slot(grads, *b, db.len());
                    for (j, gj) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => da[ia.at(j)],
                            BinaryKind::Div => {
                                let y = db[ib.at(j)];
                                -da[ia.at(j)] / (y * y)
                            }
                        };
                        acc[ib.at(j)] += gj * d;
                    }
                }
            }
            Op::Unary { kind, a } => {
                if !tracked(*a) {
                    return;
                }
                let x = self.data(*a);
                let y = node.value.data();
                let acc = slot(grads, *a, x.len());
                for j in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Scale(c) => *c,
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::Exp => y[j],
                        UnaryKind::Log => 1.0 / x[j],
                        UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                        UnaryKind::LogSigmoid => sigmoid(-x[j]),
                        UnaryKind::Relu => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Gelu => gelu_grad(x[j]),
                    };
                    acc[j] += g[j] * d;
                }
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let out_shape = node.value.shape();
                let batch = &out_shape[..out_shape.len() - 2];
                let (ia, ib) = (Bcast::new(ba, batch), Bcast::new(bb, batch));
                let nb = numel(batch);
                if tracked(*a) {
                    let acc = slot(grads, *a, va.len());
                    for bi in 0..nb {
                        let (oa, ob) = (ia.at(bi) * m * k, ib.at(bi) * k * n);
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &vb.data()[ob..ob + k * n],
                            true,
                            &mut acc[oa..oa + m * k],
                            1.0,
                        );
                    }
                }
                if tracked(*b) {
                    let acc = slot(grads, *b, vb.len());
                    for bi in 0..nb {
                        let (oa, ob) = (ia.at(bi) * m * k, ib.at(bi) * k * n);
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va.data()[oa..oa + m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut acc[ob..ob + k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Gather { a, map } => {
                if tracked(*a) {
                    let acc = slot(grads, *a, self.value(*a).len());
                    for (gj, &src) in g.iter().zip(map) {
                        acc[src] += gj;
                    }
                }
            }
            Op::Reshape { a } => {
                if tracked(*a) {
                    let acc = slot(grads, *a, g.len());
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::BroadcastTo { a } => {
                if tracked(*a) {
                    let va = self.value(*a);
                    let idx = Bcast::new(va.shape(), node.value.shape());
                    let acc = slot(grads, *a, va.len());
                    for (j, gj) in g.iter().enumerate() {
                        acc[idx.at(j)] += gj;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if tracked(p) {
                        let acc = slot(grads, p, outer * len);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..len];
                            acc[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Softmax { a, axis } => {
                if !tracked(*a) {
                    return;
                }
                let y = node.value.data();
                let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                let acc = slot(grads, *a, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            acc[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                let gs = self.data(*gamma);
                if tracked(*beta) {
                    let acc = slot(grads, *beta, n);
                    for (j, gj) in g.iter().enumerate() {
                        acc[(j / inner) % n] += gj;
                    }
                }
                if tracked(*gamma) {
                    let acc = slot(grads, *gamma, n);
                    for (j, gj) in g.iter().enumerate() {
                        acc[(j / inner) % n] += gj * xhat[j];
                    }
                }
                if tracked(*x) {
                    let acc = slot(grads, *x, g.len());
                    let nf = n as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                let d = g[at(j)] * gs[j];
                                s1 += d;
                                s2 += d * xhat[at(j)];
                            }
                            let r = rstd[o * inner + i];
                            for j in 0..n {
                                let d = g[at(j)] * gs[j];
                                acc[at(j)] += r * (d - s1 / nf - xhat[at(j)] * s2 / nf);
                            }
                        }
                    }
                }
            }
            Op::SumAxis { a, axis, scale } => {
                if !tracked(*a) {
                    return;
                }
                let (outer, n, inner) = kernels::split_axis(self.shape(*a), *axis);
                let acc = slot(grads, *a, outer * n * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        acc[(o * n + j) * inner..][..inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y * scale);
                    }
                }
            }
            Op::SumAll { a, scale } => {
                if tracked(*a) {
                    let len = self.value(*a).len();
                    let d = g[0] * scale;
                    slot(grads, *a, len).iter_mut().for_each(|x| *x += d);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let batch = vx.shape()[0];
                let c_out = vw.shape()[0];
                let plane = geom.out_h() * geom.out_w();
                let img_len = vx.len() / batch;
                let pointwise = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
                let rows = geom.col_rows();
                let mut cols = vec![0.0; rows * plane];
                if let Some(b) = b {
                    if tracked(*b) {
                        let acc = slot(grads, *b, c_out);
                        for (j, chunk) in g.chunks(plane).enumerate() {
                            acc[j % c_out] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                if tracked(*w) {
                    let acc = slot(grads, *w, vw.len());
                    for nimg in 0..batch {
                        let img = &vx.data()[nimg * img_len..(nimg + 1) * img_len];
                        let gi = &g[nimg * c_out * plane..(nimg + 1) * c_out * plane];
                        let src: &[f64] = if pointwise {
                            img
                        } else {
                            kernels::im2col(img, *geom, &mut cols);
                            &cols
                        };
                        kernels::gemm(c_out, plane, rows, gi, false, src, true, acc, 1.0);
                    }
                }
                if tracked(*x) {
                    let acc = slot(grads, *x, vx.len());
                    for nimg in 0..batch {
                        let gi = &g[nimg * c_out * plane..(nimg + 1) * c_out * plane];
                        let dst = &mut acc[nimg * img_len..(nimg + 1) * img_len];
                        if pointwise {
                            kernels::gemm(rows, c_out, plane, vw.data(), true, gi, false, dst, 1.0);
                        } else {
                            kernels::gemm(rows, c_out, plane, vw.data(), true, gi, false, &mut cols, 0.0);
                            kernels::col2im(&cols, *geom, dst);
                        }
                    }
                }
            }
            Op::Resize { a } => {
                if !tracked(*a) {
                    return;
                }
                let shape = self.shape(*a);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let os = node.value.shape();
                let (out_h, out_w) = (os[os.len() - 2], os[os.len() - 1]);
                let planes = numel(&shape[..shape.len() - 2]);
                let (ty, tx) = (kernels::linear_taps(h, out_h), kernels::linear_taps(w, out_w));
                let acc = slot(grads, *a, planes * h * w);
                for p in 0..planes {
                    let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut acc[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let v = src[oy * out_w + ox];
                            dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += v * fy * (1.0 - fx);
                            dst[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
            }
            Op::MaxPool2 { a, argmax } => {
                if tracked(*a) {
                    let acc = slot(grads, *a, self.value(*a).len());
                    for (gj, &src) in g.iter().zip(argmax) {
                        acc[src] += gj;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Flat source index for each output position of a strided view.
fn strided_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    if n == 0 {
        map.push(0);
        return map;
    }
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    let last = out_shape[n - 1];
    let last_stride = src_strides[n - 1];
    while map.len() < total {
        for j in 0..last {
            map.push(off + j * last_stride);
        }
        // carry into the higher axes
        let mut d = n - 1;
        loop {
            if d == 0 {
                return map;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = g.matmul(a, eye).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);
        let q = g.matmul(eye, eye).unwrap();
        assert_eq!(g.data(q), &[1.0, 0.0, 0.0, 1.0]);
        let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(row, col).unwrap();
        assert_eq!(g.data(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let b = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 2]);
        assert_eq!(&g.data(c)[8..], &[9.0, 8.0, 11.0, 10.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(t(&[2], &[1000.0, 1000.0]));
        let s = g.softmax(b, 0).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);
        let c = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(c, 0).unwrap();
        assert!((g.data(s)[0] - 0.25).abs() < 1e-15);
        assert!((g.data(s)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::new();
        // channels (2, 3) at each of 2x2 pixels
        let x = g.constant(t(&[2, 2, 2], &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d_1x1(x, eye, zb).unwrap();
        assert_eq!(g.data(y), g.data(x));

        let ones = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let zb1 = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d_1x1(x, ones, zb1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        assert_eq!(g.data(y), &[5.0; 4]);

        let zw = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv2d_1x1(x, zw, b).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0, 2.0, 2.0, 2.0, 2.0]);

        let bad = g.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(g.conv2d_1x1(x, bad, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn resize_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64).sin()));
        let y = g.bilinear_resize(x, 3, 5).unwrap();
        assert_eq!(g.data(y), g.data(x));

        let c = g.constant(Tensor::full(&[1, 4, 4], 7.0));
        let y = g.bilinear_resize(c, 8, 8).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn backward_linear_and_product() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3], |i| i as f64).with_requires_grad(true));
        let y = g.input(t(&[3], &[4.0, -1.0, 0.5]).with_requires_grad(true));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3], |i| i as f64).with_requires_grad(true));
        let yv = g.input(t(&[3], &[4.0, -1.0, 0.5]).with_requires_grad(true));
        let p = g.mul(x, yv).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -1.0, 0.5]);
        let _ = y;
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_nodes_keep_no_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        let unused = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn no_grad_graph_tracks_nothing() {
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        let s = g.sum_all(x);
        assert!(!g.value(s).requires_grad());
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn permute_and_narrow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.data(y), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = g.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(g.data(z), &[1.0, 2.0, 4.0, 5.0]);
        let c = g.concat(&[z, x], 1).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 0.0, 1.0, 2.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert!((log_sigmoid(2.0) - sigmoid(2.0).ln()).abs() < 1e-15);
    }
}
