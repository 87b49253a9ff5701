//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough context to
//! compute input gradients. [`Graph::backward`] walks the tape once, in exact
//! reverse recording order. A second call on the same graph is rejected.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{self, flops, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{
    broadcast_shape, broadcast_to, reduce_to, row_major_strides, Tensor,
};
use crate::error::{MmtError, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Arc<[usize]> },
    GatherRows { x: Var, index: Arc<[usize]> },
    ScatterAdd { x: Var, index: Arc<[usize]> },
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
}

struct Node<'p> {
    value: Value<'p>,
    requires_grad: bool,
    op: Op,
}

type ParamKey = (u64, usize);

/// The recorded computation. `'p` is the lifetime of borrowed parameter
/// stores.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamKey, Var>,
    frozen: HashSet<u64>,
    no_grad: bool,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            no_grad: false,
            backward_done: false,
        }
    }

    /// A graph on which nothing requires gradients; used for inference.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters from `store` enter this graph as constants.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.uid());
    }

    fn push(&mut self, value: Value<'p>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && !self.no_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(value), rg, op)
    }

    /// A differentiable leaf (its gradient is kept after backward).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), false, Op::Leaf)
    }

    /// Borrows a parameter as a leaf. Repeated calls for the same parameter
    /// return the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let rg = !self.frozen.contains(&store.uid());
        let v = self.push(Value::Borrowed(store.get(id)), rg, Op::Leaf);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store` touched by this graph.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut out = vec![None; store.len()];
        for (&(uid, idx), &v) in &self.params {
            if uid == store.uid() {
                out[idx] = self.grad(v).cloned();
            }
        }
        Gradients::new(out)
    }

    /// Copies a value into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(MmtError::NonFinite(what.to_string()))
        }
    }

    // ---------------------------------------------------------------
    // elementwise

    fn binary_values(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).map_err(|_| {
            MmtError::shape(format!(
                "{name}: shapes {:?} and {:?} are not broadcastable",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let ba = broadcast_to(ta, &out);
        let bb = broadcast_to(tb, &out);
        let data = ba.data().iter().zip(bb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(out, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_values(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_values(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(t, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_values(a, b, "mul", |x, y| x * y)?;
        flops::add(t.numel());
        Ok(self.push_op(t, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        flops::add(t.numel());
        self.push_op(t, &[a], Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push_op(t, &[a], op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    // ---------------------------------------------------------------
    // linear algebra

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch
    /// axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(ta.data(), tb.data(), &mut out);
        flops::add(plan.batch() * plan.m * plan.k * plan.n);
        let t = Tensor::from_parts(plan.out_shape.clone(), out);
        Ok(self.push_op(t, &[a, b], Op::MatMul(a, b)))
    }

    // ---------------------------------------------------------------
    // layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(t, &[a], Op::Reshape(a)))
    }

    /// General axis permutation; `axes[i]` is the input axis placed at
    /// output position `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let t = permute_tensor(ta, axes)?;
        Ok(self.push_op(t, &[a], Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(MmtError::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| MmtError::shape("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(MmtError::shape(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(MmtError::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first, s
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let tp = self.value(p);
                let chunk = tp.shape()[axis] * inner;
                data.extend_from_slice(&tp.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::from_parts(shape, data);
        Ok(self.push_op(t, parts, Op::Concat(parts.to_vec(), axis)))
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(MmtError::shape(format!(
                "narrow axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(t, &[a], Op::Narrow { x: a, axis, start }))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| MmtError::shape(format!("split axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(MmtError::shape(format!(
                "split sizes {sizes:?} do not cover extent {extent}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(MmtError::shape(format!(
                "gather: {} indices for output shape {:?}",
                index.len(),
                shape
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.numel()) {
            return Err(MmtError::shape(format!(
                "gather index {bad} out of range for {} elements",
                ta.numel()
            )));
        }
        let data = index.iter().map(|&i| ta.data()[i]).collect();
        let t = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push_op(t, &[a], Op::Gather { x: a, index }))
    }

    /// Row gather on a `[rows, ..]` tensor: output row `r` is input row
    /// `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if shape.is_empty() {
            return Err(MmtError::shape("gather_rows on a scalar"));
        }
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(MmtError::shape(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(index.len() * row_len);
        for &r in index.iter() {
            data.extend_from_slice(&ta.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = index.len();
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(t, &[a], Op::GatherRows { x: a, index }))
    }

    /// `out.flat[index[i]] += a.flat[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let n: usize = shape.iter().product();
        if index.len() != ta.numel() {
            return Err(MmtError::shape(format!(
                "scatter_add: {} indices for {} values",
                index.len(),
                ta.numel()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(MmtError::shape(format!(
                "scatter index {bad} out of range for output shape {shape:?}"
            )));
        }
        let mut data = vec![0.0; n];
        for (&i, v) in index.iter().zip(ta.data()) {
            data[i] += v;
        }
        let t = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push_op(t, &[a], Op::ScatterAdd { x: a, index }))
    }

    // ---------------------------------------------------------------
    // normalisation

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if axis >= shape.len() {
            return Err(MmtError::shape(format!(
                "softmax axis {axis} out of range for {:?}",
                shape
            )));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut out = vec![0.0; ta.numel()];
        let x = ta.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::from_parts(shape.to_vec(), out);
        Ok(self.push_op(t, &[a], Op::Softmax(a, axis)))
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| MmtError::shape("layernorm on a scalar"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(MmtError::shape(format!(
                    "layernorm {name} shape {:?}, expected [{d}]",
                    self.shape(p)
                )));
            }
        }
        let rows = tx.numel() / d.max(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push_op(
            t,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ---------------------------------------------------------------
    // convolution

    /// 2-D convolution: `x [n, c_in, h, w]`, `w [c_out, c_in, k, k]`,
    /// optional `b [c_out]`, zero padding `pad`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(MmtError::shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                xs, ws
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(MmtError::shape(format!(
                    "conv2d bias {:?}, expected [{}]",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geom = conv_geom(xs, ws, stride, pad)?;
        let (n, c_out) = (xs[0], ws[0]);
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * c_out * ncol];
        let mut cols = vec![0.0; rows * ncol];
        let img = geom.c_in * geom.h * geom.w;
        for i in 0..n {
            kernels::im2col(&tx.data()[i * img..(i + 1) * img], &geom, &mut cols);
            let dst = &mut out[i * c_out * ncol..(i + 1) * c_out * ncol];
            kernels::gemm(c_out, rows, ncol, tw.data(), false, &cols, false, 0.0, dst);
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (c, chunk) in dst.chunks_mut(ncol).enumerate() {
                    for v in chunk {
                        *v += bias[c];
                    }
                }
            }
        }
        flops::add(n * c_out * rows * ncol);
        let t = Tensor::from_parts(vec![n, c_out, geom.h_out, geom.w_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(
            t,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    // ---------------------------------------------------------------
    // reductions and losses

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push_op(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MmtError::shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_loss")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            / ta.numel().max(1) as f64;
        Ok(self.push_op(Tensor::scalar(s), &[a, b], Op::L1(a, b)))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.numel().max(1) as f64;
        Ok(self.push_op(Tensor::scalar(s), &[a, b], Op::Mse(a, b)))
    }

    // ---------------------------------------------------------------
    // backward

    /// Reverse pass from a scalar root. Gradients of leaves stay available
    /// through [`Graph::grad`]; intermediate gradients are released.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(MmtError::Graph(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(MmtError::Graph(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        let node_shape = self.nodes[i].value.get().shape().to_vec();
        // Borrow juggling: compute every input gradient first, then
        // accumulate.
        let mut pending: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    pending.push((a, reduce_to(g, self.shape(a))));
                }
                if self.wants(b) {
                    pending.push((b, reduce_to(g, self.shape(b))));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    pending.push((a, reduce_to(g, self.shape(a))));
                }
                if self.wants(b) {
                    let mut r = reduce_to(g, self.shape(b));
                    r.data_mut().iter_mut().for_each(|v| *v = -*v);
                    pending.push((b, r));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (this, other) in [(a, b), (b, a)] {
                    if self.wants(this) {
                        let o = broadcast_to(self.value(other), &node_shape);
                        let prod: Vec<f64> =
                            g.data().iter().zip(o.data()).map(|(x, y)| x * y).collect();
                        let full = Tensor::from_parts(node_shape.clone(), prod);
                        pending.push((this, reduce_to(&full, self.shape(this))));
                    }
                }
            }
            Op::Scale(a, s) => {
                let data = g.data().iter().map(|v| v * s).collect();
                pending.push((*a, Tensor::from_parts(node_shape, data)));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
                if self.wants(a) {
                    let mut ga = vec![0.0; ta.numel()];
                    plan.grad_a(g.data(), tb.data(), &mut ga);
                    pending.push((a, Tensor::from_parts(ta.shape().to_vec(), ga)));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; tb.numel()];
                    plan.grad_b(ta.data(), g.data(), &mut gb);
                    pending.push((b, Tensor::from_parts(tb.shape().to_vec(), gb)));
                }
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                pending.push((*a, permute_tensor(g, &inv).expect("valid inverse")));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                pending.push((*a, g.clone().reshape(shape).expect("same numel")));
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let outer: usize = node_shape[..axis].iter().product();
                let inner: usize = node_shape[axis + 1..].iter().product();
                let total = node_shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[axis] * inner;
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            data.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        pending.push((p, Tensor::from_parts(ps, data)));
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let full = xs[*axis] * inner;
                let chunk = node_shape[*axis] * inner;
                let mut data = vec![0.0; outer * full];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    data[base..base + chunk].copy_from_slice(&g.data()[o * chunk..(o + 1) * chunk]);
                }
                pending.push((*x, Tensor::from_parts(xs, data)));
            }
            Op::Gather { x, index } => {
                let xs = self.shape(*x).to_vec();
                let mut data = vec![0.0; xs.iter().product()];
                for (&src, v) in index.iter().zip(g.data()) {
                    data[src] += v;
                }
                pending.push((*x, Tensor::from_parts(xs, data)));
            }
            Op::GatherRows { x, index } => {
                let xs = self.shape(*x).to_vec();
                let row_len: usize = xs[1..].iter().product();
                let mut data = vec![0.0; xs.iter().product()];
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut data[src * row_len..(src + 1) * row_len];
                    for (d, v) in dst.iter_mut().zip(&g.data()[r * row_len..(r + 1) * row_len]) {
                        *d += v;
                    }
                }
                pending.push((*x, Tensor::from_parts(xs, data)));
            }
            Op::ScatterAdd { x, index } => {
                let xs = self.shape(*x).to_vec();
                let data = index.iter().map(|&i| g.data()[i]).collect();
                pending.push((*x, Tensor::from_parts(xs, data)));
            }
            Op::Gelu(a) => {
                let xa = self.value(*a).data();
                let data = xa
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| gv * kernels::gelu_grad(*x))
                    .collect();
                pending.push((*a, Tensor::from_parts(node_shape, data)));
            }
            Op::Relu(a) => {
                let xa = self.value(*a).data();
                let data = xa
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                pending.push((*a, Tensor::from_parts(node_shape, data)));
            }
            Op::LeakyRelu(a, slope) => {
                let xa = self.value(*a).data();
                let data = xa
                    .iter()
                    .zip(g.data())
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { slope * gv })
                    .collect();
                pending.push((*a, Tensor::from_parts(node_shape, data)));
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[i].value.get().data();
                let (outer, len, inner) = axis_split(&node_shape, *axis);
                let mut out = vec![0.0; y.len()];
                let gd = g.data();
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            out[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                pending.push((*a, Tensor::from_parts(node_shape, out)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node_shape.last().expect("rank >= 1");
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let gh = gd[r * d + j] * gam[j];
                            m1 += gh;
                            m2 += gh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gh = gd[r * d + j] * gam[j];
                            gx[r * d + j] = rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    pending.push((*x, Tensor::from_parts(node_shape.clone(), gx)));
                }
                let (mut gg, mut gb) = (vec![0.0; d], vec![0.0; d]);
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat[r * d + j];
                        gb[j] += gd[r * d + j];
                    }
                }
                pending.push((*gamma, Tensor::from_parts(vec![d], gg)));
                pending.push((*beta, Tensor::from_parts(vec![d], gb)));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (x, w, b) = (*x, *w, *b);
                let (tx, tw) = (self.value(x), self.value(w));
                let geom =
                    conv_geom(tx.shape(), tw.shape(), *stride, *pad).expect("validated in forward");
                let (n, c_out) = (tx.shape()[0], tw.shape()[0]);
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let img = geom.c_in * geom.h * geom.w;
                let mut cols = vec![0.0; rows * ncol];
                let mut gcols = vec![0.0; rows * ncol];
                let mut gw = vec![0.0; tw.numel()];
                let mut gx = vec![0.0; tx.numel()];
                let mut gb = vec![0.0; c_out];
                let (want_x, want_w) = (self.wants(x), self.wants(w));
                for s in 0..n {
                    let gs = &g.data()[s * c_out * ncol..(s + 1) * c_out * ncol];
                    if want_w {
                        kernels::im2col(&tx.data()[s * img..(s + 1) * img], &geom, &mut cols);
                        kernels::gemm(c_out, ncol, rows, gs, false, &cols, true, 1.0, &mut gw);
                    }
                    if want_x {
                        kernels::gemm(rows, c_out, ncol, tw.data(), true, gs, false, 0.0, &mut gcols);
                        kernels::col2im(&gcols, &geom, &mut gx[s * img..(s + 1) * img]);
                    }
                    for (c, chunk) in gs.chunks(ncol).enumerate() {
                        gb[c] += chunk.iter().sum::<f64>();
                    }
                }
                if want_x {
                    pending.push((x, Tensor::from_parts(tx.shape().to_vec(), gx)));
                }
                if want_w {
                    pending.push((w, Tensor::from_parts(tw.shape().to_vec(), gw)));
                }
                if let Some(b) = b {
                    pending.push((b, Tensor::from_parts(vec![c_out], gb)));
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                pending.push((*a, Tensor::full(shape, g.item())));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = shape.iter().product::<usize>().max(1) as f64;
                pending.push((*a, Tensor::full(shape, g.item() / n)));
            }
            Op::L1(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = g.item() / ta.numel().max(1) as f64;
                let ga: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = ta.shape().to_vec();
                if self.wants(b) {
                    let gb = ga.iter().map(|v| -v).collect();
                    pending.push((b, Tensor::from_parts(shape.clone(), gb)));
                }
                pending.push((a, Tensor::from_parts(shape, ga)));
            }
            Op::Mse(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = 2.0 * g.item() / ta.numel().max(1) as f64;
                let ga: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let shape = ta.shape().to_vec();
                if self.wants(b) {
                    let gb = ga.iter().map(|v| -v).collect();
                    pending.push((b, Tensor::from_parts(shape.clone(), gb)));
                }
                pending.push((a, Tensor::from_parts(shape, ga)));
            }
        }
        for (v, t) in pending {
            self.accumulate(v, t);
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, k) = (xs[2], xs[3], ws[2]);
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(MmtError::shape(format!(
            "conv2d: kernel {k} stride {stride} pad {pad} does not fit {h}x{w}"
        )));
    }
    Ok(ConvGeom {
        c_in: xs[1],
        h,
        w,
        k,
        stride,
        pad,
        h_out: (h + 2 * pad - k) / stride + 1,
        w_out: (w + 2 * pad - k) / stride + 1,
    })
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len()
        || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
    {
        return Err(MmtError::shape(format!(
            "permute axes {axes:?} invalid for {shape:?}"
        )));
    }
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    // Innermost output axis is usually short; an odometer is plenty fast
    // for desk-scale activations.
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        data.push(t.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Shape bookkeeping for a batched, broadcast matrix product.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a offset, b offset) in matrices for every output batch entry.
    pairs: Vec<(usize, usize)>,
    /// `b` is a single shared matrix and `a` can be flattened into rows.
    flat: bool,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(MmtError::shape(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(MmtError::shape(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).map_err(|_| {
            MmtError::shape(format!("matmul batch axes not broadcastable: {sa:?} x {sb:?}"))
        })?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let flat = bb.iter().all(|&d| d == 1);
        let nb: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(nb);
        if !flat {
            let sa_al = aligned(ba, &batch);
            let sb_al = aligned(bb, &batch);
            let mut idx = vec![0usize; batch.len()];
            for _ in 0..nb {
                let oa: usize = idx.iter().zip(&sa_al).map(|(i, s)| i * s).sum();
                let ob: usize = idx.iter().zip(&sb_al).map(|(i, s)| i * s).sum();
                pairs.push((oa, ob));
                for ax in (0..batch.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < batch[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
        }
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            pairs,
            flat: flat && ba.iter().product::<usize>() == nb,
        })
    }

    fn batch(&self) -> usize {
        self.out_shape[..self.out_shape.len() - 2].iter().product()
    }

    fn out_numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.flat {
            kernels::gemm(self.batch() * m, k, n, a, false, b, false, 0.0, out);
            return;
        }
        for (i, &(oa, ob)) in self.pairs.iter().enumerate() {
            kernels::gemm(
                m,
                k,
                n,
                &a[oa * m * k..],
                false,
                &b[ob * k * n..],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }

    /// `ga += g · bᵀ`
    fn grad_a(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.flat {
            kernels::gemm(self.batch() * m, n, k, g, false, b, true, 0.0, ga);
            return;
        }
        for (i, &(oa, ob)) in self.pairs.iter().enumerate() {
            kernels::gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &b[ob * k * n..],
                true,
                1.0,
                &mut ga[oa * m * k..(oa + 1) * m * k],
            );
        }
    }

    /// `gb += aᵀ · g`
    fn grad_b(&self, a: &[f64], g: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.flat {
            kernels::gemm(k, self.batch() * m, n, a, true, g, false, 0.0, gb);
            return;
        }
        for (i, &(oa, ob)) in self.pairs.iter().enumerate() {
            kernels::gemm(
                k,
                m,
                n,
                &a[oa * m * k..],
                true,
                &g[i * m * n..],
                false,
                1.0,
                &mut gb[ob * k * n..(ob + 1) * k * n],
            );
        }
    }
}

/// Matrix-count strides of batch shape `s` aligned right inside `out`.
fn aligned(s: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(s);
    let lead = out.len() - s.len();
    (0..out.len())
        .map(|i| {
            if i < lead || s[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}
