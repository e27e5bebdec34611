//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node, so node order is always topological.
//! [`Graph::backward`] walks the nodes in reverse and accumulates adjoints,
//! which makes gradients of shared subexpressions sum naturally.
//!
//! Tensors whose last axis is the feature axis and whose second-to-last axis
//! indexes tokens are the common currency of the model code; the ops below
//! (`matmul`, `add_bias`, `normalize`, `rotate_pairs`, `mean_tokens`, ...)
//! follow that convention and treat any leading axes as batch axes.

use std::sync::Arc;

use super::tensor::{kernels, lanes, Tensor};
use super::NumericsError;
use crate::scalar::{max_of, sum, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    /// `x / (1 + e^-x)`
    Swish,
    /// Tanh approximation of GELU.
    Gelu,
    Relu,
}

/// Precomputed cosines and sines for rotating coordinate pairs by a
/// position-dependent angle. Entry `[p * half + m]` is the angle of pair `m`
/// at position `p`.
#[derive(Clone, Debug)]
pub struct PairRotation<T> {
    pub positions: usize,
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias(NodeId, NodeId),
    MulGain(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    BatchMatMul { lhs: NodeId, rhs: NodeId, transpose_rhs: bool },
    Softmax { input: NodeId, axis: usize },
    Unary(NodeId, Unary),
    Normalize { input: NodeId, eps: T },
    Rotate { input: NodeId, table: Arc<PairRotation<T>> },
    Concat(Vec<NodeId>),
    MeanTokens(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    BceWithLogits { logits: NodeId, targets: Vec<T> },
    SoftmaxCrossEntropy { logits: NodeId, label: usize },
    PatchConv { image: NodeId, kernel: NodeId, patch: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `node`; zero when disconnected.
    pub fn get(&self, node: NodeId) -> Tensor<T> {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn take(&mut self, node: NodeId) -> Tensor<T> {
        match self.grads[node.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Unary {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Swish => x * sigmoid(x),
            Unary::Gelu => {
                let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                T::lit(0.5) * x * (T::one() + u.tanh())
            }
            Unary::Relu => max_of(x, T::zero()),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Unary::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Unary::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let th = (c * (x + a * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + th)
                    + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: gradients are tracked for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a vector of length `last_dim(a)` to every lane of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(bias));
        let d = va.last_dim();
        if vb.len() != d {
            return Err(mismatch("add_bias", va.shape(), vb.shape()));
        }
        let mut out = va.data().to_vec();
        for lane in out.chunks_mut(d) {
            for (o, &b) in lane.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// Multiplies every lane of `a` elementwise by a vector of length `last_dim(a)`.
    pub fn mul_gain(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vg) = (self.value(a), self.value(gain));
        let d = va.last_dim();
        if vg.len() != d {
            return Err(mismatch("mul_gain", va.shape(), vg.shape()));
        }
        let mut out = va.data().to_vec();
        for lane in out.chunks_mut(d) {
            for (o, &g) in lane.iter_mut().zip(vg.data()) {
                *o *= g;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(&[a, gain]);
        Ok(self.push(out, Op::MulGain(a, gain), rg))
    }

    /// `[.., k] · [k, m] -> [.., m]`, the matrix shared across leading axes.
    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.value(a).matmul(self.value(w))?;
        let rg = self.rg(&[a, w]);
        Ok(self.push(out, Op::MatMul(a, w), rg))
    }

    fn batch_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
        if shape.len() < 2 {
            return None;
        }
        let r = shape.len();
        let batch = shape[..r - 2].iter().product();
        Some((batch, shape[r - 2], shape[r - 1]))
    }

    /// Batched matrix product over the last two axes; with `transpose_rhs`
    /// computes `lhs · rhsᵀ` per batch entry.
    pub fn batch_matmul(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        transpose_rhs: bool,
    ) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(lhs), self.value(rhs));
        let err = || mismatch("batch_matmul", va.shape(), vb.shape());
        let (ba, n, k) = Self::batch_dims(va.shape()).ok_or_else(err)?;
        let (bb, r1, r2) = Self::batch_dims(vb.shape()).ok_or_else(err)?;
        let lead_ok = va.shape()[..va.rank() - 2] == vb.shape()[..vb.rank() - 2];
        let (kk, m) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
        if ba != bb || !lead_ok || kk != k {
            return Err(err());
        }
        let mut out = vec![T::zero(); ba * n * m];
        for b in 0..ba {
            let a_s = &va.data()[b * n * k..(b + 1) * n * k];
            let b_s = &vb.data()[b * r1 * r2..(b + 1) * r1 * r2];
            let o = &mut out[b * n * m..(b + 1) * n * m];
            if transpose_rhs {
                kernels::matmul_a_bt(a_s, b_s, o, n, m, k);
            } else {
                kernels::matmul(a_s, b_s, o, n, k, m);
            }
        }
        let mut shape = va.shape().to_vec();
        let r = shape.len();
        shape[r - 1] = m;
        let rg = self.rg(&[lhs, rhs]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul { lhs, rhs, transpose_rhs },
            rg,
        ))
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let out = super::tensor::softmax(self.value(input), axis)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Softmax { input, axis }, rg))
    }

    pub fn softmax_last(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let axis = self.value(input).rank() - 1;
        self.softmax(input, axis)
    }

    pub fn unary(&mut self, input: NodeId, f: Unary) -> NodeId {
        let out = self.value(input).map(|x| f.apply(x));
        let rg = self.rg(&[input]);
        self.push(out, Op::Unary(input, f), rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Sigmoid)
    }

    pub fn swish(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Swish)
    }

    pub fn gelu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Gelu)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(input, Unary::Relu)
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis, population variance.
    pub fn normalize(&mut self, input: NodeId, eps: T) -> NodeId {
        let v = self.value(input);
        let d = v.last_dim();
        let inv_d = T::one() / T::lit(d as f64);
        let mut out = v.data().to_vec();
        for lane in out.chunks_mut(d) {
            let mean = sum(lane.iter().copied()) * inv_d;
            let var = sum(lane.iter().map(|&x| (x - mean) * (x - mean))) * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            for x in lane.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[input]);
        self.push(out, Op::Normalize { input, eps }, rg)
    }

    /// Rotates adjacent coordinate pairs `(2m, 2m+1)` of each row by the
    /// angle `table[p, m]`, where `p` is the row's index along axis -2.
    pub fn rotate_pairs(
        &mut self,
        input: NodeId,
        table: Arc<PairRotation<T>>,
    ) -> Result<NodeId, NumericsError> {
        let v = self.value(input);
        let shape = v.shape();
        if shape.len() < 2 {
            return Err(NumericsError::InvalidShape { shape: shape.to_vec(), len: v.len() });
        }
        let d = v.last_dim();
        let n = shape[shape.len() - 2];
        if d != 2 * table.half || n > table.positions {
            return Err(mismatch("rotate_pairs", shape, &[table.positions, 2 * table.half]));
        }
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let p = r % n;
            for m in 0..table.half {
                let (c, s) = (table.cos[p * table.half + m], table.sin[p * table.half + m]);
                let (x1, x2) = (row[2 * m], row[2 * m + 1]);
                row[2 * m] = x1 * c - x2 * s;
                row[2 * m + 1] = x1 * s + x2 * c;
            }
        }
        let out = Tensor::from_parts(shape.to_vec(), out);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Rotate { input, table }, rg))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = parts.first().ok_or(NumericsError::EmptyAxis)?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", &lead, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), rg))
    }

    /// Mean over axis -2 (tokens): `[.., n, d] -> [.., d]`.
    pub fn mean_tokens(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(input);
        let shape = v.shape();
        if shape.len() < 2 {
            return Err(NumericsError::InvalidShape { shape: shape.to_vec(), len: v.len() });
        }
        let d = v.last_dim();
        let n = shape[shape.len() - 2];
        let batch = v.len() / (n * d);
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            for t in 0..n {
                let row = &v.data()[(b * n + t) * d..(b * n + t + 1) * d];
                for (o, &x) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let mut new_shape = shape[..shape.len() - 2].to_vec();
        new_shape.push(d);
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::MeanTokens(input), rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).mean());
        let rg = self.rg(&[input]);
        self.push(out, Op::Mean(input), rg)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId, NumericsError> {
        let v = self.value(logits);
        if v.len() != targets.len() {
            return Err(mismatch("bce_with_logits", v.shape(), &[targets.len()]));
        }
        let mut total = T::zero();
        for (&z, &y) in v.data().iter().zip(targets) {
            let softplus = max_of(z, T::zero()) + (-z.abs()).exp().ln_1p();
            total += softplus - y * z;
        }
        let out = Tensor::scalar(total / T::lit(targets.len() as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::BceWithLogits { logits, targets: targets.to_vec() }, rg))
    }

    /// `-ln softmax(logits)[label]` for a flat logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId, NumericsError> {
        let v = self.value(logits);
        if label >= v.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "label {label} out of range for {} logits",
                v.len()
            )));
        }
        let max = v.data().iter().fold(T::neg_infinity(), |m, &x| max_of(m, x));
        let lse = sum(v.data().iter().map(|&x| (x - max).exp())).ln() + max;
        let out = Tensor::scalar(lse - v.data()[label]);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, label }, rg))
    }

    /// Convolution with kernel size = stride = `patch` and no padding.
    ///
    /// `image` is `[B, H, W, C]`, `kernel` is `[E, C, patch, patch]`; the
    /// output is the token sequence `[B, (H/patch)·(W/patch), E]` in raster
    /// order over the patch grid.
    pub fn patch_conv(&mut self, image: NodeId, kernel: NodeId, patch: usize) -> Result<NodeId, NumericsError> {
        let (vi, vk) = (self.value(image), self.value(kernel));
        let (is, ks) = (vi.shape(), vk.shape());
        if is.len() != 4 || ks.len() != 4 || ks[1] != is[3] || ks[2] != patch || ks[3] != patch {
            return Err(mismatch("patch_conv", is, ks));
        }
        if patch == 0 || is[1] % patch != 0 || is[2] % patch != 0 {
            return Err(mismatch("patch_conv", is, ks));
        }
        let (b, h, w, c) = (is[0], is[1], is[2], is[3]);
        let e = ks[0];
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let img = vi.data();
        let ker = vk.data();
        let mut out = vec![T::zero(); b * n * e];
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let o = &mut out[((bi * n) + gy * gw + gx) * e..((bi * n) + gy * gw + gx + 1) * e];
                    for (oe, ov) in o.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for ci in 0..c {
                            for ky in 0..patch {
                                for kx in 0..patch {
                                    let pix = img[((bi * h + gy * patch + ky) * w + gx * patch + kx) * c + ci];
                                    acc += ker[((oe * c + ci) * patch + ky) * patch + kx] * pix;
                                }
                            }
                        }
                        *ov = acc;
                    }
                }
            }
        }
        let rg = self.rg(&[image, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![b, n, e], out),
            Op::PatchConv { image, kernel, patch },
            rg,
        ))
    }

    /// Adjoints of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, NumericsError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(NumericsError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        shapes.truncate(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad && i != root.0 {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let d = g.last_dim();
                    let mut gb = vec![T::zero(); d];
                    for lane in g.data().chunks(d) {
                        for (o, &x) in gb.iter_mut().zip(lane) {
                            *o += x;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, gb));
                }
            }
            Op::MulGain(a, gain) => {
                let d = g.last_dim();
                let gv = self.value(*gain).data();
                if self.needs(*a) {
                    let mut ga = g.data().to_vec();
                    for lane in ga.chunks_mut(d) {
                        for (o, &s) in lane.iter_mut().zip(gv) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), ga));
                }
                if self.needs(*gain) {
                    let av = self.value(*a).data();
                    let mut gg = vec![T::zero(); d];
                    for (lane, al) in g.data().chunks(d).zip(av.chunks(d)) {
                        for ((o, &x), &y) in gg.iter_mut().zip(lane).zip(al) {
                            *o += x * y;
                        }
                    }
                    let shape = self.shape(*gain).to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(shape, gg));
                }
            }
            Op::MatMul(a, w) => {
                let va = self.value(*a);
                let vw = self.value(*w);
                let (k, m) = (vw.shape()[0], vw.shape()[1]);
                let rows = va.len() / k;
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); rows * k];
                    kernels::matmul_a_bt(g.data(), vw.data(), &mut ga, rows, k, m);
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); k * m];
                    kernels::matmul_at_b(va.data(), g.data(), &mut gw, rows, k, m);
                    self.accumulate(grads, *w, Tensor::from_parts(vec![k, m], gw));
                }
            }
            Op::BatchMatMul { lhs, rhs, transpose_rhs } => {
                let va = self.value(*lhs);
                let vb = self.value(*rhs);
                let (batch, n, k) = Self::batch_dims(va.shape()).unwrap();
                let (_, r1, r2) = Self::batch_dims(vb.shape()).unwrap();
                let m = out.last_dim();
                let mut ga = if self.needs(*lhs) { Some(vec![T::zero(); va.len()]) } else { None };
                let mut gb = if self.needs(*rhs) { Some(vec![T::zero(); vb.len()]) } else { None };
                for bi in 0..batch {
                    let a_s = &va.data()[bi * n * k..(bi + 1) * n * k];
                    let b_s = &vb.data()[bi * r1 * r2..(bi + 1) * r1 * r2];
                    let g_s = &g.data()[bi * n * m..(bi + 1) * n * m];
                    if *transpose_rhs {
                        // out = A Bᵀ, B is [m, k]
                        if let Some(ga) = ga.as_mut() {
                            kernels::matmul(g_s, b_s, &mut ga[bi * n * k..(bi + 1) * n * k], n, m, k);
                        }
                        if let Some(gb) = gb.as_mut() {
                            kernels::matmul_at_b(g_s, a_s, &mut gb[bi * m * k..(bi + 1) * m * k], n, m, k);
                        }
                    } else {
                        // out = A B, B is [k, m]
                        if let Some(ga) = ga.as_mut() {
                            kernels::matmul_a_bt(g_s, b_s, &mut ga[bi * n * k..(bi + 1) * n * k], n, k, m);
                        }
                        if let Some(gb) = gb.as_mut() {
                            kernels::matmul_at_b(a_s, g_s, &mut gb[bi * k * m..(bi + 1) * k * m], n, k, m);
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.accumulate(grads, *lhs, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *rhs, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = lanes(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g.data()[p] * y[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g.data()[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::Unary(input, f) => {
                let x = self.value(*input);
                let d = g.zip_map(x, |gv, xv| gv * f.derivative(xv)).unwrap();
                self.accumulate(grads, *input, d);
            }
            Op::Normalize { input, eps } => {
                let x = self.value(*input);
                let d = x.last_dim();
                let inv_d = T::one() / T::lit(d as f64);
                let mut gx = vec![T::zero(); x.len()];
                for ((xl, gl), (yl, ol)) in x
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(out.data().chunks(d).zip(gx.chunks_mut(d)))
                {
                    let mean = sum(xl.iter().copied()) * inv_d;
                    let var = sum(xl.iter().map(|&v| (v - mean) * (v - mean))) * inv_d;
                    let inv = T::one() / (var + *eps).sqrt();
                    let sum_g = sum(gl.iter().copied());
                    let sum_gy = sum(gl.iter().zip(yl).map(|(&a, &b)| a * b));
                    for ((o, &gv), &yv) in ol.iter_mut().zip(gl).zip(yl) {
                        *o = inv * (gv - (sum_g + yv * sum_gy) * inv_d);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gx));
            }
            Op::Rotate { input, table } => {
                let d = out.last_dim();
                let n = out.shape()[out.rank() - 2];
                let mut gx = g.data().to_vec();
                for (r, row) in gx.chunks_mut(d).enumerate() {
                    let p = r % n;
                    for m in 0..table.half {
                        let (c, s) = (table.cos[p * table.half + m], table.sin[p * table.half + m]);
                        let (g1, g2) = (row[2 * m], row[2 * m + 1]);
                        row[2 * m] = g1 * c + g2 * s;
                        row[2 * m + 1] = -g1 * s + g2 * c;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), gp));
                    }
                    offset += w;
                }
            }
            Op::MeanTokens(input) => {
                let x = self.value(*input);
                let d = x.last_dim();
                let n = x.shape()[x.rank() - 2];
                let inv = T::one() / T::lit(n as f64);
                let gx = Tensor::from_fn(x.shape(), |i| {
                    let b = i / (n * d);
                    g.data()[b * d + i % d] * inv
                });
                self.accumulate(grads, *input, gx);
            }
            Op::Sum(input) => {
                let s = g.data()[0];
                self.accumulate(grads, *input, Tensor::full(self.shape(*input), s));
            }
            Op::Mean(input) => {
                let n = self.value(*input).len();
                let s = g.data()[0] / T::lit(n as f64);
                self.accumulate(grads, *input, Tensor::full(self.shape(*input), s));
            }
            Op::Reshape(input) => {
                let shape = self.shape(*input).to_vec();
                self.accumulate(grads, *input, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / T::lit(targets.len() as f64);
                let d = Tensor::from_fn(z.shape(), |i| (sigmoid(z.data()[i]) - targets[i]) * scale);
                self.accumulate(grads, *logits, d);
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let z = self.value(*logits);
                let flat = Tensor::from_parts(vec![z.len()], z.data().to_vec());
                let p = super::tensor::softmax(&flat, 0).unwrap();
                let s = g.data()[0];
                let d = Tensor::from_fn(z.shape(), |i| {
                    let onehot = if i == *label { T::one() } else { T::zero() };
                    (p.data()[i] - onehot) * s
                });
                self.accumulate(grads, *logits, d);
            }
            Op::PatchConv { image, kernel, patch } => {
                let vi = self.value(*image);
                let vk = self.value(*kernel);
                let is = vi.shape();
                let (b, h, w, c) = (is[0], is[1], is[2], is[3]);
                let e = vk.shape()[0];
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let n = gh * gw;
                let mut gk = if self.needs(*kernel) { Some(vec![T::zero(); vk.len()]) } else { None };
                let mut gi = if self.needs(*image) { Some(vec![T::zero(); vi.len()]) } else { None };
                for bi in 0..b {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let tok = bi * n + gy * gw + gx;
                            for oe in 0..e {
                                let gv = g.data()[tok * e + oe];
                                if gv == T::zero() {
                                    continue;
                                }
                                for ci in 0..c {
                                    for ky in 0..p {
                                        for kx in 0..p {
                                            let pi = ((bi * h + gy * p + ky) * w + gx * p + kx) * c + ci;
                                            let ki = ((oe * c + ci) * p + ky) * p + kx;
                                            if let Some(gk) = gk.as_mut() {
                                                gk[ki] += gv * vi.data()[pi];
                                            }
                                            if let Some(gi) = gi.as_mut() {
                                                gi[pi] += gv * vk.data()[ki];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, Tensor::from_parts(vk.shape().to_vec(), gk));
                }
                if let Some(gi) = gi {
                    self.accumulate(grads, *image, Tensor::from_parts(is.to_vec(), gi));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, -2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_dot_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut g = Graph::new();
        let z = g.param(v(&[0.0, 0.0]));
        let loss = g.softmax_cross_entropy(z, 0).unwrap();
        let grad = g.backward(loss).unwrap().get(z);
        assert!((grad.data()[0] + 0.5).abs() < 1e-15);
        assert!((grad.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reused_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.param(v(&[3.0]));
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarRoot { .. })));
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, 2.0]));
        let unused = g.param(v(&[5.0, 6.0, 7.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn intermediate_gradients_are_queryable() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, 2.0]));
        let h = g.scale(x, 3.0);
        let s = g.sum(h);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(h).data(), &[1.0, 1.0]);
        assert_eq!(grads.get(x).data(), &[3.0, 3.0]);
    }

    #[test]
    fn unary_values() {
        assert_eq!(Unary::Swish.apply(0.0f64), 0.0);
        assert!((Unary::Swish.apply(1.0f64) - 0.7310585786300049).abs() < 1e-12);
        assert!((Unary::Sigmoid.apply(-800.0f64)).abs() < 1e-300);
        assert!((Unary::Sigmoid.apply(800.0f64) - 1.0).abs() < 1e-15);
    }
}
