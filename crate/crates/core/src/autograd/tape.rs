use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    LeakyRelu { x: usize, slope: T },
    Sigmoid { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Concat { parts: Vec<(usize, usize)> },
    Narrow { x: usize, start: usize },
    Upsample { x: usize },
    Mean { x: usize },
    SpatialAttention { q: usize, k: usize, v: usize, probs: Vec<T> },
    TokenAttention { q: usize, k: usize, v: usize, probs: Vec<T> },
    Crop { x: usize, top: usize, left: usize },
    PsnrLoss { pred: usize, target: Tensor<T>, lambda: f64, eps: f64, mse: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// With gradients disabled the tape still holds every value but skips the
/// saved context (patch columns, attention probabilities) needed by backward.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::Shape(msg.into())
}

fn transpose_tokens<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same-padded cross-correlation, `k` in {1, 3}, stride in {1, 2}.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        let requires = self.tracked(&[x, w, b]);
        let save_cols = self.grad_enabled && self.requires_grad(w);
        let (out, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (batch, c_in, h, wd) = xv.dims4()?;
            let (c_out, wc_in, kh, kw) = wv.dims4()?;
            if kh != kw || !(kh == 1 || kh == 3) {
                return Err(TensorError::Unsupported(format!("kernel {kh}x{kw}")));
            }
            if !(stride == 1 || stride == 2) {
                return Err(TensorError::Unsupported(format!("stride {stride}")));
            }
            if wc_in != c_in {
                return Err(shape_err(format!("conv expects {wc_in} input channels, got {c_in}")));
            }
            if bv.shape() != [c_out] {
                return Err(shape_err(format!("bias shape {:?} for {c_out} outputs", bv.shape())));
            }
            let geom = ConvGeom::new(c_in, h, wd, kh, stride);
            let (rows, n) = (geom.rows(), geom.cols());
            let mut out = vec![T::zero(); batch * c_out * n];
            let mut cols = vec![T::zero(); rows * n];
            let mut saved = if save_cols { Vec::with_capacity(batch * rows * n) } else { Vec::new() };
            let plane_in = c_in * h * wd;
            for bi in 0..batch {
                let input = &xv.data()[bi * plane_in..(bi + 1) * plane_in];
                kernels::im2col(&geom, input, &mut cols);
                kernels::conv_gemm(wv.data(), bv.data(), &cols, rows, n, &mut out[bi * c_out * n..(bi + 1) * c_out * n]);
                if save_cols {
                    saved.extend_from_slice(&cols);
                }
            }
            (Tensor::new(&[batch, c_out, geom.h_out, geom.w_out], out)?, geom, saved)
        };
        Ok(self.push(out, Op::Conv { x: x.0, w: w.0, b: b.0, geom, cols }, requires))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var, TensorError> {
        let slope = T::of(slope);
        let out = self.value(x).map(|v| if v >= T::zero() { v } else { v * slope });
        let requires = self.tracked(&[x]);
        Ok(self.push(out, Op::LeakyRelu { x: x.0, slope }, requires))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let requires = self.tracked(&[x]);
        Ok(self.push(out, Op::Sigmoid { x: x.0 }, requires))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("elementwise {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, self.tracked(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }, self.tracked(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, self.tracked(&[a, b])))
    }

    /// Concatenation along the channel axis of `[B, C, H, W]` tensors.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        let (out, meta) = {
            let nodes = self.nodes.borrow();
            let (batch, _, h, w) = nodes[parts[0].0].value.dims4()?;
            let mut meta = Vec::with_capacity(parts.len());
            for p in parts {
                let (pb, pc, ph, pw) = nodes[p.0].value.dims4()?;
                if (pb, ph, pw) != (batch, h, w) {
                    return Err(shape_err("concat inputs differ outside the channel axis"));
                }
                meta.push((p.0, pc));
            }
            let total: usize = meta.iter().map(|m| m.1).sum();
            let plane = h * w;
            let mut data = Vec::with_capacity(batch * total * plane);
            for bi in 0..batch {
                for &(id, c) in &meta {
                    data.extend_from_slice(&nodes[id].value.data()[bi * c * plane..(bi + 1) * c * plane]);
                }
            }
            (Tensor::new(&[batch, total, h, w], data)?, meta)
        };
        Ok(self.push(out, Op::Concat { parts: meta }, self.tracked(parts)))
    }

    /// Channels `[start, start + len)`.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = {
            let xv = self.value(x);
            let (batch, c, h, w) = xv.dims4()?;
            if start + len > c || len == 0 {
                return Err(shape_err(format!("narrow [{start}, {}) of {c} channels", start + len)));
            }
            let plane = h * w;
            let mut data = Vec::with_capacity(batch * len * plane);
            for bi in 0..batch {
                let base = (bi * c + start) * plane;
                data.extend_from_slice(&xv.data()[base..base + len * plane]);
            }
            Tensor::new(&[batch, len, h, w], data)?
        };
        Ok(self.push(out, Op::Narrow { x: x.0, start }, self.tracked(&[x])))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&self, x: Var) -> Result<Var, TensorError> {
        let out = {
            let xv = self.value(x);
            let (batch, c, h, w) = xv.dims4()?;
            let mut data = Vec::with_capacity(batch * c * h * w * 4);
            for plane in xv.data().chunks_exact(h * w) {
                for row in plane.chunks_exact(w) {
                    let wide: Vec<T> = row.iter().flat_map(|&v| [v, v]).collect();
                    data.extend_from_slice(&wide);
                    data.extend_from_slice(&wide);
                }
            }
            Tensor::new(&[batch, c, 2 * h, 2 * w], data)?
        };
        Ok(self.push(out, Op::Upsample { x: x.0 }, self.tracked(&[x])))
    }

    /// Mean over every element, as a one-element tensor.
    pub fn mean(&self, x: Var) -> Result<Var, TensorError> {
        let out = {
            let xv = self.value(x);
            let sum: f64 = xv.data().iter().map(|v| v.as_f64()).sum();
            Tensor::scalar(T::of(sum / xv.numel().max(1) as f64))
        };
        Ok(self.push(out, Op::Mean { x: x.0 }, self.tracked(&[x])))
    }

    /// Global single-head attention over spatial positions.
    ///
    /// `q` is `[B, C, H, W]` (one query token per pixel), `k` and `v` are
    /// `[B, C, h, w]`; the embedding dimension is `C`.
    pub fn spatial_attention(&self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let save = self.grad_enabled && self.tracked(&[q, k, v]);
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (batch, d, h, w) = qv.dims4()?;
            let (kb, kd, kh, kw) = kv.dims4()?;
            if kv.shape() != vv.shape() || kb != batch || kd != d {
                return Err(shape_err(format!(
                    "attention q {:?}, k {:?}, v {:?}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                )));
            }
            let (l, m) = (h * w, kh * kw);
            let mut out = vec![T::zero(); batch * d * l];
            let mut probs = vec![T::zero(); if save { batch * l * m } else { l * m }];
            for bi in 0..batch {
                let p = if save { &mut probs[bi * l * m..(bi + 1) * l * m] } else { &mut probs[..] };
                kernels::attention_forward(
                    &qv.data()[bi * d * l..(bi + 1) * d * l],
                    &kv.data()[bi * d * m..(bi + 1) * d * m],
                    &vv.data()[bi * d * m..(bi + 1) * d * m],
                    d,
                    l,
                    m,
                    &mut out[bi * d * l..(bi + 1) * d * l],
                    p,
                );
            }
            if !save {
                probs = Vec::new();
            }
            (Tensor::new(&[batch, d, h, w], out)?, probs)
        };
        Ok(self.push(out, Op::SpatialAttention { q: q.0, k: k.0, v: v.0, probs }, self.tracked(&[q, k, v])))
    }

    /// `softmax(q k^T / sqrt(d)) v` on token-major `[B, L, d]` inputs.
    pub fn attention(&self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let save = self.grad_enabled && self.tracked(&[q, k, v]);
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (batch, l, d) = qv.dims3()?;
            let (kb, m, kd) = kv.dims3()?;
            if kv.shape() != vv.shape() || kb != batch || kd != d {
                return Err(shape_err(format!(
                    "attention q {:?}, k {:?}, v {:?}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                )));
            }
            let mut out = vec![T::zero(); batch * l * d];
            let mut probs = vec![T::zero(); batch * l * m];
            for bi in 0..batch {
                let qt = transpose_tokens(&qv.data()[bi * l * d..(bi + 1) * l * d], l, d);
                let kt = transpose_tokens(&kv.data()[bi * m * d..(bi + 1) * m * d], m, d);
                let vt = transpose_tokens(&vv.data()[bi * m * d..(bi + 1) * m * d], m, d);
                let mut ot = vec![T::zero(); d * l];
                kernels::attention_forward(&qt, &kt, &vt, d, l, m, &mut ot, &mut probs[bi * l * m..(bi + 1) * l * m]);
                out[bi * l * d..(bi + 1) * l * d].copy_from_slice(&transpose_tokens(&ot, d, l));
            }
            if !save {
                probs = Vec::new();
            }
            (Tensor::new(&[batch, l, d], out)?, probs)
        };
        Ok(self.push(out, Op::TokenAttention { q: q.0, k: k.0, v: v.0, probs }, self.tracked(&[q, k, v])))
    }

    /// Spatial window `[top, top + h) x [left, left + w)`.
    pub fn crop(&self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var, TensorError> {
        let out = {
            let xv = self.value(x);
            let (batch, c, xh, xw) = xv.dims4()?;
            if top + h > xh || left + w > xw || h == 0 || w == 0 {
                return Err(shape_err(format!("crop {h}x{w}+{top}+{left} of {xh}x{xw}")));
            }
            let mut data = Vec::with_capacity(batch * c * h * w);
            for plane in xv.data().chunks_exact(xh * xw) {
                for y in top..top + h {
                    data.extend_from_slice(&plane[y * xw + left..y * xw + left + w]);
                }
            }
            Tensor::new(&[batch, c, h, w], data)?
        };
        Ok(self.push(out, Op::Crop { x: x.0, top, left }, self.tracked(&[x])))
    }

    /// `lambda * 10 * log10(MSE + eps)`, i.e. `-lambda * 10 * log10(1 / (MSE + eps))`.
    pub fn psnr_loss(&self, pred: Var, target: &Tensor<T>, lambda: f64, eps: f64) -> Result<Var, TensorError> {
        let (out, mse) = {
            let pv = self.value(pred);
            if pv.shape() != target.shape() {
                return Err(shape_err(format!("loss pred {:?} vs target {:?}", pv.shape(), target.shape())));
            }
            let sse: f64 = pv
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            let mse = sse / pv.numel().max(1) as f64;
            (Tensor::scalar(T::of(lambda * 10.0 * (mse + eps).log10())), mse)
        };
        let requires = self.tracked(&[pred]);
        Ok(self.push(out, Op::PsnrLoss { pred: pred.0, target: target.clone(), lambda, eps, mse }, requires))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(out_node.value.shape().to_vec()));
        }
        if !out_node.value.all_finite() {
            return Err(TensorError::NonFinite);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if out_node.requires_grad {
            grads[output.0] = Some(Tensor::full(out_node.value.shape(), T::one()));
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Lazily-created gradient buffer for `id`, zero-filled to its value's shape.
fn grad_buf<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Tensor<T>>], id: usize) -> Option<&'a mut Tensor<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv { x, w, b, geom, cols } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let batch = xv.shape()[0];
            let c_out = wv.shape()[0];
            let (rows, n) = (geom.rows(), geom.cols());
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let gbd = gb.data_mut();
                for bi in 0..batch {
                    for co in 0..c_out {
                        let row = &gd[(bi * c_out + co) * n..(bi * c_out + co + 1) * n];
                        gbd[co] += row.iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(gw) = grad_buf(nodes, grads, *w) {
                let gwd = gw.data_mut();
                for bi in 0..batch {
                    let c = &cols[bi * rows * n..(bi + 1) * rows * n];
                    for co in 0..c_out {
                        let grow = &gd[(bi * c_out + co) * n..(bi * c_out + co + 1) * n];
                        for r in 0..rows {
                            gwd[co * rows + r] += kernels::dot(grow, &c[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let plane_in = geom.c_in * geom.h * geom.w;
                let mut gcols = vec![T::zero(); rows * n];
                for bi in 0..batch {
                    gcols.fill(T::zero());
                    for co in 0..c_out {
                        let grow = &gd[(bi * c_out + co) * n..(bi * c_out + co + 1) * n];
                        for r in 0..rows {
                            let wv_r = wv.data()[co * rows + r];
                            if wv_r != T::zero() {
                                kernels::axpy(wv_r, grow, &mut gcols[r * n..(r + 1) * n]);
                            }
                        }
                    }
                    kernels::col2im(geom, &gcols, &mut gx.data_mut()[bi * plane_in..(bi + 1) * plane_in]);
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            let xv = &nodes[*x].value;
            let data = xv.data().iter().zip(gd).map(|(&v, &gv)| if v >= T::zero() { gv } else { gv * *slope }).collect();
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), data).expect("same shape"));
        }
        Op::Sigmoid { x } => {
            let data = node.value.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
            accumulate(nodes, grads, *x, Tensor::new(node.value.shape(), data).expect("same shape"));
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let data = bv.data().iter().zip(gd).map(|(&y, &gv)| y * gv).collect();
                accumulate(nodes, grads, *a, Tensor::new(av.shape(), data).expect("same shape"));
            }
            if nodes[*b].requires_grad {
                let data = av.data().iter().zip(gd).map(|(&x, &gv)| x * gv).collect();
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), data).expect("same shape"));
            }
        }
        Op::Concat { parts } => {
            let shape = node.value.shape();
            let (batch, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut offset = 0;
            for &(id, c) in parts {
                if let Some(gp) = grad_buf(nodes, grads, id) {
                    let gpd = gp.data_mut();
                    for bi in 0..batch {
                        let src = &gd[(bi * total + offset) * plane..(bi * total + offset + c) * plane];
                        for (d, s) in gpd[bi * c * plane..(bi + 1) * c * plane].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::Narrow { x, start } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let xs = gx.shape().to_vec();
                let (batch, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let len = node.value.shape()[1];
                let gxd = gx.data_mut();
                for bi in 0..batch {
                    let dst = &mut gxd[(bi * c + start) * plane..(bi * c + start + len) * plane];
                    for (d, s) in dst.iter_mut().zip(&gd[bi * len * plane..(bi + 1) * len * plane]) {
                        *d += *s;
                    }
                }
            }
        }
        Op::Upsample { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let xs = gx.shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let gxd = gx.data_mut();
                for (p, plane) in gd.chunks_exact(4 * h * w).enumerate() {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gxd[p * h * w + (y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                        }
                    }
                }
            }
        }
        Op::Mean { x } => {
            let xv = &nodes[*x].value;
            let share = gd[0] / T::of(xv.numel().max(1) as f64);
            accumulate(nodes, grads, *x, Tensor::full(xv.shape(), share));
        }
        Op::SpatialAttention { q, k, v, probs } => {
            let (qv, kv) = (&nodes[*q].value, &nodes[*k].value);
            let vv = &nodes[*v].value;
            let qs = qv.shape();
            let ks = kv.shape();
            let (batch, d, l, m) = (qs[0], qs[1], qs[2] * qs[3], ks[2] * ks[3]);
            let mut gq = nodes[*q].requires_grad.then(|| vec![T::zero(); batch * d * l]);
            let mut gk = nodes[*k].requires_grad.then(|| vec![T::zero(); batch * d * m]);
            let mut gv = nodes[*v].requires_grad.then(|| vec![T::zero(); batch * d * m]);
            for bi in 0..batch {
                kernels::attention_backward(
                    &qv.data()[bi * d * l..(bi + 1) * d * l],
                    &kv.data()[bi * d * m..(bi + 1) * d * m],
                    &vv.data()[bi * d * m..(bi + 1) * d * m],
                    &probs[bi * l * m..(bi + 1) * l * m],
                    &gd[bi * d * l..(bi + 1) * d * l],
                    d,
                    l,
                    m,
                    gq.as_mut().map(|g| &mut g[bi * d * l..(bi + 1) * d * l]),
                    gk.as_mut().map(|g| &mut g[bi * d * m..(bi + 1) * d * m]),
                    gv.as_mut().map(|g| &mut g[bi * d * m..(bi + 1) * d * m]),
                );
            }
            for (id, buf, shape) in [(*q, gq, qs), (*k, gk, ks), (*v, gv, ks)] {
                if let Some(buf) = buf {
                    accumulate(nodes, grads, id, Tensor::new(shape, buf).expect("same shape"));
                }
            }
        }
        Op::TokenAttention { q, k, v, probs } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let (batch, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
            let m = kv.shape()[1];
            let mut gq = vec![T::zero(); batch * l * d];
            let mut gk = vec![T::zero(); batch * m * d];
            let mut gv = vec![T::zero(); batch * m * d];
            for bi in 0..batch {
                let qt = transpose_tokens(&qv.data()[bi * l * d..(bi + 1) * l * d], l, d);
                let kt = transpose_tokens(&kv.data()[bi * m * d..(bi + 1) * m * d], m, d);
                let vt = transpose_tokens(&vv.data()[bi * m * d..(bi + 1) * m * d], m, d);
                let got = transpose_tokens(&gd[bi * l * d..(bi + 1) * l * d], l, d);
                let (mut gqt, mut gkt, mut gvt) = (vec![T::zero(); d * l], vec![T::zero(); d * m], vec![T::zero(); d * m]);
                kernels::attention_backward(
                    &qt,
                    &kt,
                    &vt,
                    &probs[bi * l * m..(bi + 1) * l * m],
                    &got,
                    d,
                    l,
                    m,
                    Some(&mut gqt),
                    Some(&mut gkt),
                    Some(&mut gvt),
                );
                gq[bi * l * d..(bi + 1) * l * d].copy_from_slice(&transpose_tokens(&gqt, d, l));
                gk[bi * m * d..(bi + 1) * m * d].copy_from_slice(&transpose_tokens(&gkt, d, m));
                gv[bi * m * d..(bi + 1) * m * d].copy_from_slice(&transpose_tokens(&gvt, d, m));
            }
            accumulate(nodes, grads, *q, Tensor::new(qv.shape(), gq).expect("same shape"));
            accumulate(nodes, grads, *k, Tensor::new(kv.shape(), gk).expect("same shape"));
            accumulate(nodes, grads, *v, Tensor::new(vv.shape(), gv).expect("same shape"));
        }
        Op::Crop { x, top, left } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let xs = gx.shape().to_vec();
                let (xh, xw) = (xs[2], xs[3]);
                let os = node.value.shape();
                let (h, w) = (os[2], os[3]);
                let gxd = gx.data_mut();
                for (p, plane) in gd.chunks_exact(h * w).enumerate() {
                    for y in 0..h {
                        let dst = &mut gxd[p * xh * xw + (top + y) * xw + left..p * xh * xw + (top + y) * xw + left + w];
                        for (d, s) in dst.iter_mut().zip(&plane[y * w..(y + 1) * w]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        Op::PsnrLoss { pred, target, lambda, eps, mse } => {
            let pv = &nodes[*pred].value;
            let n = pv.numel().max(1) as f64;
            // dL/dMSE = 10 * lambda / ((MSE + eps) ln 10), dMSE/dp = 2 (p - t) / n.
            let coef = T::of(gd[0].as_f64() * 10.0 * lambda / ((mse + eps) * std::f64::consts::LN_10) * 2.0 / n);
            let data = pv.data().iter().zip(target.data()).map(|(&p, &t)| coef * (p - t)).collect();
            accumulate(nodes, grads, *pred, Tensor::new(pv.shape(), data).expect("same shape"));
        }
    }
}
