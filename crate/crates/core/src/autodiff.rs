//! Tape-based reverse-mode differentiation over a closed primitive set.
//!
//! A [`Graph`] records every primitive in execution order, so the tape order
//! is already a topological order and a single reverse sweep computes all
//! gradients. Nodes that do not depend on any gradient-requiring leaf are
//! skipped during the sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::kernels::{self, ConvGeom, Layout};
use crate::math;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

mod replay;
pub use replay::LeafRef;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { a: Var, s: f32 },
    AddScalar { a: Var, s: f32 },
    Softmax { a: Var, axis: usize },
    Silu { a: Var },
    Tanh { a: Var },
    GroupNorm { a: Var, group_len: usize, eps: f32, rstd: Vec<f32> },
    Upsample { a: Var, factor: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: an append-only tape of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph on which no leaf requires gradients; used for inference.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), no_grad: true }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (for gradient checks).
    pub fn leaf_with_grad(&mut self, t: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Parameter leaf; tracks gradients only for trainable parameters.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.trainable && !self.no_grad;
        self.push(p.value.clone(), Op::Param(id), rg)
    }

    /// Parameter leaf that tracks a gradient regardless of its trainable flag.
    /// The optimizer still never applies it to a frozen parameter.
    pub fn param_with_grad(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = !self.no_grad;
        self.push(store.value(id).clone(), Op::Param(id), rg)
    }

    // ----- primitives -------------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` where `b` is stored as `[..., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), transpose_b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        for bi in 0..plan.batch {
            let (oa, ob) = plan.offsets(bi);
            let lb = if transpose_b { Layout::transposed(plan.k) } else { Layout::row_major(plan.n) };
            kernels::gemm(
                plan.m,
                plan.k,
                plan.n,
                &av[oa..oa + plan.m * plan.k],
                Layout::row_major(plan.k),
                &bv[ob..ob + plan.k * plan.n],
                lb,
                0.0,
                &mut out[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
                plan.n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(plan.out_shape.clone(), out), Op::MatMul { a, b, transpose_b }, rg))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `k: [C', C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            bail!(Dimension, "conv2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ks);
        }
        if xs[1] != ks[1] {
            bail!(Dimension, "conv2d channel mismatch: input {:?}, kernel {:?}", xs, ks);
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be positive");
        }
        let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if h < ks[2] || w < ks[3] {
            bail!(Dimension, "conv2d kernel {:?} larger than padded input {:?}", ks, xs);
        }
        let geom = ConvGeom {
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho: (h - ks[2]) / stride + 1,
            wo: (w - ks[3]) / stride + 1,
        };
        let (batch, c_out) = (xs[0], ks[0]);
        let hw = geom.ho * geom.wo;
        let in_plane = geom.c_in * geom.h * geom.w;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let mut out = vec![0.0; batch * c_out * hw];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; geom.col_rows() * hw] };
        for b in 0..batch {
            let xb = &xv[b * in_plane..(b + 1) * in_plane];
            let colv: &[f32] = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, &geom, &mut cols);
                &cols
            };
            kernels::gemm(
                c_out,
                geom.col_rows(),
                hw,
                kv,
                Layout::row_major(geom.col_rows()),
                colv,
                Layout::row_major(hw),
                0.0,
                &mut out[b * c_out * hw..(b + 1) * c_out * hw],
                hw,
            );
        }
        let rg = self.rg(&[x, k]);
        let shape = vec![batch, c_out, geom.ho, geom.wo];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, k, geom }, rg))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product with numpy broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::MulScalar { a, s }, rg)
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar { a, s }, rg)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {} invalid for shape {:?}", axis, shape);
        }
        let y = kernels::softmax_forward(self.value(a).data(), &shape, axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Softmax { a, axis }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * math::sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu { a }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh { a }, rg)
    }

    /// Group normalization over `[B, C, ...]` without affine terms.
    pub fn group_norm(&mut self, a: Var, groups: usize, eps: f32) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            bail!(Dimension, "group_norm: {} groups incompatible with shape {:?}", groups, shape);
        }
        let per_sample: usize = shape[1..].iter().product();
        let group_len = per_sample / groups;
        let (y, _, rstd) = kernels::normalize_groups(self.value(a).data(), group_len, eps);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::GroupNorm { a, group_len, eps, rstd }, rg))
    }

    /// Layer normalization over the last axis without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&group_len) = shape.last() else {
            bail!(Dimension, "layer_norm needs rank >= 1");
        };
        let (y, _, rstd) = kernels::normalize_groups(self.value(a).data(), group_len, eps);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::GroupNorm { a, group_len, eps, rstd }, rg))
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || factor == 0 {
            bail!(Dimension, "upsample needs rank >= 2 and factor > 0, got {:?}", shape);
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = shape[..r - 2].iter().product();
        let y = kernels::upsample_nearest(self.value(a).data(), planes, h, w, factor);
        let mut out_shape = shape;
        out_shape[r - 2] *= factor;
        out_shape[r - 1] *= factor;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, y), Op::Upsample { a, factor }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            bail!(Dimension, "invalid permutation {:?} for shape {:?}", perm, shape);
        }
        let (out_shape, y) = kernels::permute(self.value(a).data(), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, y), Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            bail!(Dimension, "transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    // ----- composites -------------------------------------------------------

    /// `x W + b` over the last axis, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "mse shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let Some(out) = kernels::broadcast_shape(ta.shape(), tb.shape()) else {
            bail!(Dimension, "cannot broadcast {:?} with {:?}", ta.shape(), tb.shape());
        };
        let sa = kernels::broadcast_strides(ta.shape(), &out);
        let sb = kernels::broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok(Tensor::from_parts(out, data))
    }

    // ----- reverse sweep ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep that accumulates into the trainable parameters of `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, transpose_b } => self.matmul_backward(*a, *b, *transpose_b, g, grads),
            Op::Conv2d { x, k, geom } => self.conv_backward(*x, *k, geom, g, grads),
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let acc = grad_slot(grads, v, self.shape(v));
                        kernels::reduce_to(g.data(), out.shape(), self.shape(v), acc.data_mut());
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod: Vec<f32> = if ov.shape() == out.shape() {
                        g.data().iter().zip(ov.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let so = kernels::broadcast_strides(ov.shape(), out.shape());
                        let zeros = vec![0; out.rank()];
                        let mut p = vec![0.0; out.numel()];
                        kernels::for_each_broadcast(out.shape(), &so, &zeros, |o, io, _| {
                            p[o] = g.data()[o] * ov.data()[io]
                        });
                        p
                    };
                    let acc = grad_slot(grads, v, self.shape(v));
                    kernels::reduce_to(&prod, out.shape(), self.shape(v), acc.data_mut());
                }
            }
            Op::MulScalar { a, s } => {
                let acc = grad_slot(grads, *a, self.shape(*a));
                for (d, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                    *d += gv * s;
                }
            }
            Op::AddScalar { a, .. } | Op::Reshape { a } => {
                let acc = grad_slot(grads, *a, self.shape(*a));
                for (d, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                    *d += gv;
                }
            }
            Op::Softmax { a, axis } => {
                let acc = grad_slot(grads, *a, self.shape(*a));
                kernels::softmax_backward(out.data(), g.data(), out.shape(), *axis, acc.data_mut());
            }
            Op::Silu { a } => {
                let xv = self.value(*a).data();
                let acc = grad_slot(grads, *a, self.shape(*a));
                for ((d, gv), &x) in acc.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    let s = math::sigmoid(x);
                    *d += gv * s * (1.0 + x * (1.0 - s));
                }
            }
            Op::Tanh { a } => {
                let acc = grad_slot(grads, *a, self.shape(*a));
                for ((d, gv), y) in acc.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::GroupNorm { a, group_len, rstd, .. } => {
                let acc = grad_slot(grads, *a, self.shape(*a));
                kernels::normalize_groups_backward(out.data(), g.data(), rstd, *group_len, acc.data_mut());
            }
            Op::Upsample { a, factor } => {
                let s = self.shape(*a);
                let r = s.len();
                let planes = s[..r - 2].iter().product();
                let (h, w) = (s[r - 2], s[r - 1]);
                let acc = grad_slot(grads, *a, s);
                kernels::upsample_nearest_backward(g.data(), planes, h, w, *factor, acc.data_mut());
            }
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (_, back) = kernels::permute(g.data(), out.shape(), &inv);
                let acc = grad_slot(grads, *a, self.shape(*a));
                for (d, gv) in acc.data_mut().iter_mut().zip(&back) {
                    *d += gv;
                }
            }
            Op::Sum { a } => {
                let gv = g.item();
                let acc = grad_slot(grads, *a, self.shape(*a));
                acc.data_mut().iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f32;
                let gv = g.item() / n;
                let acc = grad_slot(grads, *a, self.shape(*a));
                acc.data_mut().iter_mut().for_each(|d| *d += gv);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, transpose_b: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), transpose_b).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let gv = g.data();
        if self.requires_grad(a) {
            let bv = self.value(b).data();
            let acc = grad_slot(grads, a, self.shape(a));
            let ad = acc.data_mut();
            for bi in 0..plan.batch {
                let (oa, ob) = plan.offsets(bi);
                // dA = G B^T  (or G B when b is stored transposed)
                let lb = if transpose_b { Layout::row_major(k) } else { Layout::transposed(n) };
                kernels::gemm(
                    m,
                    n,
                    k,
                    &gv[bi * m * n..(bi + 1) * m * n],
                    Layout::row_major(n),
                    &bv[ob..ob + k * n],
                    lb,
                    1.0,
                    &mut ad[oa..oa + m * k],
                    k,
                );
            }
        }
        if self.requires_grad(b) {
            let av = self.value(a).data();
            let acc = grad_slot(grads, b, self.shape(b));
            let bd = acc.data_mut();
            for bi in 0..plan.batch {
                let (oa, ob) = plan.offsets(bi);
                let gslice = &gv[bi * m * n..(bi + 1) * m * n];
                let aslice = &av[oa..oa + m * k];
                if transpose_b {
                    // dB[n, k] = G^T A
                    kernels::gemm(n, m, k, gslice, Layout::transposed(n), aslice, Layout::row_major(k), 1.0, &mut bd[ob..ob + n * k], k);
                } else {
                    // dB[k, n] = A^T G
                    kernels::gemm(k, m, n, aslice, Layout::transposed(k), gslice, Layout::row_major(n), 1.0, &mut bd[ob..ob + k * n], n);
                }
            }
        }
    }

    fn conv_backward(&self, x: Var, k: Var, geom: &ConvGeom, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xs = self.shape(x);
        let (batch, c_out) = (xs[0], self.shape(k)[0]);
        let hw = geom.ho * geom.wo;
        let rows = geom.col_rows();
        let in_plane = geom.c_in * geom.h * geom.w;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let gv = g.data();
        let need_k = self.requires_grad(k);
        let need_x = self.requires_grad(x);
        let mut cols = vec![0.0; rows * hw];
        let mut dk = if need_k { vec![0.0; c_out * rows] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        for b in 0..batch {
            let gb = &gv[b * c_out * hw..(b + 1) * c_out * hw];
            if need_k {
                let xb = &xv[b * in_plane..(b + 1) * in_plane];
                let colv: &[f32] = if geom.is_pointwise() {
                    xb
                } else {
                    kernels::im2col(xb, geom, &mut cols);
                    &cols
                };
                kernels::gemm(c_out, hw, rows, gb, Layout::row_major(hw), colv, Layout::transposed(hw), 1.0, &mut dk, rows);
            }
            if need_x {
                let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                if geom.is_pointwise() {
                    kernels::gemm(rows, c_out, hw, kv, Layout::transposed(rows), gb, Layout::row_major(hw), 1.0, dxb, hw);
                } else {
                    kernels::gemm(rows, c_out, hw, kv, Layout::transposed(rows), gb, Layout::row_major(hw), 0.0, &mut cols, hw);
                    kernels::col2im(&cols, geom, dxb);
                }
            }
        }
        if need_k {
            let acc = grad_slot(grads, k, self.shape(k));
            acc.add_assign(&Tensor::from_parts(acc.shape().to_vec(), dk));
        }
        if need_x {
            let acc = grad_slot(grads, x, self.shape(x));
            acc.add_assign(&Tensor::from_parts(acc.shape().to_vec(), dx));
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    out_shape: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    batch_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize], transpose_b: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Dimension, "matmul needs rank >= 2 operands, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            bail!(Dimension, "matmul inner dimensions differ: {:?} x {:?}", sa, sb);
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let Some(batch_shape) = kernels::broadcast_shape(ba, bb) else {
            bail!(Dimension, "matmul batch dimensions not broadcastable: {:?} x {:?}", sa, sb);
        };
        let a_batch_strides = kernels::broadcast_strides(ba, &batch_shape).iter().map(|s| s * m * k).collect();
        let b_batch_strides = kernels::broadcast_strides(bb, &batch_shape).iter().map(|s| s * k * n).collect();
        let batch = batch_shape.iter().product();
        let mut out_shape = batch_shape.clone();
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self { m, k, n, batch, out_shape, a_batch_strides, b_batch_strides, batch_shape })
    }

    fn offsets(&self, mut bi: usize) -> (usize, usize) {
        let (mut oa, mut ob) = (0, 0);
        for d in (0..self.batch_shape.len()).rev() {
            let i = bi % self.batch_shape[d];
            bi /= self.batch_shape[d];
            oa += i * self.a_batch_strides[d];
            ob += i * self.b_batch_strides[d];
        }
        (oa, ob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut g = Graph::new();
        let id = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let data: Vec<f32> = (0..9).map(|v| v as f32 * 0.5 - 1.0).collect();
        let a = g.constant(t(&[3, 3], &data));
        let c = g.matmul(id, a).unwrap();
        assert_eq!(g.value(c).data(), &data[..]);

        let x = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(x, y).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).all_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
        // direct exponentiation oracle
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let y = g.softmax(x, 0).unwrap();
        let e: [f64; 3] = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let s: f64 = e.iter().sum();
        for (v, ei) in g.value(y).data().iter().zip(e) {
            assert!((*v as f64 - ei / s).abs() < 1e-4);
        }
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &img));
        let k1 = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k1, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &img[..]);

        let c = g.constant(Tensor::full(&[1, 1, 5, 5], 0.7));
        let box3 = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(c, box3, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        for v in g.value(y).data() {
            assert!((v - 6.3).abs() < 1e-5);
        }

        let bad = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, bad, 1, 0).is_err());
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let kt = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let k = g.constant(kt.clone());
        let y = g.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        s += xt.data()[(oy * 2 + i) * 4 + ox * 2 + j] * kt.data()[i * 2 + j];
                    }
                }
                assert!((g.value(y).data()[oy * 2 + ox] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut store = ParamStore::new();
        let pv = t(&[2, 3], &[1., -2., 3., 0.5, 0.25, -1.]);
        let id = store.add("p", pv.clone(), true).unwrap();

        let mut g = Graph::new();
        let p = g.param(&store, id);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap(), &Tensor::ones(&[2, 3]));

        let mut g = Graph::new();
        let p = g.param(&store, id);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap(), &pv);
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_frozen() {
        let mut store = ParamStore::new();
        let frozen = store.add("f", Tensor::ones(&[2]), false).unwrap();
        let live = store.add("l", Tensor::ones(&[2]), true).unwrap();
        let mut g = Graph::new();
        let f = g.param(&store, frozen);
        let l = g.param(&store, live);
        let y = g.mul(f, l).unwrap();
        assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
        let s = g.sum(y);
        g.backward_into(s, &mut store).unwrap();
        assert!(store.get(frozen).grad.is_none());
        assert!(store.get(live).grad.is_some());
    }
}
