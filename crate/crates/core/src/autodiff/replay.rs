//! Double-precision re-evaluation of a recorded tape.
//!
//! Every primitive is re-implemented here with plain loops in `f64`, sharing
//! no kernel with the forward or reverse code. Gradient checks difference
//! these values, which keeps f32 rounding out of the numeric side.

use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, MatmulPlan, Op, Var};
use crate::kernels::{self, axis_split};
use crate::param::ParamId;

/// Source of a leaf during replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafRef {
    Input(Var),
    Param(ParamId),
}

impl Graph {
    /// Values of the tape up to `out`, recomputed in `f64`. `leaf` may
    /// override any leaf or parameter; `None` keeps the recorded value.
    pub fn replay_f64(&self, out: Var, leaf: &dyn Fn(LeafRef) -> Option<Vec<f64>>) -> Vec<f64> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
        let widen = |v: Var| self.nodes[v.0].value.data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        for i in 0..=out.0 {
            let shape = |v: Var| self.nodes[v.0].value.shape();
            let y = match &self.nodes[i].op {
                Op::Leaf => leaf(LeafRef::Input(Var(i))).unwrap_or_else(|| widen(Var(i))),
                Op::Param(id) => leaf(LeafRef::Param(*id)).unwrap_or_else(|| widen(Var(i))),
                Op::MatMul { a, b, transpose_b } => {
                    let plan = MatmulPlan::new(shape(*a), shape(*b), *transpose_b).expect("recorded shapes");
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    let mut y = vec![0.0; plan.batch * m * n];
                    for bi in 0..plan.batch {
                        let (oa, ob) = plan.offsets(bi);
                        for r in 0..m {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for p in 0..k {
                                    let bx = if *transpose_b { bv[ob + c * k + p] } else { bv[ob + p * n + c] };
                                    acc += av[oa + r * k + p] * bx;
                                }
                                y[(bi * m + r) * n + c] = acc;
                            }
                        }
                    }
                    y
                }
                Op::Conv2d { x, k, geom: g } => {
                    let (xv, kv) = (&vals[x.0], &vals[k.0]);
                    let (batch, c_out) = (shape(*x)[0], shape(*k)[0]);
                    let mut y = vec![0.0; batch * c_out * g.ho * g.wo];
                    for b in 0..batch {
                        for co in 0..c_out {
                            for oy in 0..g.ho {
                                for ox in 0..g.wo {
                                    let mut acc = 0.0;
                                    for ci in 0..g.c_in {
                                        for ky in 0..g.kh {
                                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                            if iy < 0 || iy >= g.h as isize {
                                                continue;
                                            }
                                            for kx in 0..g.kw {
                                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                                if ix < 0 || ix >= g.w as isize {
                                                    continue;
                                                }
                                                let xi = ((b * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize;
                                                acc += xv[xi] * kv[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                                            }
                                        }
                                    }
                                    y[((b * c_out + co) * g.ho + oy) * g.wo + ox] = acc;
                                }
                            }
                        }
                    }
                    y
                }
                Op::Add { a, b } => broadcast(shape(*a), shape(*b), &vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Mul { a, b } => broadcast(shape(*a), shape(*b), &vals[a.0], &vals[b.0], |x, y| x * y),
                Op::MulScalar { a, s } => vals[a.0].iter().map(|x| x * *s as f64).collect(),
                Op::AddScalar { a, s } => vals[a.0].iter().map(|x| x + *s as f64).collect(),
                Op::Softmax { a, axis } => {
                    let x = &vals[a.0];
                    let (outer, len, inner) = axis_split(shape(*a), *axis);
                    let mut y = vec![0.0; x.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = (0..len).map(|j| libm::exp(x[at(j)] - max)).sum();
                            for j in 0..len {
                                y[at(j)] = libm::exp(x[at(j)] - max) / z;
                            }
                        }
                    }
                    y
                }
                Op::Silu { a } => vals[a.0].iter().map(|&x| x / (1.0 + libm::exp(-x))).collect(),
                Op::Tanh { a } => vals[a.0].iter().map(|&x| libm::tanh(x)).collect(),
                Op::GroupNorm { a, group_len, eps, .. } => {
                    let mut y = Vec::with_capacity(vals[a.0].len());
                    for xs in vals[a.0].chunks(*group_len) {
                        let n = xs.len() as f64;
                        let mean = xs.iter().sum::<f64>() / n;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let r = 1.0 / libm::sqrt(var + *eps as f64);
                        y.extend(xs.iter().map(|v| (v - mean) * r));
                    }
                    y
                }
                Op::Upsample { a, factor: f } => {
                    let s = shape(*a);
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let x = &vals[a.0];
                    let mut y = Vec::with_capacity(x.len() * f * f);
                    for plane in x.chunks(h * w) {
                        for oy in 0..h * f {
                            y.extend((0..w * f).map(|ox| plane[(oy / f) * w + ox / f]));
                        }
                    }
                    y
                }
                Op::Reshape { a } => vals[a.0].clone(),
                Op::Permute { a, perm } => {
                    let s = shape(*a);
                    let src = kernels::strides(s);
                    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
                    let x = &vals[a.0];
                    let mut y = Vec::with_capacity(x.len());
                    let mut idx = vec![0usize; out_shape.len()];
                    for _ in 0..x.len() {
                        y.push(x[idx.iter().zip(perm).map(|(i, &p)| i * src[p]).sum::<usize>()]);
                        for d in (0..idx.len()).rev() {
                            idx[d] += 1;
                            if idx[d] < out_shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                    y
                }
                Op::Sum { a } => vec![vals[a.0].iter().sum()],
                Op::Mean { a } => vec![vals[a.0].iter().sum::<f64>() / vals[a.0].len() as f64],
            };
            vals.push(y);
        }
        vals.pop().expect("tape holds `out`")
    }
}

/// Numpy-style broadcast of two operands, by explicit index arithmetic.
fn broadcast(sa: &[usize], sb: &[usize], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(sa), pad(sb));
    let out: Vec<usize> = pa.iter().zip(&pb).map(|(x, y)| (*x).max(*y)).collect();
    let (ta, tb) = (kernels::strides(&pa), kernels::strides(&pb));
    let total: usize = out.iter().product();
    let mut y = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            if pa[d] > 1 {
                ia += idx[d] * ta[d];
            }
            if pb[d] > 1 {
                ib += idx[d] * tb[d];
            }
        }
        y.push(f(a[ia], b[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    y
}
