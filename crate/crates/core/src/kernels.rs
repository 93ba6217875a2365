//! Slice-level numeric kernels used by the tape primitives.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    pub fn transposed(cols_of_stored: usize) -> Self {
        Self { rs: 1, cs: cols_of_stored }
    }
}

/// `c = beta * c + a * b` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, l: Layout| (rows - 1) * l.rs + (cols - 1) * l.cs;
    if k > 0 {
        assert!(a.len() > last(m, k, la), "gemm: lhs slice too short");
        assert!(b.len() > last(k, n, lb), "gemm: rhs slice too short");
    }
    assert!(c.len() > (m - 1) * ldc + (n - 1), "gemm: output slice too short");
    // SAFETY: bounds of every operand were checked against the layouts above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox*stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        // ox*stride + kj < w + pad
        let hi = if self.w + self.pad > kj { ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfold one image `[c_in, h, w]` into `[c_in*kh*kw, ho*wo]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = math::exp(x[base + j * inner] - max);
                y[base + j * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..len {
                y[base + j * inner] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &[f32], dy: &[f32], shape: &[usize], axis: usize, dx: &mut [f32]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += y[base + j * inner] * dy[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// Normalizes contiguous groups of `group_len` elements. Returns (y, mean, rstd).
pub(crate) fn normalize_groups(x: &[f32], group_len: usize, eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let groups = x.len() / group_len;
    let mut y = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(groups);
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x[g * group_len..(g + 1) * group_len];
        let mean = xs.iter().sum::<f32>() / group_len as f32;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / group_len as f32;
        let rstd = 1.0 / math::sqrt(var + eps);
        for (o, v) in y[g * group_len..(g + 1) * group_len].iter_mut().zip(xs) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub(crate) fn normalize_groups_backward(y: &[f32], dy: &[f32], rstd: &[f32], group_len: usize, dx: &mut [f32]) {
    let n = group_len as f32;
    for (g, &r) in rstd.iter().enumerate() {
        let range = g * group_len..(g + 1) * group_len;
        let ys = &y[range.clone()];
        let dys = &dy[range.clone()];
        let mean_dy = dys.iter().sum::<f32>() / n;
        let mean_dy_y = ys.iter().zip(dys).map(|(a, b)| a * b).sum::<f32>() / n;
        for ((o, yv), dyv) in dx[range].iter_mut().zip(ys).zip(dys) {
            *o += r * (dyv - mean_dy - yv * mean_dy_y);
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape under numpy rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero stride on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { own[i - off] })
        .collect()
}

/// Visits every output position with the matching offsets of two broadcast operands.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `shape`.
pub(crate) fn reduce_to(grad: &[f32], out: &[usize], shape: &[usize], acc: &mut [f32]) {
    if out == shape {
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += g;
        }
        return;
    }
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, ia, _| acc[ia] += grad[o]);
}

pub(crate) fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let gathered: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut y = vec![0.0; x.len()];
    for_each_broadcast(&out_shape, &gathered, &zeros, |o, i, _| y[o] = x[i]);
    (out_shape, y)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn upsample_nearest(x: &[f32], planes: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (ho, wo) = (h * f, w * f);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            let src = &x[p * h * w + (oy / f) * w..p * h * w + (oy / f + 1) * w];
            let dst = &mut y[p * ho * wo + oy * wo..p * ho * wo + (oy + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    y
}

pub(crate) fn upsample_nearest_backward(dy: &[f32], planes: usize, h: usize, w: usize, f: usize, dx: &mut [f32]) {
    let (ho, wo) = (h * f, w * f);
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                dx[p * h * w + (oy / f) * w + ox / f] += dy[p * ho * wo + oy * wo + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let (s, y) = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(y[1], 4.0);
        let (s2, z) = permute(&y, &s, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(z, x);
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = vec![1.0; 12];
        let mut acc = vec![0.0; 3];
        reduce_to(&g, &[4, 3], &[3], &mut acc);
        assert_eq!(acc, vec![4.0; 3]);
    }
}
