//! Image-quality scores: SSIM family, feature distances, FID and KID.
//!
//! Images are `[3, H, W]` or `[1, 3, H, W]` tensors in `[-1, 1]`. The
//! structural scores run on luma in `[0, 1]` and in f64.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{bail, Result};
use crate::kv::KvMap;
use crate::losses::{perceptual_loss, FeatureNet};
use crate::math;
use crate::tensor::Tensor;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const CW_WINDOW: usize = 7;
const CW_K: f64 = 1e-4;
const DISTS_C: f64 = 1e-6;
pub const KID_SUBSETS: usize = 10;
pub const KID_SUBSET_MAX: usize = 100;

/// A single-channel f64 image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            bail!(Dimension, "plane {}x{} given {} values", h, w, data.len());
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Plane { h: self.h, w: self.w, data }
    }

    fn downsample2(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x) + self.at(2 * y + 1, 2 * x + 1);
                data.push(0.25 * s);
            }
        }
        Plane { h, w, data }
    }
}

fn image_hw(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] | [1, 3, h, w] => Ok((h, w)),
        ref s => bail!(Dimension, "expected an RGB image [3, H, W], got {:?}", s),
    }
}

fn pair_hw(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ha, wa) = image_hw(a)?;
    let (hb, wb) = image_hw(b)?;
    if (ha, wa) != (hb, wb) {
        bail!(Dimension, "image sizes differ: {}x{} vs {}x{}", ha, wa, hb, wb);
    }
    Ok((ha, wa))
}

/// BT.601 luma of a `[-1, 1]` RGB image, mapped to `[0, 1]`.
pub fn luma(img: &Tensor) -> Result<Plane> {
    let (h, w) = image_hw(img)?;
    let d = img.data();
    let n = h * w;
    let data = (0..n)
        .map(|i| {
            let y = 0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64;
            0.5 * (y + 1.0)
        })
        .collect();
    Ok(Plane { h, w, data })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| math::exp64(-(i as f64 - c) * (i as f64 - c) / (2.0 * sigma * sigma))).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable correlation without padding.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut data = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &kv) in k.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in data[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    Plane { h: oh, w: ow, data }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean SSIM and mean contrast-structure term over the valid windows.
fn ssim_terms(a: &Plane, b: &Plane) -> Result<(f64, f64)> {
    if (a.h, a.w) != (b.h, b.w) {
        bail!(Dimension, "plane sizes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w);
    }
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        bail!(Size, "SSIM needs at least {0}x{0}, got {1}x{2}", SSIM_WINDOW, a.h, a.w);
    }
    let k = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let e_aa = filter_valid(&a.zip(a, |x, y| x * y), &k);
    let e_bb = filter_valid(&b.zip(b, |x, y| x * y), &k);
    let e_ab = filter_valid(&a.zip(b, |x, y| x * y), &k);
    let n = mu_a.data.len();
    let (mut ssim, mut cs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = e_aa.data[i] - ma * ma;
        let vb = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        let c = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        ssim.push(l * c);
        cs.push(c);
    }
    Ok((mean(&ssim), mean(&cs)))
}

/// Mean local SSIM of two luma planes in `[0, 1]`.
pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    Ok(ssim_terms(a, b)?.0)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    pair_hw(a, b)?;
    ssim_plane(&luma(a)?, &luma(b)?)
}

/// Dyadic scales that still fit an SSIM window, capped at five.
pub fn ms_ssim_scale_count(h: usize, w: usize) -> usize {
    let mut n = 0;
    let mut side = h.min(w);
    while n < MS_SSIM_WEIGHTS.len() && side >= SSIM_WINDOW {
        n += 1;
        side /= 2;
    }
    n
}

/// Multiscale SSIM over as many scales as the image allows (at least two).
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = pair_hw(a, b)?;
    let scales = ms_ssim_scale_count(h, w);
    if scales < 2 {
        bail!(Size, "MS-SSIM needs two scales, {}x{} allows {}", h, w, scales);
    }
    ms_ssim_planes(&luma(a)?, &luma(b)?, scales)
}

/// Multiscale SSIM with an explicit scale count; the leading weights are
/// renormalized to sum to one. Negative terms clamp to zero before the
/// fractional powers.
pub fn ms_ssim_planes(a: &Plane, b: &Plane, scales: usize) -> Result<f64> {
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        bail!(Range, "scale count {} outside 1..=5", scales);
    }
    if (a.h, a.w) != (b.h, b.w) {
        bail!(Dimension, "plane sizes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w);
    }
    if ms_ssim_scale_count(a.h, a.w) < scales {
        bail!(Size, "{}x{} is too small for {} scales", a.h, a.w, scales);
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut score = 1.0;
    for (j, &w) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (s, cs) = ssim_terms(&a, &b)?;
        let term = if j + 1 == scales { s } else { cs };
        score *= libm::pow(term.max(0.0), w / total);
        if j + 1 < scales {
            a = a.downsample2();
            b = b.downsample2();
        }
    }
    Ok(score)
}

struct Kernel {
    r: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Complex Gabor with its DC response removed. The envelope sums to one.
fn gabor(wavelength: f64, sigma: f64, theta: f64) -> Kernel {
    let r = libm::ceil(2.5 * sigma) as usize;
    let side = 2 * r + 1;
    let (ct, st) = (libm::cos(theta), libm::sin(theta));
    let mut env = Vec::with_capacity(side * side);
    let mut phase = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 - r as f64, y as f64 - r as f64);
            env.push(math::exp64(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
            phase.push(2.0 * core::f64::consts::PI * (dx * ct + dy * st) / wavelength);
        }
    }
    let es: f64 = env.iter().sum();
    let dc: f64 = env.iter().zip(&phase).map(|(e, p)| e * libm::cos(*p)).sum::<f64>() / es;
    let re = env.iter().zip(&phase).map(|(e, p)| e * (libm::cos(*p) - dc) / es).collect();
    let im = env.iter().zip(&phase).map(|(e, p)| e * libm::sin(*p) / es).collect();
    Kernel { r, re, im }
}

fn lowpass(sigma: f64) -> Kernel {
    let r = libm::ceil(2.5 * sigma) as usize;
    let t = gaussian_taps(2 * r + 1, sigma);
    let re = t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect();
    Kernel { r, re, im: vec![0.0; (2 * r + 1) * (2 * r + 1)] }
}

/// Circular correlation; returns real and imaginary maps.
fn circular_filter(p: &Plane, k: &Kernel) -> (Vec<f64>, Vec<f64>) {
    let side = 2 * k.r + 1;
    let (h, w) = (p.h, p.w);
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    let has_im = k.im.iter().any(|&v| v != 0.0);
    for y in 0..h {
        for x in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for ky in 0..side {
                let yy = (y + h * side - k.r + ky) % h;
                let row = &p.data[yy * w..(yy + 1) * w];
                for kx in 0..side {
                    let v = row[(x + w * side - k.r + kx) % w];
                    sr += k.re[ky * side + kx] * v;
                    if has_im {
                        si += k.im[ky * side + kx] * v;
                    }
                }
            }
            re[y * w + x] = sr;
            im[y * w + x] = si;
        }
    }
    (re, im)
}

/// Sliding `n x n` box sums without padding.
fn box_sums(v: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let p = Plane { h, w, data: v.to_vec() };
    filter_valid(&p, &vec![1.0; n]).data
}

/// Complex-wavelet SSIM: four orientations at two scales plus a lowpass
/// band, each scored on `7x7` windows and averaged.
pub fn cw_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    pair_hw(a, b)?;
    cw_ssim_plane(&luma(a)?, &luma(b)?)
}

pub fn cw_ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        bail!(Dimension, "plane sizes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w);
    }
    if a.h < CW_WINDOW || a.w < CW_WINDOW {
        bail!(Size, "CW-SSIM needs at least {0}x{0}, got {1}x{2}", CW_WINDOW, a.h, a.w);
    }
    let mut bank = Vec::new();
    for (wavelength, sigma) in [(4.0, 2.0), (8.0, 4.0)] {
        for o in 0..4 {
            bank.push(gabor(wavelength, sigma, o as f64 * core::f64::consts::FRAC_PI_4));
        }
    }
    bank.push(lowpass(2.0));
    let (h, w) = (a.h, a.w);
    let mut total = 0.0;
    for k in &bank {
        let (ar, ai) = circular_filter(a, k);
        let (br, bi) = circular_filter(b, k);
        // c_a * conj(c_b)
        let pr: Vec<f64> = (0..h * w).map(|i| ar[i] * br[i] + ai[i] * bi[i]).collect();
        let pi: Vec<f64> = (0..h * w).map(|i| ai[i] * br[i] - ar[i] * bi[i]).collect();
        let ea: Vec<f64> = (0..h * w).map(|i| ar[i] * ar[i] + ai[i] * ai[i]).collect();
        let eb: Vec<f64> = (0..h * w).map(|i| br[i] * br[i] + bi[i] * bi[i]).collect();
        let (pr, pi) = (box_sums(&pr, h, w, CW_WINDOW), box_sums(&pi, h, w, CW_WINDOW));
        let (ea, eb) = (box_sums(&ea, h, w, CW_WINDOW), box_sums(&eb, h, w, CW_WINDOW));
        let s: Vec<f64> = (0..pr.len())
            .map(|i| (2.0 * libm::hypot(pr[i], pi[i]) + CW_K) / (ea[i] + eb[i] + CW_K))
            .collect();
        total += mean(&s);
    }
    Ok(total / bank.len() as f64)
}

fn as_batch(img: &Tensor) -> Result<Tensor> {
    let (h, w) = image_hw(img)?;
    img.reshape(&[1, 3, h, w])
}

/// Peak signal-to-noise ratio in dB, measured on the `[0, 1]` scale over
/// every channel. Identical inputs give infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        bail!(Dimension, "psnr inputs {:?} and {:?}", a.shape(), b.shape());
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| {
        let d = 0.5 * (x as f64 - y as f64);
        d * d
    });
    let mse = mse.sum::<f64>() / a.numel() as f64;
    Ok(-10.0 * libm::log10(mse))
}

/// Perceptual distance, same math as the training loss.
pub fn lpips_distance(a: &Tensor, b: &Tensor, net: &FeatureNet) -> Result<f64> {
    pair_hw(a, b)?;
    let mut g = Graph::inference();
    let x = g.constant(as_batch(a)?);
    let y = g.constant(as_batch(b)?);
    let d = perceptual_loss(&mut g, x, y, net)?;
    Ok(g.value(d).item() as f64)
}

/// Per-channel spatial statistics of a `[1, C, H, W]` map.
fn channel_stats(t: &Tensor) -> Vec<(f64, f64, Vec<f64>)> {
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    (0..c)
        .map(|ch| {
            let v: Vec<f64> = t.data()[ch * hw..(ch + 1) * hw].iter().map(|&x| x as f64).collect();
            let m = mean(&v);
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
            (m, var, v)
        })
        .collect()
}

/// Structure-and-texture distance: one minus the mean, over the input and
/// each feature tap, of per-channel texture (means) and structure
/// (correlation) similarities with equal weights.
pub fn dists(a: &Tensor, b: &Tensor, net: &FeatureNet) -> Result<f64> {
    pair_hw(a, b)?;
    let mut g = Graph::inference();
    let x = g.constant(as_batch(a)?);
    let y = g.constant(as_batch(b)?);
    let mut stages = vec![(x, y)];
    stages.extend(net.taps(&mut g, x)?.into_iter().zip(net.taps(&mut g, y)?));
    let mut total = 0.0;
    for &(fa, fb) in &stages {
        let sa = channel_stats(g.value(fa));
        let sb = channel_stats(g.value(fb));
        let mut stage = 0.0;
        for ((ma, va, xa), (mb, vb, xb)) in sa.iter().zip(&sb) {
            let cov = xa.iter().zip(xb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / xa.len() as f64;
            let texture = (2.0 * ma * mb + DISTS_C) / (ma * ma + mb * mb + DISTS_C);
            let structure = (2.0 * cov + DISTS_C) / (va + vb + DISTS_C);
            stage += 0.5 * (texture + structure);
        }
        total += stage / sa.len() as f64;
    }
    Ok(1.0 - total / stages.len() as f64)
}

/// Global-average-pooled final-tap features, one row per image.
pub fn embed(images: &[Tensor], net: &FeatureNet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let batch: Vec<Tensor> = chunk.iter().map(|t| image_hw(t).and_then(|(h, w)| t.reshape(&[3, h, w]))).collect::<Result<_>>()?;
        let mut g = Graph::inference();
        let x = g.constant(Tensor::stack(&batch)?);
        let taps = net.taps(&mut g, x)?;
        let last = g.value(*taps.last().expect("feature net has taps"));
        let (n, c, hw) = (last.shape()[0], last.shape()[1], last.shape()[2] * last.shape()[3]);
        for i in 0..n {
            out.push(
                (0..c)
                    .map(|ch| {
                        let s = &last.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        s.iter().map(|&v| v as f64).sum::<f64>() / hw as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn psd_floor(max_eig: f64) -> f64 {
    -1e-8 * max_eig.abs().max(1.0)
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            bail!(Dimension, "covariance {:?} for a {}-dim mean", cov.shape(), d);
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-6 * scale {
            bail!(Numerical, "covariance is not symmetric");
        }
        let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo < psd_floor(hi) {
            bail!(Numerical, "covariance has eigenvalue {:e}", lo);
        }
        Ok(Self { mean, cov })
    }

    /// Sample statistics with the `n - 1` covariance normalization.
    pub fn from_features(feats: &[Vec<f64>]) -> Result<Self> {
        if feats.len() < 2 {
            bail!(Size, "need at least two feature rows, got {}", feats.len());
        }
        let d = feats[0].len();
        if feats.iter().any(|f| f.len() != d) {
            bail!(Dimension, "feature rows have unequal lengths");
        }
        let n = feats.len();
        let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let floor = psd_floor(eig.eigenvalues.max());
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < floor {
            bail!(Numerical, "matrix is not positive semidefinite (eigenvalue {:e})", *v);
        }
        *v = math::sqrt64(v.max(0.0));
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Frechet distance between two Gaussians.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        bail!(Dimension, "feature dimensions differ: {} vs {}", a.dim(), b.dim());
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    // Tr (S_a S_b)^(1/2) = Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), symmetric throughout.
    let sa = sqrt_psd(&a.cov)?;
    let mut inner = &sa * &b.cov * &sa;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(&inner)?.trace();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Subset estimates of the unbiased polynomial-kernel MMD^2.
#[derive(Clone, Debug, PartialEq)]
pub struct KidEstimate {
    pub mean: f64,
    pub subsets: Vec<f64>,
}

impl KidEstimate {
    /// Sample standard deviation across subsets.
    pub fn std(&self) -> f64 {
        let n = self.subsets.len();
        if n < 2 {
            return 0.0;
        }
        let v = self.subsets.iter().map(|s| (s - self.mean) * (s - self.mean)).sum::<f64>() / (n - 1) as f64;
        math::sqrt64(v)
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let k = dot / x.len() as f64 + 1.0;
    k * k * k
}

/// Unbiased MMD^2 between two equal-size sets.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let s = x.len() as f64;
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..y.len() {
            if i != j {
                kxx += poly_kernel(x[i], x[j]);
                kyy += poly_kernel(y[i], y[j]);
            }
            kxy += poly_kernel(x[i], y[j]);
        }
    }
    kxx / (s * (s - 1.0)) + kyy / (s * (s - 1.0)) - 2.0 * kxy / (s * s)
}

/// Kernel inception distance over [`KID_SUBSETS`] seeded subsets of size
/// `min(n, m, 100)`.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<KidEstimate> {
    if a.len() < 2 || b.len() < 2 {
        bail!(Size, "KID needs at least two samples per set, got {} and {}", a.len(), b.len());
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|f| f.len() != d) {
        bail!(Dimension, "feature rows have unequal lengths");
    }
    let size = a.len().min(b.len()).min(KID_SUBSET_MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets = Vec::with_capacity(KID_SUBSETS);
    for _ in 0..KID_SUBSETS {
        let ia = rand::seq::index::sample(&mut rng, a.len(), size);
        let ib = rand::seq::index::sample(&mut rng, b.len(), size);
        let xs: Vec<&[f64]> = ia.iter().map(|i| a[i].as_slice()).collect();
        let ys: Vec<&[f64]> = ib.iter().map(|i| b[i].as_slice()).collect();
        subsets.push(mmd2_unbiased(&xs, &ys));
    }
    Ok(KidEstimate { mean: mean(&subsets), subsets })
}

/// Scores of one generated/reference pair, unscaled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    pub ssim: f64,
    pub ms_ssim: f64,
    pub cw_ssim: f64,
    pub lpips: f64,
    pub dists: f64,
}

pub fn pair_scores(a: &Tensor, b: &Tensor, net: &FeatureNet) -> Result<PairScores> {
    let (la, lb) = (luma(a)?, luma(b)?);
    pair_hw(a, b)?;
    let scales = ms_ssim_scale_count(la.h, la.w);
    if scales < 2 {
        bail!(Size, "MS-SSIM needs two scales, {}x{} allows {}", la.h, la.w, scales);
    }
    Ok(PairScores {
        ssim: ssim_plane(&la, &lb)?,
        ms_ssim: ms_ssim_planes(&la, &lb, scales)?,
        cw_ssim: cw_ssim_plane(&la, &lb)?,
        lpips: lpips_distance(a, b, net)?,
        dists: dists(a, b, net)?,
    })
}

/// The evaluation table row in reporting units: structural scores and
/// feature distances times 100, KID times 1000, FID as is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub pairs: usize,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub cw_ssim: f64,
    pub lpips: f64,
    pub dists: f64,
    pub fid: f64,
    pub kid: f64,
}

impl MetricsReport {
    /// Scales raw values into reporting units.
    pub fn from_raw(pairs: usize, mean: &PairScores, fid: f64, kid: f64) -> Self {
        Self {
            pairs,
            ssim: 100.0 * mean.ssim,
            ms_ssim: 100.0 * mean.ms_ssim,
            cw_ssim: 100.0 * mean.cw_ssim,
            lpips: 100.0 * mean.lpips,
            dists: 100.0 * mean.dists,
            fid,
            kid: 1000.0 * kid,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("pairs", self.pairs);
        for (k, v) in self.named() {
            m.set(k, alloc::format!("{v:.6}"));
        }
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        Ok(Self {
            pairs: m.require("pairs")?,
            ssim: m.require("ssim")?,
            ms_ssim: m.require("ms_ssim")?,
            cw_ssim: m.require("cw_ssim")?,
            lpips: m.require("lpips")?,
            dists: m.require("dists")?,
            fid: m.require("fid")?,
            kid: m.require("kid")?,
        })
    }

    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("ssim", self.ssim),
            ("ms_ssim", self.ms_ssim),
            ("cw_ssim", self.cw_ssim),
            ("lpips", self.lpips),
            ("dists", self.dists),
            ("fid", self.fid),
            ("kid", self.kid),
        ]
    }
}

/// Paired scores averaged over pairs; FID and KID on pooled embeddings.
pub fn evaluate_images(generated: &[Tensor], reference: &[Tensor], net: &FeatureNet, kid_seed: u64) -> Result<MetricsReport> {
    if generated.len() != reference.len() {
        bail!(Dimension, "{} generated images for {} references", generated.len(), reference.len());
    }
    if generated.len() < 2 {
        bail!(Size, "evaluation needs at least two pairs, got {}", generated.len());
    }
    let n = generated.len() as f64;
    let mut acc = PairScores { ssim: 0.0, ms_ssim: 0.0, cw_ssim: 0.0, lpips: 0.0, dists: 0.0 };
    for (a, b) in generated.iter().zip(reference) {
        let s = pair_scores(a, b, net)?;
        acc.ssim += s.ssim / n;
        acc.ms_ssim += s.ms_ssim / n;
        acc.cw_ssim += s.cw_ssim / n;
        acc.lpips += s.lpips / n;
        acc.dists += s.dists / n;
    }
    let ea = embed(generated, net)?;
    let eb = embed(reference, net)?;
    let f = fid(&GaussianStats::from_features(&ea)?, &GaussianStats::from_features(&eb)?)?;
    let k = kid(&ea, &eb, kid_seed)?;
    Ok(MetricsReport::from_raw(generated.len(), &acc, f, k.mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn gabor_has_no_dc_response() {
        let k = gabor(4.0, 2.0, 0.3);
        assert!(k.re.iter().sum::<f64>().abs() < 1e-12);
        assert!(k.im.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn scale_counts() {
        assert_eq!(ms_ssim_scale_count(64, 64), 3);
        assert_eq!(ms_ssim_scale_count(176, 176), 5);
        assert_eq!(ms_ssim_scale_count(21, 64), 1);
    }
}
