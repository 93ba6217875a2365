//! Denoising loss, perceptual loss and the shared frozen feature network.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::math;
use crate::nn::{Builder, Conv2d};
use crate::param::ParamStore;

/// Seed of the fixed feature-network weights. Changing it changes every
/// perceptual score.
pub const FEATURE_NET_SEED: u64 = 0x0f3a_7e11;

/// Channels of the three taps.
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

/// A fixed, seeded random conv stack (three stride-2 stages) standing in for
/// a pretrained perceptual backbone. Never trainable.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub store: ParamStore,
    stages: Vec<(Conv2d, Conv2d)>,
}

impl Default for FeatureNet {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureNet {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_NET_SEED);
        let mut b = Builder::new(&mut store, &mut rng, "feature_net", false);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in FEATURE_CHANNELS.iter().enumerate() {
            let down = conv_he(&mut b.sub(&format!("s{i}.down")), c_in, c, 2);
            let mix = conv_he(&mut b.sub(&format!("s{i}.mix")), c, c, 1);
            stages.push((down, mix));
            c_in = c;
        }
        Self { store, stages }
    }

    /// Raw activations after each stage, `[B, C_k, H/2^k, W/2^k]`.
    pub fn taps(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            bail!(Dimension, "feature net expects [B, 3, H, W], got {:?}", s);
        }
        if s[2] < 8 || s[3] < 8 {
            bail!(Size, "feature net needs at least 8x8 images, got {}x{}", s[2], s[3]);
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (down, mix) in &self.stages {
            h = down.forward(g, &self.store, h)?;
            h = g.silu(h);
            h = mix.forward(g, &self.store, h)?;
            h = g.silu(h);
            taps.push(h);
        }
        Ok(taps)
    }

    /// Taps with each spatial position's channel vector centered and scaled
    /// to unit norm, laid out `[B, H, W, C]`.
    pub fn normalized_taps(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let taps = self.taps(g, x)?;
        taps.into_iter().map(|t| unit_normalize(g, t)).collect()
    }
}

fn conv_he(b: &mut Builder, c_in: usize, c_out: usize, stride: usize) -> Conv2d {
    let fan_in = (c_in * 9) as f32;
    let weight = b.normal("w", &[c_out, c_in, 3, 3], math::sqrt(2.0 / fan_in)).expect("fresh store");
    let bias = b.normal("b", &[1, c_out, 1, 1], 0.1).expect("fresh store");
    Conv2d { weight, bias, stride, pad: 1 }
}

fn unit_normalize(g: &mut Graph, t: Var) -> Result<Var> {
    let c = g.shape(t)[1];
    let p = g.permute(t, &[0, 2, 3, 1])?;
    let n = g.layer_norm(p, 1e-5)?;
    Ok(g.scale(n, 1.0 / math::sqrt(c as f32)))
}

/// Mean over all elements of `(eps_pred - eps)^2`.
pub fn ldm_loss(g: &mut Graph, eps_pred: Var, eps: Var) -> Result<Var> {
    g.mse(eps_pred, eps)
}

/// Sum over taps of the spatial mean of squared differences between
/// unit-normalized features. Averaged over the batch.
pub fn perceptual_loss(g: &mut Graph, x: Var, x_hat: Var, net: &FeatureNet) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        bail!(Dimension, "perceptual loss inputs differ: {:?} vs {:?}", g.shape(x), g.shape(x_hat));
    }
    let fa = net.normalized_taps(g, x)?;
    let fb = net.normalized_taps(g, x_hat)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let c = *g.shape(a).last().expect("rank-4 tap");
        let d = g.sub(a, b)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        // Channel sum, spatial mean.
        let term = g.scale(m, c as f32);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("feature net has taps"))
}

/// `l_ldm + lambda_lpips * l_lpips` on the tape.
pub fn total_loss(g: &mut Graph, l_ldm: Var, l_lpips: Var, lambda_lpips: f32) -> Result<Var> {
    let w = g.scale(l_lpips, lambda_lpips);
    g.add(l_ldm, w)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_ldm: f32, l_lpips: f32, lambda_lpips: f32) -> Result<f32> {
    if !l_ldm.is_finite() || !l_lpips.is_finite() {
        bail!(Numerical, "non-finite loss terms: ldm {}, lpips {}", l_ldm, l_lpips);
    }
    Ok(l_ldm + lambda_lpips * l_lpips)
}
