//! Parameterized layers built on the tape primitives.

use alloc::format;
use alloc::string::String;
use alloc::vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::math;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Registers parameters under a dotted prefix with seeded initialization.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str, trainable: bool) -> Self {
        Self { store, rng, prefix: prefix.into(), trainable }
    }

    /// A child builder whose names are `prefix.name.*`.
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
            trainable: self.trainable,
        }
    }

    pub fn path(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(&path, value, self.trainable)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.tensor(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<ParamId> {
        let data = (0..shape.iter().product::<usize>()).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.tensor(name, Tensor::new(shape, data)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f32;
        let bound = 1.0 / math::sqrt(fan_in);
        let weight = b.uniform("w", &[c_out, c_in, k, k], bound)?;
        let bias = b.uniform("b", &[1, c_out, 1, 1], bound)?;
        Ok(Self { weight, bias, stride, pad: k / 2 })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add(y, b)
    }
}

/// Dense layer over the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / math::sqrt(d_in as f32);
        let weight = b.uniform("w", &[d_in, d_out], bound)?;
        let bias = if bias { Some(b.uniform("b", &[d_out], bound)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = self.bias.map(|b| g.param(s, b));
        g.linear(x, w, b)
    }
}

/// Group normalization with per-channel affine, over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, channels: usize, groups: usize) -> Result<Self> {
        let gamma = b.tensor("gamma", Tensor::ones(&[1, channels, 1, 1]))?;
        let beta = b.tensor("beta", Tensor::zeros(&[1, channels, 1, 1]))?;
        Ok(Self { gamma, beta, groups: groups.min(channels) })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let n = g.group_norm(x, self.groups, 1e-5)?;
        let ga = g.param(s, self.gamma);
        let be = g.param(s, self.beta);
        let y = g.mul(n, ga)?;
        g.add(y, be)
    }
}

/// Layer normalization with affine over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        let gamma = b.tensor("gamma", Tensor::ones(&[dim]))?;
        let beta = b.tensor("beta", Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let ga = g.param(s, self.gamma);
        let be = g.param(s, self.beta);
        let y = g.mul(n, ga)?;
        g.add(y, be)
    }
}

/// Pre-activation residual block with an optional timestep-embedding injection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    channels: usize,
}

impl ResBlock {
    pub fn new(b: &mut Builder, channels: usize, temb_dim: Option<usize>) -> Result<Self> {
        let groups = 8;
        Ok(Self {
            norm1: GroupNorm::new(&mut b.sub("norm1"), channels, groups)?,
            conv1: Conv2d::new(&mut b.sub("conv1"), channels, channels, 3, 1)?,
            temb: match temb_dim {
                Some(d) => Some(Linear::new(&mut b.sub("temb"), d, channels, true)?),
                None => None,
            },
            norm2: GroupNorm::new(&mut b.sub("norm2"), channels, groups)?,
            conv2: Conv2d::new(&mut b.sub("conv2"), channels, channels, 3, 1)?,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, s, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, s, h)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let t = g.silu(t);
            let t = proj.forward(g, s, t)?;
            let batch = g.shape(t)[0];
            let t = g.reshape(t, &[batch, self.channels, 1, 1])?;
            h = g.add(h, t)?;
        }
        let h = self.norm2.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// `[B, C, H, W] -> [B, H*W, C]`.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

/// `[B, H*W, C] -> [B, C, H, W]`.
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let p = g.permute(t, &[0, 2, 1])?;
    g.reshape(p, &[s[0], s[2], h, w])
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(timesteps: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; timesteps.len() * dim];
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = math::exp(-math::ln(10_000.0) * i as f32 / half as f32);
            data[b * dim + i] = math::cos(t * freq);
            data[b * dim + half + i] = math::sin(t * freq);
        }
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("consistent embedding shape")
}
