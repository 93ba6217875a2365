//! Toy VAE, image-token encoder, prompt embedding and the two parallel U-Nets.
//!
//! Parameter names are grouped by prefix: `vae.*`, `image_enc.*` (frozen
//! feature stack), `image_proj.*`, `prompt.*`, `denoise.*` and
//! `reference.*`. The freeze partition is applied by name.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionWeights, TsfaBlock};
use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::kv::KvMap;
use crate::nn::{from_tokens, timestep_embedding, to_tokens, Builder, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;
pub const VAE_FACTOR: usize = 8;
/// Number of attention sites in the three-level U-Net.
pub const SITE_COUNT: usize = 7;

/// The five ablation cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationCase {
    /// No image branch and no alignment blocks.
    Baseline,
    /// Image branch present; every site is pure cross-attention to `C_ref`.
    IebCa,
    EncoderOnly,
    DecoderOnly,
    Full,
}

impl AblationCase {
    pub const ALL: [AblationCase; 5] = [Self::Baseline, Self::IebCa, Self::EncoderOnly, Self::DecoderOnly, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::IebCa => "ieb_ca",
            Self::EncoderOnly => "encoder_only",
            Self::DecoderOnly => "decoder_only",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|c| c.name() == s) {
            Some(c) => Ok(*c),
            None => bail!(Config, "unknown ablation case '{}' (expected one of baseline, ieb_ca, encoder_only, decoder_only, full)", s),
        }
    }

    /// Whether the image branch (token encoder, projection, reference U-Net) exists.
    pub fn uses_reference(self) -> bool {
        self != Self::Baseline
    }

    pub fn site_mode(self, level: SiteLevel) -> SiteMode {
        match (self, level) {
            (Self::Baseline, _) => SiteMode::SelfOnly,
            (Self::IebCa, _) => SiteMode::CrossOnly,
            (Self::Full, _) => SiteMode::Tsfa,
            (Self::EncoderOnly, SiteLevel::Encoder) | (Self::DecoderOnly, SiteLevel::Decoder) => SiteMode::Tsfa,
            _ => SiteMode::SelfOnly,
        }
    }
}

impl fmt::Display for AblationCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteLevel {
    Encoder,
    Middle,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteMode {
    SelfOnly,
    Tsfa,
    CrossOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub case: AblationCase,
    pub lambda: f32,
    pub image_size: usize,
    /// U-Net channel widths per level.
    pub widths: [usize; 3],
    /// VAE widths at full, 1/2, 1/4 and 1/8 resolution.
    pub vae_widths: [usize; 4],
    pub heads: usize,
    /// Width of prompt and image tokens.
    pub d_ctx: usize,
    pub prompt_len: usize,
    pub temb_dim: usize,
    /// Unfreezes the whole denoising U-Net (frozen-vs-unfrozen comparison).
    pub unfreeze_denoiser: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            case: AblationCase::Full,
            lambda: 1.0,
            image_size: 64,
            widths: [32, 64, 128],
            vae_widths: [16, 32, 64, 128],
            heads: 4,
            d_ctx: 64,
            prompt_len: 8,
            temb_dim: 128,
            unfreeze_denoiser: false,
        }
    }
}

impl ModelConfig {
    /// Keys read by [`ModelConfig::from_kv`].
    pub const KEYS: [&'static str; 10] =
        ["case", "lambda", "image_size", "widths", "vae_widths", "heads", "d_ctx", "prompt_len", "temb_dim", "unfreeze_denoiser"];

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("case", self.case);
        m.set("lambda", self.lambda);
        m.set("image_size", self.image_size);
        m.set("widths", join(&self.widths));
        m.set("vae_widths", join(&self.vae_widths));
        m.set("heads", self.heads);
        m.set("d_ctx", self.d_ctx);
        m.set("prompt_len", self.prompt_len);
        m.set("temb_dim", self.temb_dim);
        m.set("unfreeze_denoiser", self.unfreeze_denoiser);
        m
    }

    /// Defaults overridden by whichever [`ModelConfig::KEYS`] are present;
    /// other keys are ignored.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        if let Some(v) = m.get_str("case") {
            c.case = AblationCase::parse(v)?;
        }
        c.lambda = m.get("lambda")?.unwrap_or(c.lambda);
        c.image_size = m.get("image_size")?.unwrap_or(c.image_size);
        if let Some(v) = m.get_str("widths") {
            c.widths = split_widths(v)?;
        }
        if let Some(v) = m.get_str("vae_widths") {
            c.vae_widths = split_widths(v)?;
        }
        c.heads = m.get("heads")?.unwrap_or(c.heads);
        c.d_ctx = m.get("d_ctx")?.unwrap_or(c.d_ctx);
        c.prompt_len = m.get("prompt_len")?.unwrap_or(c.prompt_len);
        c.temb_dim = m.get("temb_dim")?.unwrap_or(c.temb_dim);
        c.unfreeze_denoiser = m.get("unfreeze_denoiser")?.unwrap_or(c.unfreeze_denoiser);
        c.validate()?;
        Ok(c)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / VAE_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        attention::check_lambda(self.lambda)?;
        if self.image_size == 0 || self.image_size % (VAE_FACTOR * 4) != 0 {
            bail!(Config, "image size {} must be a positive multiple of {}", self.image_size, VAE_FACTOR * 4);
        }
        for &w in self.widths.iter().chain(&[self.d_ctx]) {
            if self.heads == 0 || w % self.heads != 0 {
                bail!(Config, "width {} not divisible by head count {}", w, self.heads);
            }
        }
        Ok(())
    }
}

fn join(ws: &[usize]) -> String {
    ws.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(",")
}

fn split_widths<const N: usize>(v: &str) -> Result<[usize; N]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let mut out = [0; N];
    if parts.len() != N {
        bail!(Config, "expected {} comma-separated widths, got {:?}", N, v);
    }
    for (o, p) in out.iter_mut().zip(parts) {
        match p.parse() {
            Ok(w) if w > 0 => *o = w,
            _ => bail!(Config, "bad width {:?} in {:?}", p, v),
        }
    }
    Ok(out)
}

fn check_image(g: &Graph, x: Var, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != channels {
        bail!(Dimension, "{} expects [B, {}, H, W], got {:?}", what, channels, s);
    }
    Ok((s[0], s[2], s[3]))
}

// ---------------------------------------------------------------------------
// VAE

#[derive(Clone, Debug)]
pub struct ToyVae {
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, ResBlock)>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_up: Vec<(Conv2d, Option<ResBlock>)>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
    /// Multiplier taking encoder means to roughly unit variance.
    pub latent_scale: ParamId,
}

impl ToyVae {
    pub fn new(b: &mut Builder, widths: [usize; 4]) -> Result<Self> {
        let [w0, w1, w2, w3] = widths;
        let enc_in = Conv2d::new(&mut b.sub("enc.in"), 3, w0, 3, 1)?;
        let mut enc_down = Vec::new();
        for (i, (ci, co)) in [(w0, w1), (w1, w2), (w2, w3)].into_iter().enumerate() {
            let conv = Conv2d::new(&mut b.sub(&format!("enc.down{i}")), ci, co, 3, 2)?;
            let res = ResBlock::new(&mut b.sub(&format!("enc.res{i}")), co, None)?;
            enc_down.push((conv, res));
        }
        let enc_norm = GroupNorm::new(&mut b.sub("enc.norm"), w3, 8)?;
        let enc_out = Conv2d::new(&mut b.sub("enc.out"), w3, LATENT_CHANNELS, 3, 1)?;
        let dec_in = Conv2d::new(&mut b.sub("dec.in"), LATENT_CHANNELS, w3, 3, 1)?;
        let dec_mid = ResBlock::new(&mut b.sub("dec.mid"), w3, None)?;
        let mut dec_up = Vec::new();
        for (i, (ci, co)) in [(w3, w2), (w2, w1), (w1, w0)].into_iter().enumerate() {
            let conv = Conv2d::new(&mut b.sub(&format!("dec.up{i}")), ci, co, 3, 1)?;
            // The full-resolution level skips its residual block to bound cost.
            let res = if i < 2 { Some(ResBlock::new(&mut b.sub(&format!("dec.res{i}")), co, None)?) } else { None };
            dec_up.push((conv, res));
        }
        let dec_norm = GroupNorm::new(&mut b.sub("dec.norm"), w0, 8)?;
        let dec_out = Conv2d::new(&mut b.sub("dec.out"), w0, 3, 3, 1)?;
        let latent_scale = b.tensor("latent_scale", Tensor::ones(&[1]))?;
        Ok(Self { enc_in, enc_down, enc_norm, enc_out, dec_in, dec_mid, dec_up, dec_norm, dec_out, latent_scale })
    }

    /// Posterior mean: `[B, 3, H, W] -> [B, 4, H/8, W/8]`.
    pub fn encode(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (_, h, w) = check_image(g, x, 3, "vae encoder")?;
        if h % VAE_FACTOR != 0 || w % VAE_FACTOR != 0 {
            bail!(Dimension, "image size {}x{} not divisible by {}", h, w, VAE_FACTOR);
        }
        let mut y = self.enc_in.forward(g, s, x)?;
        for (down, res) in &self.enc_down {
            y = down.forward(g, s, y)?;
            y = res.forward(g, s, y, None)?;
        }
        let y = self.enc_norm.forward(g, s, y)?;
        let y = g.silu(y);
        self.enc_out.forward(g, s, y)
    }

    /// `[B, 4, h, w] -> [B, 3, 8h, 8w]`, bounded by `tanh`.
    pub fn decode(&self, g: &mut Graph, s: &ParamStore, z: Var) -> Result<Var> {
        check_image(g, z, LATENT_CHANNELS, "vae decoder")?;
        let y = self.dec_in.forward(g, s, z)?;
        let mut y = self.dec_mid.forward(g, s, y, None)?;
        for (conv, res) in &self.dec_up {
            y = g.upsample_nearest(y, 2)?;
            y = conv.forward(g, s, y)?;
            if let Some(res) = res {
                y = res.forward(g, s, y, None)?;
            }
        }
        let y = self.dec_norm.forward(g, s, y)?;
        let y = g.silu(y);
        let y = self.dec_out.forward(g, s, y)?;
        Ok(g.tanh(y))
    }

    /// Scaled diffusion latent of an image.
    pub fn encode_scaled(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let z = self.encode(g, s, x)?;
        let k = g.param(s, self.latent_scale);
        g.mul(z, k)
    }

    /// Inverse of [`Self::encode_scaled`] followed by decoding.
    pub fn decode_scaled(&self, g: &mut Graph, s: &ParamStore, z: Var) -> Result<Var> {
        let inv = 1.0 / s.value(self.latent_scale).data()[0];
        let z = g.scale(z, inv);
        self.decode(g, s, z)
    }
}

// ---------------------------------------------------------------------------
// Image tokens and prompt

/// Frozen conv feature stack (16 tokens for a 64px image) plus a trainable projection.
#[derive(Clone, Debug)]
pub struct ImageTokenEncoder {
    stack: Vec<Conv2d>,
    pub proj: Linear,
    image_size: usize,
}

impl ImageTokenEncoder {
    /// Feature stack under `image_enc.*` (seeded by `stack_rng`) and the
    /// projection under `image_proj.*`.
    pub fn new(
        store: &mut ParamStore,
        stack_rng: &mut ChaCha8Rng,
        proj_rng: &mut ChaCha8Rng,
        image_size: usize,
        d_ctx: usize,
    ) -> Result<Self> {
        let chans = [3, 16, 32, 64, d_ctx];
        let mut convs = Vec::new();
        let mut b = Builder::new(store, stack_rng, "image_enc", false);
        for i in 0..4 {
            convs.push(Conv2d::new(&mut b.sub(&format!("conv{i}")), chans[i], chans[i + 1], 3, 2)?);
        }
        let proj = Linear::new(&mut Builder::new(store, proj_rng, "image_proj", true), d_ctx, d_ctx, true)?;
        Ok(Self { stack: convs, proj, image_size })
    }

    /// Output of the frozen stack, `[B, M, d_img]`.
    pub fn features(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (_, h, w) = check_image(g, x, 3, "image token encoder")?;
        if h != self.image_size || w != self.image_size {
            bail!(Dimension, "image token encoder expects {0}x{0} images, got {1}x{2}", self.image_size, h, w);
        }
        let mut y = x;
        for (i, conv) in self.stack.iter().enumerate() {
            y = conv.forward(g, s, y)?;
            if i + 1 < self.stack.len() {
                y = g.silu(y);
            }
        }
        to_tokens(g, y)
    }

    pub fn project(&self, g: &mut Graph, s: &ParamStore, feats: Var) -> Result<Var> {
        self.proj.forward(g, s, feats)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let f = self.features(g, s, x)?;
        self.project(g, s, f)
    }
}

/// The fixed prompt token matrix and the learned null tokens used for
/// unconditional prediction.
#[derive(Clone, Debug)]
pub struct PromptEmbedding {
    pub tokens: ParamId,
    pub null_tokens: ParamId,
}

impl PromptEmbedding {
    pub fn new(b: &mut Builder, len: usize, dim: usize) -> Result<Self> {
        let tokens = b.normal("tokens", &[len, dim], 1.0)?;
        let null_tokens = b.tensor("null_tokens", Tensor::zeros(&[len, dim]))?;
        Ok(Self { tokens, null_tokens })
    }

    /// `[B, L, d]` context; the null rows when `null` is set.
    pub fn context(&self, g: &mut Graph, s: &ParamStore, batch: usize, null: bool) -> Result<Var> {
        let id = if null { self.null_tokens } else { self.tokens };
        let shape = s.value(id).shape().to_vec();
        let p = g.param(s, id);
        let p = g.reshape(p, &[1, shape[0], shape[1]])?;
        let zeros = g.constant(Tensor::zeros(&[batch, shape[0], shape[1]]));
        g.add(zeros, p)
    }
}

// ---------------------------------------------------------------------------
// U-Net

#[derive(Clone, Debug)]
enum SiteAttention {
    SelfOnly(AttentionWeights),
    Tsfa(TsfaBlock),
    CrossOnly(AttentionWeights),
}

/// Attention to a token context (prompt or image tokens).
#[derive(Clone, Debug)]
struct ContextAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl ContextAttention {
    fn new(b: &mut Builder, dim: usize, d_ctx: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(&mut b.sub("q"), dim, dim, false)?,
            wk: Linear::new(&mut b.sub("k"), d_ctx, dim, false)?,
            wv: Linear::new(&mut b.sub("v"), d_ctx, dim, false)?,
            wo: Linear::new(&mut b.sub("o"), dim, dim, true)?,
            heads,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, ctx: Var) -> Result<Var> {
        let q = self.wq.forward(g, s, x)?;
        let k = self.wk.forward(g, s, ctx)?;
        let v = self.wv.forward(g, s, ctx)?;
        let (o, _) = attention::attend(g, q, k, v, self.heads)?;
        self.wo.forward(g, s, o)
    }
}

/// One transformer-style site: normalized attention with output projection,
/// then attention to the context tokens, both residual.
#[derive(Clone, Debug)]
pub struct AttentionSite {
    pub level: SiteLevel,
    pub dim: usize,
    norm1: LayerNorm,
    attn: SiteAttention,
    out: Linear,
    norm2: LayerNorm,
    context: ContextAttention,
}

impl AttentionSite {
    fn new(b: &mut Builder, level: SiteLevel, dim: usize, cfg: &ModelConfig, mode: SiteMode) -> Result<Self> {
        let norm1 = LayerNorm::new(&mut b.sub("norm1"), dim)?;
        let weights = AttentionWeights::new(&mut b.sub("attn"), dim, cfg.heads)?;
        let attn = match mode {
            SiteMode::SelfOnly => SiteAttention::SelfOnly(weights),
            SiteMode::Tsfa => SiteAttention::Tsfa(TsfaBlock::new(weights.with_reference(&mut b.sub("attn"), dim)?, cfg.lambda)?),
            SiteMode::CrossOnly => SiteAttention::CrossOnly(weights.with_reference(&mut b.sub("attn"), dim)?),
        };
        Ok(Self {
            level,
            dim,
            norm1,
            attn,
            out: Linear::new(&mut b.sub("attn_out"), dim, dim, true)?,
            norm2: LayerNorm::new(&mut b.sub("norm2"), dim)?,
            context: ContextAttention::new(&mut b.sub("ctx"), dim, cfg.d_ctx, cfg.heads)?,
        })
    }

    pub fn mode(&self) -> SiteMode {
        match self.attn {
            SiteAttention::SelfOnly(_) => SiteMode::SelfOnly,
            SiteAttention::Tsfa(_) => SiteMode::Tsfa,
            SiteAttention::CrossOnly(_) => SiteMode::CrossOnly,
        }
    }

    pub fn tsfa(&self) -> Option<&TsfaBlock> {
        match &self.attn {
            SiteAttention::Tsfa(b) => Some(b),
            _ => None,
        }
    }

    /// Runs the site on `[B, C, H, W]`; returns the output and the normalized
    /// tokens entering the attention block.
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, ctx: Var, c_ref: Option<Var>) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let tokens = to_tokens(g, x)?;
        let n1 = self.norm1.forward(g, s, tokens)?;
        let attended = match (&self.attn, c_ref) {
            (SiteAttention::SelfOnly(w), _) | (SiteAttention::Tsfa(TsfaBlock { weights: w, .. }), None) => {
                Some(attention::self_attention(g, s, n1, w)?)
            }
            (SiteAttention::Tsfa(block), Some(c)) => Some(attention::tsfa_forward(g, s, n1, c, block)?),
            (SiteAttention::CrossOnly(w), Some(c)) => Some(attention::reference_only_attention(g, s, n1, c, w)?),
            // Cross-only attention over an empty reference set contributes nothing.
            (SiteAttention::CrossOnly(_), None) => None,
        };
        let mut h = tokens;
        if let Some(a) = attended {
            let a = self.out.forward(g, s, a)?;
            h = g.add(h, a)?;
        }
        let n2 = self.norm2.forward(g, s, h)?;
        let c = self.context.forward(g, s, n2, ctx)?;
        let h = g.add(h, c)?;
        Ok((from_tokens(g, h, shape[2], shape[3])?, n1))
    }
}

/// Three-level U-Net over latents with one residual block and one attention
/// site per level (encoder, bottleneck, decoder: seven sites).
#[derive(Clone, Debug)]
pub struct MiniUNet {
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    up: Vec<Conv2d>,
    pub sites: Vec<AttentionSite>,
    head: Option<(GroupNorm, Conv2d)>,
    temb_in: usize,
}

/// Forward products of a U-Net pass.
pub struct UNetOutput {
    /// Noise prediction (absent for a head-less reference net).
    pub eps: Option<Var>,
    /// Normalized tokens entering each site's attention, in site order.
    pub site_tokens: Vec<Var>,
}

impl MiniUNet {
    /// `modes` assigns each of the seven sites its attention type;
    /// `with_head` adds the noise-prediction output layer.
    pub fn new(b: &mut Builder, cfg: &ModelConfig, modes: [SiteMode; SITE_COUNT], with_head: bool) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        let widths = [w0, w1, w2];
        let temb_in = cfg.temb_dim / 4;
        let temb1 = Linear::new(&mut b.sub("temb1"), temb_in, cfg.temb_dim, true)?;
        let temb2 = Linear::new(&mut b.sub("temb2"), cfg.temb_dim, cfg.temb_dim, true)?;
        let conv_in = Conv2d::new(&mut b.sub("conv_in"), LATENT_CHANNELS, w0, 3, 1)?;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut sites = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            enc.push(ResBlock::new(&mut b.sub(&format!("enc{i}.res")), w, Some(cfg.temb_dim))?);
            sites.push(AttentionSite::new(&mut b.sub(&format!("enc{i}.site")), SiteLevel::Encoder, w, cfg, modes[i])?);
            if i + 1 < widths.len() {
                down.push(Conv2d::new(&mut b.sub(&format!("enc{i}.down")), w, widths[i + 1], 3, 2)?);
            }
        }
        let mid = ResBlock::new(&mut b.sub("mid.res"), w2, Some(cfg.temb_dim))?;
        sites.push(AttentionSite::new(&mut b.sub("mid.site"), SiteLevel::Middle, w2, cfg, modes[3])?);
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for (k, i) in (0..widths.len()).rev().enumerate() {
            let w = widths[i];
            dec.push(ResBlock::new(&mut b.sub(&format!("dec{i}.res")), w, Some(cfg.temb_dim))?);
            sites.push(AttentionSite::new(&mut b.sub(&format!("dec{i}.site")), SiteLevel::Decoder, w, cfg, modes[4 + k])?);
            if i > 0 {
                up.push(Conv2d::new(&mut b.sub(&format!("dec{i}.up")), w, widths[i - 1], 3, 1)?);
            }
        }
        let head = if with_head {
            Some((GroupNorm::new(&mut b.sub("out.norm"), w0, 8)?, Conv2d::new(&mut b.sub("out.conv"), w0, LATENT_CHANNELS, 3, 1)?))
        } else {
            None
        };
        Ok(Self { temb1, temb2, conv_in, enc, down, mid, dec, up, sites, head, temb_in })
    }

    /// Site modes for an ablation case, in site order.
    pub fn modes_for(case: AblationCase) -> [SiteMode; SITE_COUNT] {
        let levels = Self::site_levels();
        core::array::from_fn(|i| case.site_mode(levels[i]))
    }

    pub fn site_levels() -> [SiteLevel; SITE_COUNT] {
        use SiteLevel::*;
        [Encoder, Encoder, Encoder, Middle, Decoder, Decoder, Decoder]
    }

    /// `z: [B, 4, h, w]`, one timestep per sample, `ctx: [B, L, d_ctx]`.
    /// `c_ref` is either empty or one tensor per site.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, z: Var, t: &[f32], ctx: Var, c_ref: &[Var]) -> Result<UNetOutput> {
        let (batch, h, w) = check_image(g, z, LATENT_CHANNELS, "u-net")?;
        if t.len() != batch {
            bail!(Dimension, "{} timesteps for batch of {}", t.len(), batch);
        }
        if h % 4 != 0 || w % 4 != 0 {
            bail!(Size, "latent size {}x{} not divisible by 4", h, w);
        }
        if !c_ref.is_empty() && c_ref.len() != self.sites.len() {
            bail!(Config, "got {} reference tensors for {} attention sites", c_ref.len(), self.sites.len());
        }
        let reference = |i: usize| c_ref.get(i).copied();

        let te = g.constant(timestep_embedding(t, self.temb_in));
        let te = self.temb1.forward(g, s, te)?;
        let te = g.silu(te);
        let te = self.temb2.forward(g, s, te)?;

        let mut site_tokens = Vec::with_capacity(self.sites.len());
        let mut skips = Vec::new();
        let mut x = self.conv_in.forward(g, s, z)?;
        for i in 0..self.enc.len() {
            x = self.enc[i].forward(g, s, x, Some(te))?;
            let (y, tok) = self.sites[i].forward(g, s, x, ctx, reference(i))?;
            site_tokens.push(tok);
            skips.push(y);
            x = y;
            if i < self.down.len() {
                x = self.down[i].forward(g, s, x)?;
            }
        }
        x = self.mid.forward(g, s, x, Some(te))?;
        let (y, tok) = self.sites[3].forward(g, s, x, ctx, reference(3))?;
        site_tokens.push(tok);
        x = y;
        for k in 0..self.dec.len() {
            let skip = skips.pop().expect("one skip per encoder level");
            x = g.add(x, skip)?;
            x = self.dec[k].forward(g, s, x, Some(te))?;
            let (y, tok) = self.sites[4 + k].forward(g, s, x, ctx, reference(4 + k))?;
            site_tokens.push(tok);
            x = y;
            if k < self.up.len() {
                x = g.upsample_nearest(x, 2)?;
                x = self.up[k].forward(g, s, x)?;
            }
        }
        let eps = match &self.head {
            Some((norm, conv)) => {
                let y = norm.forward(g, s, x)?;
                let y = g.silu(y);
                Some(conv.forward(g, s, y)?)
            }
            None => None,
        };
        Ok(UNetOutput { eps, site_tokens })
    }

    pub fn set_lambda(&mut self, lambda: f32) -> Result<()> {
        for site in &mut self.sites {
            if let SiteAttention::Tsfa(b) = &mut site.attn {
                b.set_lambda(lambda)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Full model

/// Every network of the pipeline plus their parameters.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vae: ToyVae,
    pub image_encoder: Option<ImageTokenEncoder>,
    pub prompt: PromptEmbedding,
    pub denoiser: MiniUNet,
    pub reference: Option<MiniUNet>,
    /// Set once pretrained or checkpointed weights are loaded.
    pub initialized: bool,
    reference_passes: AtomicU64,
}

/// Builds the model for `config` with seeded initialization and applies the
/// freeze partition.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vae = ToyVae::new(&mut Builder::new(&mut store, &mut rng, "vae", false), config.vae_widths)?;
    let prompt = PromptEmbedding::new(&mut Builder::new(&mut store, &mut rng, "prompt", false), config.prompt_len, config.d_ctx)?;
    let denoiser = MiniUNet::new(
        &mut Builder::new(&mut store, &mut rng, "denoise", false),
        config,
        MiniUNet::modes_for(config.case),
        true,
    )?;
    let (image_encoder, reference) = if config.case.uses_reference() {
        let mut stack_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a2e_5eed);
        let enc = ImageTokenEncoder::new(&mut store, &mut stack_rng, &mut rng, config.image_size, config.d_ctx)?;
        let reference = MiniUNet::new(
            &mut Builder::new(&mut store, &mut rng, "reference", true),
            config,
            [SiteMode::SelfOnly; SITE_COUNT],
            false,
        )?;
        (Some(enc), Some(reference))
    } else {
        (None, None)
    };
    let mut model = Model { config: config.clone(), store, vae, image_encoder, prompt, denoiser, reference, initialized: false, reference_passes: AtomicU64::new(0) };
    model.apply_freeze_partition();
    Ok(model)
}

/// Whether a parameter name belongs to the trainable side of the partition.
pub fn is_trainable_name(name: &str, config: &ModelConfig) -> bool {
    name.starts_with("reference.")
        || name.starts_with("image_proj.")
        || (name.starts_with("denoise.") && (name.ends_with(".tsfa.wk_prime") || name.ends_with(".tsfa.wv_prime")))
        || (config.unfreeze_denoiser && name.starts_with("denoise."))
}

impl Model {
    /// Marks exactly the reference U-Net, the token projection and the
    /// alignment reference projections as trainable.
    pub fn apply_freeze_partition(&mut self) {
        let cfg = self.config.clone();
        for (_, p) in self.store.iter_mut() {
            p.trainable = is_trainable_name(&p.name, &cfg);
        }
    }

    pub fn vae_encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.vae.encode(g, &self.store, x)
    }

    pub fn vae_decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.vae.decode(g, &self.store, z)
    }

    /// Diffusion-space latent (`vae_encode` times the stored latent scale).
    pub fn encode_latent(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.vae.encode_scaled(g, &self.store, x)
    }

    pub fn decode_latent(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.vae.decode_scaled(g, &self.store, z)
    }

    fn image_encoder(&self) -> Result<&ImageTokenEncoder> {
        match &self.image_encoder {
            Some(e) => Ok(e),
            None => bail!(State, "case '{}' has no image branch", self.config.case),
        }
    }

    /// Person image `[B, 3, 64, 64]` to projected tokens `[B, 16, d_ctx]`.
    pub fn encode_person_tokens(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.image_encoder()?.forward(g, &self.store, x)
    }

    /// Frozen feature-stack output before projection.
    pub fn person_features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.image_encoder()?.features(g, &self.store, x)
    }

    pub fn project_person_features(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        self.image_encoder()?.project(g, &self.store, feats)
    }

    /// One noiseless reference pass at `t = 0`; returns the normalized tokens
    /// entering each attention site.
    pub fn reference_forward(&self, g: &mut Graph, z_g: Var, tokens: Var) -> Result<Vec<Var>> {
        let Some(net) = &self.reference else {
            bail!(State, "case '{}' has no reference U-Net", self.config.case);
        };
        self.reference_passes.fetch_add(1, Ordering::Relaxed);
        let batch = g.shape(z_g)[0];
        let t = vec![0.0; batch];
        Ok(net.forward(g, &self.store, z_g, &t, tokens, &[])?.site_tokens)
    }

    /// Number of reference passes run so far.
    pub fn reference_passes(&self) -> u64 {
        self.reference_passes.load(Ordering::Relaxed)
    }

    pub fn prompt_context(&self, g: &mut Graph, batch: usize, null: bool) -> Result<Var> {
        self.prompt.context(g, &self.store, batch, null)
    }

    /// Noise prediction. `c_ref` is empty (unconditional branch) or one tensor
    /// per site; the baseline case ignores it.
    pub fn denoise_forward(&self, g: &mut Graph, z_t: Var, t: &[f32], ctx: Var, c_ref: &[Var]) -> Result<Var> {
        if !c_ref.is_empty() && c_ref.len() != SITE_COUNT {
            bail!(Config, "got {} reference tensors for {} attention sites", c_ref.len(), SITE_COUNT);
        }
        let c_ref = if self.config.case.uses_reference() { c_ref } else { &[] };
        let out = self.denoiser.forward(g, &self.store, z_t, t, ctx, c_ref)?;
        Ok(out.eps.expect("denoiser has an output head"))
    }

    pub fn set_lambda(&mut self, lambda: f32) -> Result<()> {
        self.denoiser.set_lambda(lambda)?;
        self.config.lambda = lambda;
        Ok(())
    }

    /// Loads the pretrained VAE and backbone. The reference U-Net starts as a
    /// copy of the backbone and the alignment reference projections as copies
    /// of their site's key/value weights.
    pub fn load_pretrained(&mut self, vae: &ParamStore, backbone: &ParamStore) -> Result<()> {
        let n_vae = self.store.load_values_from(vae, |n| n.starts_with("vae.").then(|| String::from(n)))?;
        let want_vae = self.store.iter().filter(|(_, p)| p.name.starts_with("vae.")).count();
        if n_vae != want_vae {
            bail!(Format, "VAE checkpoint provides {} of {} tensors", n_vae, want_vae);
        }
        let n_bb = self.store.load_values_from(backbone, |n| {
            if n.starts_with("denoise.") || n.starts_with("prompt.") {
                Some(String::from(n))
            } else {
                n.strip_prefix("reference.").map(|rest| format!("denoise.{rest}"))
            }
        })?;
        if n_bb == 0 {
            bail!(Format, "backbone checkpoint provides no denoiser tensors");
        }
        self.reset_reference_projections();
        self.initialized = true;
        Ok(())
    }

    /// Copies each site's `wk`/`wv` into its reference projections.
    pub fn reset_reference_projections(&mut self) {
        for site in &self.denoiser.sites {
            let w = match &site.attn {
                SiteAttention::Tsfa(b) => &b.weights,
                SiteAttention::CrossOnly(w) => w,
                SiteAttention::SelfOnly(_) => continue,
            };
            let Some(r) = &w.reference else { continue };
            if r.ref_dim != w.dim {
                continue;
            }
            let wk = self.store.value(w.wk).clone();
            let wv = self.store.value(w.wv).clone();
            self.store.get_mut(r.wk_prime).value = wk;
            self.store.get_mut(r.wv_prime).value = wv;
        }
    }
}

/// Standalone VAE (all parameters trainable) with the same names as in [`Model`].
pub fn build_vae(config: &ModelConfig, seed: u64) -> Result<(ParamStore, ToyVae)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vae = ToyVae::new(&mut Builder::new(&mut store, &mut rng, "vae", true), config.vae_widths)?;
    let scale = vae.latent_scale;
    store.get_mut(scale).trainable = false;
    Ok((store, vae))
}

/// The prompt-conditioned denoiser alone, every site plain self-attention.
/// All parameters except the fixed prompt tokens are trainable.
pub struct Backbone {
    pub store: ParamStore,
    pub prompt: PromptEmbedding,
    pub unet: MiniUNet,
}

/// Builds the backbone with the same seeded prompt tokens as [`build_model`].
pub fn build_backbone(config: &ModelConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Advance the stream exactly as build_model does so prompt tokens agree.
    let mut scratch = ParamStore::new();
    ToyVae::new(&mut Builder::new(&mut scratch, &mut rng, "vae", false), config.vae_widths)?;
    let prompt = PromptEmbedding::new(&mut Builder::new(&mut store, &mut rng, "prompt", true), config.prompt_len, config.d_ctx)?;
    store.get_mut(prompt.tokens).trainable = false;
    let unet = MiniUNet::new(
        &mut Builder::new(&mut store, &mut rng, "denoise", true),
        config,
        [SiteMode::SelfOnly; SITE_COUNT],
        true,
    )?;
    Ok(Backbone { store, prompt, unet })
}

impl Backbone {
    pub fn forward(&self, g: &mut Graph, z_t: Var, t: &[f32], null: bool) -> Result<Var> {
        let batch = g.shape(z_t)[0];
        let ctx = self.prompt.context(g, &self.store, batch, null)?;
        Ok(self.unet.forward(g, &self.store, z_t, t, ctx, &[])?.eps.expect("backbone has an output head"))
    }
}
