//! Two-stage training: configuration, learning-rate schedule, seeded data
//! order and the gradient-accumulated micro-step, plus the loss steps of the
//! VAE and backbone pretraining phases.
//!
//! Step counters count micro-batches. An optimizer update happens after every
//! `grad_accum` micro-batches, so `optimizer_steps = total_steps / grad_accum`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{add_noise_batch, make_schedule, predict_x0, NoiseSchedule};
use crate::error::{bail, Result};
use crate::kv::KvMap;
use crate::losses::{ldm_loss, perceptual_loss, total_loss, total_loss_value, FeatureNet};
use crate::networks::{build_model, AblationCase, Backbone, Model, ModelConfig, ToyVae};
use crate::optim::{AdamW, AdamWConfig};
use crate::param::ParamStore;
use crate::synthdata::splitmix64;
use crate::tensor::Tensor;

pub const FREEZE_CHECK_EVERY: u64 = 500;
pub const CHECKPOINT_EVERY: u64 = 500;
pub const DIFFUSION_STEPS: usize = 1000;

const DATA_STREAM: u64 = 0xda7a;
const NOISE_STREAM: u64 = 0x0401_5e;
const DROP_STREAM: u64 = 0xd20b;

/// Seed of draw number `counter` of one named stream derived from the master seed.
pub fn stream_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ counter)
}

/// Whether micro-step `s` trains the unconditional branch: null prompt and
/// no reference features for the whole micro-batch.
pub fn cfg_drop(seed: u64, s: u64, prob: f32) -> bool {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, DROP_STREAM, s)).random::<f32>() < prob
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub warmup_steps: u64,
    pub lr_stage1_peak: f32,
    pub lr_stage2: f32,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub lambda_lpips: f32,
    /// Cross-branch weight of the alignment blocks during training.
    pub lambda_tsfa: f32,
    pub cfg_drop_prob: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 3000,
            stage2_steps: 300,
            warmup_steps: 500,
            lr_stage1_peak: 1e-5,
            lr_stage2: 3e-6,
            micro_batch: 4,
            grad_accum: 4,
            lambda_lpips: 0.05,
            lambda_tsfa: 1.0,
            cfg_drop_prob: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Noise-prediction loss only.
    One,
    /// Noise-prediction plus weighted perceptual loss.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "stage1_steps",
        "stage2_steps",
        "warmup_steps",
        "lr_stage1_peak",
        "lr_stage2",
        "micro_batch",
        "grad_accum",
        "lambda_lpips",
        "lambda_tsfa",
        "cfg_drop_prob",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0 {
            bail!(Config, "stage1_steps must be positive");
        }
        if self.micro_batch == 0 || self.grad_accum == 0 {
            bail!(Config, "micro_batch and grad_accum must be positive");
        }
        let acc = self.grad_accum as u64;
        if self.stage1_steps % acc != 0 || self.stage2_steps % acc != 0 {
            bail!(
                Config,
                "stage lengths {} / {} must be multiples of grad_accum {} so no update straddles a stage boundary",
                self.stage1_steps,
                self.stage2_steps,
                self.grad_accum
            );
        }
        for (name, v) in [("lr_stage1_peak", self.lr_stage1_peak), ("lr_stage2", self.lr_stage2), ("lambda_lpips", self.lambda_lpips)] {
            if !v.is_finite() || v < 0.0 {
                bail!(Config, "{} must be finite and non-negative, got {}", name, v);
            }
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            bail!(Config, "cfg_drop_prob {} outside [0, 1]", self.cfg_drop_prob);
        }
        crate::attention::check_lambda(self.lambda_tsfa)
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.total_steps() / self.grad_accum as u64
    }

    /// Stage of 0-based micro-step `s` and the 1-based position inside it;
    /// `None` once training is complete.
    pub fn stage_at(&self, s: u64) -> Option<(Stage, u64)> {
        if s < self.stage1_steps {
            Some((Stage::One, s + 1))
        } else if s < self.total_steps() {
            Some((Stage::Two, s + 1 - self.stage1_steps))
        } else {
            None
        }
    }

    /// Linear warm-up to the peak then constant in stage one; constant in stage two.
    pub fn learning_rate(&self, stage: Stage, k: u64) -> f32 {
        match stage {
            Stage::One if self.warmup_steps == 0 || k >= self.warmup_steps => self.lr_stage1_peak,
            Stage::One => self.lr_stage1_peak * k as f32 / self.warmup_steps as f32,
            Stage::Two => self.lr_stage2,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("stage1_steps", self.stage1_steps);
        m.set("stage2_steps", self.stage2_steps);
        m.set("warmup_steps", self.warmup_steps);
        m.set("lr_stage1_peak", self.lr_stage1_peak);
        m.set("lr_stage2", self.lr_stage2);
        m.set("micro_batch", self.micro_batch);
        m.set("grad_accum", self.grad_accum);
        m.set("lambda_lpips", self.lambda_lpips);
        m.set("lambda_tsfa", self.lambda_tsfa);
        m.set("cfg_drop_prob", self.cfg_drop_prob);
        m.set("seed", self.seed);
        m
    }

    /// Defaults overridden by whichever [`TrainConfig::KEYS`] are present.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            stage1_steps: m.get("stage1_steps")?.unwrap_or(d.stage1_steps),
            stage2_steps: m.get("stage2_steps")?.unwrap_or(d.stage2_steps),
            warmup_steps: m.get("warmup_steps")?.unwrap_or(d.warmup_steps),
            lr_stage1_peak: m.get("lr_stage1_peak")?.unwrap_or(d.lr_stage1_peak),
            lr_stage2: m.get("lr_stage2")?.unwrap_or(d.lr_stage2),
            micro_batch: m.get("micro_batch")?.unwrap_or(d.micro_batch),
            grad_accum: m.get("grad_accum")?.unwrap_or(d.grad_accum),
            lambda_lpips: m.get("lambda_lpips")?.unwrap_or(d.lambda_lpips),
            lambda_tsfa: m.get("lambda_tsfa")?.unwrap_or(d.lambda_tsfa),
            cfg_drop_prob: m.get("cfg_drop_prob")?.unwrap_or(d.cfg_drop_prob),
            seed: m.get("seed")?.unwrap_or(d.seed),
        };
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Data order

/// Sample order: a fresh seeded permutation of the training examples every epoch.
#[derive(Clone, Debug)]
pub struct DataOrder {
    n: usize,
    micro_batch: usize,
    seed: u64,
}

impl DataOrder {
    pub fn new(n: usize, micro_batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            bail!(Size, "no training examples");
        }
        Ok(Self { n, micro_batch, seed })
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, DATA_STREAM, epoch));
        let mut p: Vec<usize> = (0..self.n).collect();
        for i in (1..self.n).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        p
    }

    /// Example indices of 0-based micro-step `s`.
    pub fn batch(&self, s: u64) -> Vec<usize> {
        let start = s * self.micro_batch as u64;
        let mut out = Vec::with_capacity(self.micro_batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + self.micro_batch as u64 {
            let epoch = pos / self.n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch)));
            }
            out.push(cached.as_ref().expect("just filled").1[(pos % self.n as u64) as usize]);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pre-encoded examples

/// One training pair after the frozen encoders.
#[derive(Clone, Debug)]
pub struct Example {
    /// Scaled latent of the flat-lay image, `[4, h, w]`.
    pub z_flat: Tensor,
    /// Scaled latent of the worn image.
    pub z_person: Tensor,
    /// Frozen image-feature stack output for the worn image; `None` without an image branch.
    pub person_feats: Option<Tensor>,
    /// Flat-lay target in `[-1, 1]`, `[3, H, W]`.
    pub flat: Tensor,
}

/// Everything the frozen parts of the model contribute, computed once.
#[derive(Clone, Debug, Default)]
pub struct EncodedSet {
    pub examples: Vec<Example>,
}

/// A stacked micro-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub z_flat: Tensor,
    pub z_person: Tensor,
    pub person_feats: Option<Tensor>,
    pub flat: Tensor,
}

impl EncodedSet {
    /// Runs the frozen VAE encoder and image-feature stack over `(flat, worn)`
    /// pairs, each `[3, H, W]` in `[-1, 1]`.
    pub fn encode(model: &Model, flat: &[Tensor], worn: &[Tensor]) -> Result<Self> {
        if flat.len() != worn.len() {
            bail!(Dimension, "{} flat images but {} worn images", flat.len(), worn.len());
        }
        const CHUNK: usize = 16;
        let mut examples = Vec::with_capacity(flat.len());
        for start in (0..flat.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(flat.len());
            let mut g = Graph::inference();
            let xf = g.constant(Tensor::stack(&flat[start..end])?);
            let xw = g.constant(Tensor::stack(&worn[start..end])?);
            let zf = model.encode_latent(&mut g, xf)?;
            let zp = model.encode_latent(&mut g, xw)?;
            let feats = if model.config.case.uses_reference() { Some(model.person_features(&mut g, xw)?) } else { None };
            for i in 0..end - start {
                examples.push(Example {
                    z_flat: g.value(zf).index_first(i),
                    z_person: g.value(zp).index_first(i),
                    person_feats: feats.map(|f| g.value(f).index_first(i)),
                    flat: flat[start + i].clone(),
                });
            }
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let pick = |f: fn(&Example) -> &Tensor| -> Result<Tensor> {
            let items: Vec<Tensor> = idx.iter().map(|&i| f(&self.examples[i]).clone()).collect();
            Tensor::stack(&items)
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.examples.len()) {
            bail!(Range, "example index {} outside [0, {})", bad, self.examples.len());
        }
        let person_feats = if self.examples.first().is_some_and(|e| e.person_feats.is_some()) {
            let items = idx
                .iter()
                .map(|&i| self.examples[i].person_feats.clone())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| crate::Error::State(String::from("person features missing for some examples")))?;
            Some(Tensor::stack(&items)?)
        } else {
            None
        };
        Ok(Batch { z_flat: pick(|e| &e.z_flat)?, z_person: pick(|e| &e.z_person)?, person_feats, flat: pick(|e| &e.flat)? })
    }
}

// ---------------------------------------------------------------------------
// Trainer

/// One logged micro-step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based micro-step count after this step.
    pub step: u64,
    pub stage: Stage,
    pub lr: f32,
    pub l_ldm: f32,
    pub l_lpips: Option<f32>,
    pub l_total: f32,
    /// Whether an optimizer update closed this step.
    pub update: bool,
}

impl StepRecord {
    /// `step=.. stage=.. lr=.. l_ldm=.. [l_lpips=..] l_total=..`; floats use
    /// round-trip formatting.
    pub fn log_line(&self) -> String {
        let mut s = format!("step={} stage={} lr={:e} l_ldm={}", self.step, self.stage, self.lr, self.l_ldm);
        if let Some(lp) = self.l_lpips {
            s.push_str(&format!(" l_lpips={lp}"));
        }
        s.push_str(&format!(" l_total={}", self.l_total));
        s
    }

    pub fn parse_log_line(line: &str) -> Result<Self> {
        let mut m = KvMap::new();
        for tok in line.split_whitespace() {
            let Some((k, v)) = tok.split_once('=') else {
                bail!(Format, "log token {:?} is not key=value", tok);
            };
            m.set(k, v);
        }
        let stage = match m.require::<u8>("stage")? {
            1 => Stage::One,
            2 => Stage::Two,
            s => bail!(Format, "unknown stage {}", s),
        };
        let step: u64 = m.require("step")?;
        Ok(Self {
            step,
            stage,
            lr: m.require("lr")?,
            l_ldm: m.require("l_ldm")?,
            l_lpips: m.get("l_lpips")?,
            l_total: m.require("l_total")?,
            update: false,
        })
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub opt: AdamW,
    step: u64,
    sched: NoiseSchedule,
    features: FeatureNet,
    order: DataOrder,
    frozen: BTreeMap<String, u64>,
}

impl Trainer {
    /// Starts from the current weights of `model`, which also fix the frozen
    /// checksums checked during training.
    pub fn new(mut model: Model, config: TrainConfig, n_examples: usize) -> Result<Self> {
        config.validate()?;
        model.set_lambda(config.lambda_tsfa)?;
        let frozen = frozen_checksums(&model.store);
        let order = DataOrder::new(n_examples, config.micro_batch, config.seed)?;
        Ok(Self {
            model,
            opt: AdamW::new(AdamWConfig::default()),
            step: 0,
            sched: make_schedule(DIFFUSION_STEPS)?,
            features: FeatureNet::new(),
            order,
            frozen,
            config,
        })
    }

    /// Micro-steps completed.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    pub fn stage(&self) -> Option<Stage> {
        self.config.stage_at(self.step).map(|(s, _)| s)
    }

    pub fn data_order(&self) -> &DataOrder {
        &self.order
    }

    /// Runs the next micro-step and, at accumulation boundaries, the update.
    /// Every [`FREEZE_CHECK_EVERY`] steps the frozen checksums are verified.
    pub fn train_step(&mut self, data: &EncodedSet) -> Result<StepRecord> {
        let s = self.step;
        let Some((stage, k)) = self.config.stage_at(s) else {
            bail!(State, "training already finished after {} steps", s);
        };
        let batch = data.batch(&self.order.batch(s))?;
        let (l_ldm, l_lpips) = self.accumulate(&batch, stage, s)?;
        let lr = self.config.learning_rate(stage, k);
        self.step += 1;
        let update = self.step % self.config.grad_accum as u64 == 0;
        if update {
            self.opt.step(&mut self.model.store, lr);
        }
        if self.step % FREEZE_CHECK_EVERY == 0 {
            self.check_freeze()?;
        }
        let l_total = match l_lpips {
            Some(lp) => total_loss_value(l_ldm, lp, self.config.lambda_lpips)?,
            None => total_loss_value(l_ldm, 0.0, 0.0)?,
        };
        Ok(StepRecord { step: self.step, stage, lr, l_ldm, l_lpips, l_total, update })
    }

    /// Forward and backward of one micro-batch; gradients are added to the
    /// store scaled by `1 / grad_accum`. Returns the unscaled loss terms.
    fn accumulate(&mut self, batch: &Batch, stage: Stage, s: u64) -> Result<(f32, Option<f32>)> {
        let model = &self.model;
        let b = batch.z_flat.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, NOISE_STREAM, s));
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.sched.len())).collect();
        let eps = Tensor::randn(batch.z_flat.shape(), 1.0, &mut rng);
        let drop = cfg_drop(self.config.seed, s, self.config.cfg_drop_prob);
        let z_t = add_noise_batch(&batch.z_flat, &eps, &t, &self.sched)?;

        let mut g = Graph::new();
        let zt = g.constant(z_t);
        let ctx = model.prompt_context(&mut g, b, drop)?;
        let c_ref = match (&batch.person_feats, drop) {
            (Some(feats), false) => {
                let f = g.constant(feats.clone());
                let tokens = model.project_person_features(&mut g, f)?;
                let zg = g.constant(batch.z_person.clone());
                model.reference_forward(&mut g, zg, tokens)?
            }
            _ => Vec::new(),
        };
        let tf: Vec<f32> = t.iter().map(|&x| x as f32).collect();
        let eps_pred = model.denoise_forward(&mut g, zt, &tf, ctx, &c_ref)?;
        let eps_v = g.constant(eps);
        let l_ldm = ldm_loss(&mut g, eps_pred, eps_v)?;
        let (loss, l_lpips) = match stage {
            Stage::One => (l_ldm, None),
            Stage::Two => {
                let z0 = predict_x0(&mut g, zt, eps_pred, &t, &self.sched)?;
                let x_hat = model.decode_latent(&mut g, z0)?;
                let x = g.constant(batch.flat.clone());
                let lp = perceptual_loss(&mut g, x, x_hat, &self.features)?;
                (total_loss(&mut g, l_ldm, lp, self.config.lambda_lpips)?, Some(lp))
            }
        };
        let scaled = g.scale(loss, 1.0 / self.config.grad_accum as f32);
        g.backward_into(scaled, &mut self.model.store)?;
        let ldm_v = g.value(l_ldm).item();
        Ok((ldm_v, l_lpips.map(|v| g.value(v).item())))
    }

    /// Contract error naming the first frozen parameter whose value changed.
    pub fn check_freeze(&self) -> Result<()> {
        let now = self.model.store.checksums();
        for (name, sum) in &self.frozen {
            if now.get(name) != Some(sum) {
                bail!(Contract, "frozen parameter `{}` changed during training", name);
            }
        }
        Ok(())
    }

    /// Parameters, optimizer moments and counters. Only valid at update
    /// boundaries, where no partial gradient is pending.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        if self.step % self.config.grad_accum as u64 != 0 {
            bail!(State, "checkpoint requested mid-accumulation at step {}", self.step);
        }
        let mut ck = Checkpoint::from_store(&self.model.store);
        ck.add_optimizer(&self.model.store, &self.opt);
        ck.meta.set("kind", "model");
        ck.meta.set("step", self.step);
        for k in self.model.config.to_kv().keys() {
            ck.meta.set(&format!("model.{k}"), self.model.config.to_kv().get_str(k).unwrap_or_default());
        }
        let tk = self.config.to_kv();
        for k in tk.keys() {
            ck.meta.set(&format!("train.{k}"), tk.get_str(k).unwrap_or_default());
        }
        Ok(ck)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`] with the
    /// same configuration.
    pub fn resume(config: TrainConfig, n_examples: usize, ck: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let saved = TrainConfig::from_kv(&prefixed(&ck.meta, "train."))?;
        if saved != config {
            bail!(Config, "checkpoint was written with a different training configuration");
        }
        let mut t = Self::new(model, config, n_examples)?;
        ck.restore_optimizer(&t.model.store, &mut t.opt)?;
        t.step = ck.meta.require("step")?;
        Ok(t)
    }
}

fn frozen_checksums(store: &ParamStore) -> BTreeMap<String, u64> {
    let all = store.checksums();
    store.iter().filter(|(_, p)| !p.trainable).map(|(_, p)| (p.name.clone(), all[&p.name])).collect()
}

/// Metadata keys under `prefix`, with the prefix removed.
pub fn prefixed(meta: &KvMap, prefix: &str) -> KvMap {
    let mut m = KvMap::new();
    for k in meta.keys() {
        if let Some(rest) = k.strip_prefix(prefix) {
            m.set(rest, meta.get_str(k).unwrap_or_default());
        }
    }
    m
}

/// Rebuilds the model described by a training checkpoint and loads its weights.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    if ck.meta.get_str("kind") != Some("model") {
        bail!(Format, "checkpoint does not hold a try-off model");
    }
    let cfg = ModelConfig::from_kv(&prefixed(&ck.meta, "model."))?;
    let mut model = build_model(&cfg, 0)?;
    ck.load_into(&mut model.store)?;
    model.initialized = true;
    Ok(model)
}

/// Number of trainable scalars.
pub fn trainable_scalars(store: &ParamStore) -> usize {
    store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
}

/// Whether training this case can change anything at all.
pub fn has_trainable(case: AblationCase, unfreeze_denoiser: bool) -> bool {
    case.uses_reference() || unfreeze_denoiser
}

// ---------------------------------------------------------------------------
// Pretraining losses

/// Standard deviation of the fixed-variance VAE posterior.
pub const VAE_POSTERIOR_STD: f32 = 0.1;
pub const VAE_KL_WEIGHT: f32 = 1e-6;

/// Reconstruction MSE plus a small KL term for a batch `[B, 3, H, W]`, with
/// the latent sampled from a fixed-variance posterior. Returns `(loss, mse)`.
pub fn vae_loss<R: Rng + ?Sized>(g: &mut Graph, store: &ParamStore, vae: &ToyVae, x: Var, rng: &mut R) -> Result<(Var, Var)> {
    let mu = vae.encode(g, store, x)?;
    let noise = g.constant(Tensor::randn(g.shape(mu), VAE_POSTERIOR_STD, rng));
    let z = g.add(mu, noise)?;
    let recon = vae.decode(g, store, z)?;
    let mse = g.mse(recon, x)?;
    // KL to N(0, 1) up to a constant: the variance is fixed, so only mu**2 remains.
    let mu2 = g.mul(mu, mu)?;
    let kl = g.mean(mu2);
    let kl = g.scale(kl, 0.5 * VAE_KL_WEIGHT);
    Ok((g.add(mse, kl)?, mse))
}

/// Latent multiplier giving the encoder means unit standard deviation.
pub fn latent_scale(latents: &[Tensor]) -> Result<f32> {
    let n: usize = latents.iter().map(|t| t.numel()).sum();
    if n < 2 {
        bail!(Size, "need at least two latent values to estimate a scale");
    }
    let mean = latents.iter().map(|t| t.data().iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / n as f64;
    let var = latents.iter().map(|t| t.data().iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>()).sum::<f64>()
        / (n - 1) as f64;
    if var <= 0.0 || !var.is_finite() {
        bail!(Numerical, "latent variance {} is degenerate", var);
    }
    Ok((1.0 / libm::sqrt(var)) as f32)
}

/// Noise-prediction loss of the prompt-only backbone on clean latents
/// `[B, 4, h, w]`; `null` selects the unconditional prompt.
pub fn backbone_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    backbone: &Backbone,
    z0: &Tensor,
    sched: &NoiseSchedule,
    null: bool,
    rng: &mut R,
) -> Result<Var> {
    let b = z0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.len())).collect();
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    let z_t = add_noise_batch(z0, &eps, &t, sched)?;
    let zt = g.constant(z_t);
    let tf: Vec<f32> = t.iter().map(|&x| x as f32).collect();
    let pred = backbone.forward(g, zt, &tf, null)?;
    let e = g.constant(eps);
    ldm_loss(g, pred, e)
}
