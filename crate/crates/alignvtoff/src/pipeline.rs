//! Pretraining, two-stage training, sampling, evaluation and ablation sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use alignvtoff_core::checkpoint::Checkpoint;
use alignvtoff_core::diffusion::{make_schedule, sample, SamplerConfig};
use alignvtoff_core::kv::KvMap;
use alignvtoff_core::losses::FeatureNet;
use alignvtoff_core::metrics::{evaluate_images, psnr, MetricsReport};
use alignvtoff_core::networks::{build_backbone, build_model, build_vae, AblationCase, Model, ModelConfig, ToyVae};
use alignvtoff_core::optim::{AdamW, AdamWConfig};
use alignvtoff_core::training::{
    backbone_loss, latent_scale, model_from_checkpoint, stream_seed, trainable_scalars, vae_loss, EncodedSet, Trainer,
    TrainConfig, CHECKPOINT_EVERY, DIFFUSION_STEPS,
};
use alignvtoff_core::{Error as CoreError, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{image_name, Dataset, Pair, Split};
use crate::error::{core, PipelineError, Result};
use crate::io::{ensure_dir, read_checkpoint, read_png, write_atomic, write_checkpoint, write_kv, write_png};

/// Validation PSNR the pretrained VAE must exceed.
pub const PSNR_GATE: f64 = 25.0;
pub const TRAIN_LOG: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.avtc";
const KEEP_CHECKPOINTS: usize = 2;
const GEN_BATCH: usize = 25;
const GEN_STREAM: u64 = 0x6e4e;
const ENCODE_CHUNK: usize = 32;

/// Settings of the two pretraining loops.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl PretrainOptions {
    pub fn vae() -> Self {
        Self { steps: 2000, batch: 8, lr: 2e-3, seed: 0 }
    }

    pub fn backbone() -> Self {
        Self { steps: 3000, batch: 16, lr: 1e-3, seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(core(CoreError::Config, format!("invalid pretraining options {self:?}")));
        }
        Ok(())
    }

    /// Short linear warm-up, then cosine decay to a tenth of the peak.
    fn lr_at(&self, k: usize) -> f32 {
        let warm = (self.steps / 20).max(1);
        if k < warm {
            return self.lr * (k + 1) as f32 / warm as f32;
        }
        let p = (k - warm) as f32 / (self.steps - warm).max(1) as f32;
        self.lr * (0.1 + 0.45 * (1.0 + (std::f32::consts::PI * p).cos()))
    }
}

fn open_log(path: &Path, append: bool) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))
}

fn log_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| PipelineError::io(path, e))
}

fn model_meta(ck: &mut Checkpoint, kind: &str, cfg: &ModelConfig) {
    ck.meta.set("kind", kind);
    let kv = cfg.to_kv();
    for k in kv.keys() {
        ck.meta.set(&format!("model.{k}"), kv.get_str(k).unwrap_or_default());
    }
}

fn expect_kind(ck: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    match ck.meta.get_str("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(core(CoreError::Format, format!("{} is a {:?} checkpoint, expected {kind}", path.display(), other.unwrap_or("unlabelled")))),
    }
}

// ---------------------------------------------------------------------------
// VAE

#[derive(Clone, Debug, PartialEq)]
pub struct VaeReport {
    /// Mean per-image PSNR of encode/decode on the held-out split, dB.
    pub psnr: f64,
    pub latent_scale: f32,
    pub steps: usize,
    pub final_mse: f32,
}

fn images_of(pairs: &[Pair]) -> Vec<Tensor> {
    pairs.iter().flat_map(|p| [p.flat.clone(), p.worn.clone()]).collect()
}

/// Posterior means of `images`, in chunks.
fn vae_means(store: &ParamStore, vae: &ToyVae, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_CHUNK) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::stack(chunk)?);
        let z = vae.encode(&mut g, store, x)?;
        out.extend((0..chunk.len()).map(|i| g.value(z).index_first(i)));
    }
    Ok(out)
}

/// Mean PSNR of `decode(encode(x))` over `images`.
pub fn reconstruction_psnr(store: &ParamStore, vae: &ToyVae, images: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(ENCODE_CHUNK) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::stack(chunk)?);
        let z = vae.encode(&mut g, store, x)?;
        let y = vae.decode(&mut g, store, z)?;
        for (i, img) in chunk.iter().enumerate() {
            total += psnr(img, &g.value(y).index_first(i))?;
        }
    }
    Ok(total / images.len() as f64)
}

/// Trains the VAE on both images of every training pair, fixes the latent
/// scale, measures held-out PSNR and writes a frozen checkpoint. The
/// checkpoint is written even when the gate fails.
pub fn pretrain_vae(data: &Dataset, cfg: &ModelConfig, opts: &PretrainOptions, out: &Path) -> Result<VaeReport> {
    opts.validate()?;
    let train = images_of(&data.load(Split::Train)?);
    let val = images_of(&data.load(Split::Test)?);
    let (mut store, vae) = build_vae(cfg, opts.seed)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, 0x7ae, 0));
    let log_path = out.with_extension("log");
    let mut log = open_log(&log_path, false)?;
    let mut final_mse = f32::NAN;
    let started = Instant::now();
    for k in 0..opts.steps {
        let batch: Vec<Tensor> = (0..opts.batch).map(|_| train[rng.random_range(0..train.len())].clone()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(&batch)?);
        let (loss, mse) = vae_loss(&mut g, &store, &vae, x, &mut rng)?;
        g.backward_into(loss, &mut store)?;
        let lr = opts.lr_at(k);
        opt.step(&mut store, lr);
        final_mse = g.value(mse).item();
        if !final_mse.is_finite() {
            return Err(core(CoreError::Numerical, format!("VAE loss diverged at step {}", k + 1)));
        }
        log_line(&mut log, &log_path, &format!("step={} lr={lr:e} loss={} mse={final_mse}", k + 1, g.value(loss).item()))?;
        if (k + 1) % 200 == 0 {
            log::info!("vae step {}/{} mse {final_mse:.5} ({:.0}s)", k + 1, opts.steps, started.elapsed().as_secs_f64());
        }
    }
    let scale = latent_scale(&vae_means(&store, &vae, &train)?)?;
    store.get_mut(vae.latent_scale).value = Tensor::new(&[1], vec![scale])?;
    let report = VaeReport { psnr: reconstruction_psnr(&store, &vae, &val)?, latent_scale: scale, steps: opts.steps, final_mse };
    for (_, p) in store.iter_mut() {
        p.trainable = false;
    }
    let mut ck = Checkpoint::from_store(&store);
    model_meta(&mut ck, "vae", cfg);
    ck.meta.set("psnr", format!("{:.4}", report.psnr));
    ck.meta.set("latent_scale", scale);
    ck.meta.set("steps", opts.steps);
    write_checkpoint(out, &ck)?;
    log::info!("vae validation PSNR {:.2} dB, latent scale {scale:.4}", report.psnr);
    if report.psnr <= PSNR_GATE {
        return Err(PipelineError::Gate { psnr: report.psnr, gate: PSNR_GATE, steps: opts.steps });
    }
    Ok(report)
}

/// The VAE of a checkpoint written by [`pretrain_vae`].
pub fn load_vae(path: &Path) -> Result<(ModelConfig, ParamStore, ToyVae)> {
    let ck = read_checkpoint(path)?;
    expect_kind(&ck, "vae", path)?;
    let cfg = ModelConfig::from_kv(&alignvtoff_core::training::prefixed(&ck.meta, "model."))?;
    let (mut store, vae) = build_vae(&cfg, 0)?;
    ck.load_into(&mut store)?;
    Ok((cfg, store, vae))
}

// ---------------------------------------------------------------------------
// Backbone

/// Trains the prompt-only denoiser on flat-lay latents, dropping to the null
/// prompt with probability `cfg_drop`, and writes its checkpoint. Returns
/// the mean loss over the last tenth of the steps.
pub fn pretrain_backbone(data: &Dataset, vae_path: &Path, cfg: &ModelConfig, opts: &PretrainOptions, cfg_drop: f32, out: &Path) -> Result<f32> {
    opts.validate()?;
    let (vcfg, vstore, vae) = load_vae(vae_path)?;
    if vcfg.vae_widths != cfg.vae_widths {
        return Err(core(CoreError::Config, "VAE checkpoint widths differ from the model configuration"));
    }
    let flats: Vec<Tensor> = data.load(Split::Train)?.into_iter().map(|p| p.flat).collect();
    let k = vstore.value(vae.latent_scale).data()[0];
    let latents: Vec<Tensor> = vae_means(&vstore, &vae, &flats)?.into_iter().map(|z| z.scale(k)).collect();
    let mut bb = build_backbone(cfg, opts.seed)?;
    let sched = make_schedule(DIFFUSION_STEPS)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opts.seed, 0xbb, 0));
    let log_path = out.with_extension("log");
    let mut log = open_log(&log_path, false)?;
    let tail = (opts.steps / 10).max(1);
    let mut tail_sum = 0.0;
    let started = Instant::now();
    for step in 0..opts.steps {
        let batch: Vec<Tensor> = (0..opts.batch).map(|_| latents[rng.random_range(0..latents.len())].clone()).collect();
        let z0 = Tensor::stack(&batch)?;
        let null = rng.random::<f32>() < cfg_drop;
        let mut g = Graph::new();
        let loss = backbone_loss(&mut g, &bb, &z0, &sched, null, &mut rng)?;
        g.backward_into(loss, &mut bb.store)?;
        let lr = opts.lr_at(step);
        opt.step(&mut bb.store, lr);
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(core(CoreError::Numerical, format!("backbone loss diverged at step {}", step + 1)));
        }
        if step >= opts.steps - tail {
            tail_sum += l;
        }
        log_line(&mut log, &log_path, &format!("step={} lr={lr:e} null={} loss={l}", step + 1, null as u8))?;
        if (step + 1) % 250 == 0 {
            log::info!("backbone step {}/{} loss {l:.4} ({:.0}s)", step + 1, opts.steps, started.elapsed().as_secs_f64());
        }
    }
    let mut ck = Checkpoint::from_store(&bb.store);
    model_meta(&mut ck, "backbone", cfg);
    ck.meta.set("steps", opts.steps);
    write_checkpoint(out, &ck)?;
    Ok(tail_sum / tail as f32)
}

/// Builds the model for `cfg` on top of the pretrained VAE and backbone.
pub fn pretrained_model(cfg: &ModelConfig, vae_path: &Path, backbone_path: &Path, seed: u64) -> Result<Model> {
    let vae = read_checkpoint(vae_path)?;
    expect_kind(&vae, "vae", vae_path)?;
    let bb = read_checkpoint(backbone_path)?;
    expect_kind(&bb, "backbone", backbone_path)?;
    let mut model = build_model(cfg, seed)?;
    model.load_pretrained(&vae.to_store()?, &bb.to_store()?)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Two-stage training

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Micro-steps run, including those before a resume.
    pub steps: u64,
    pub trainable_scalars: usize,
    pub seconds: f64,
    /// False when the case has nothing to train.
    pub trained: bool,
}

/// Rolling checkpoints of `dir` as `(step, path)`, oldest first.
pub fn checkpoint_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(PipelineError::io(dir, e)),
    };
    for e in rd {
        let e = e.map_err(|e| PipelineError::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".avtc")).and_then(|s| s.parse().ok()) {
            out.push((step, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn save_rolling(trainer: &Trainer, dir: &Path) -> Result<()> {
    let path = dir.join(format!("ckpt-{:06}.avtc", trainer.step()));
    write_checkpoint(&path, &trainer.checkpoint()?)?;
    prune_checkpoints(dir, KEEP_CHECKPOINTS)
}

/// Deletes all but the `keep` newest `ckpt-<step>.avtc` files of `dir`.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let files = checkpoint_files(dir)?;
    for (_, old) in files.iter().take(files.len().saturating_sub(keep)) {
        fs::remove_file(old).map_err(|e| PipelineError::io(old, e))?;
    }
    Ok(())
}

/// Keeps the log lines of steps `<= step`, dropping those a resume will redo.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(PipelineError::io(path, e)),
    };
    let keep: String = text
        .lines()
        .filter(|l| {
            l.strip_prefix("step=").and_then(|r| r.split_whitespace().next()).and_then(|s| s.parse::<u64>().ok()).is_none_or(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(path, keep.as_bytes())
}

/// Runs both stages for one case, resuming from the newest rolling
/// checkpoint in `out` when there is one. Writes `train.log`, rolling
/// `ckpt-*.avtc` files (stage boundary and every few hundred steps, newest
/// two kept) and `final.avtc`.
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, data: &Dataset, vae: &Path, backbone: &Path, out: &Path) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let model_cfg = &ModelConfig { lambda: train_cfg.lambda_tsfa, ..model_cfg.clone() };
    ensure_dir(out)?;
    let mut merged = train_cfg.to_kv();
    let mk = model_cfg.to_kv();
    for k in mk.keys() {
        merged.set(k, mk.get_str(k).unwrap_or_default());
    }
    write_kv(&out.join("config.txt"), &merged)?;

    let pairs = data.load(Split::Train)?;
    let log_path = out.join(TRAIN_LOG);
    let started = Instant::now();
    let mut trainer = match checkpoint_files(out)?.pop() {
        Some((step, path)) => {
            log::info!("resuming {} from step {step}", out.display());
            let t = Trainer::resume(train_cfg.clone(), pairs.len(), &read_checkpoint(&path)?)?;
            if &t.model.config != model_cfg {
                return Err(core(CoreError::Config, format!("{} holds a run with a different model configuration", out.display())));
            }
            truncate_log(&log_path, step)?;
            t
        }
        None => {
            let mut model = pretrained_model(model_cfg, vae, backbone, train_cfg.seed)?;
            model.set_lambda(train_cfg.lambda_tsfa)?;
            let _ = fs::remove_file(&log_path);
            Trainer::new(model, train_cfg.clone(), pairs.len())?
        }
    };
    let scalars = trainable_scalars(&trainer.model.store);
    let mut log = open_log(&log_path, true)?;
    let final_path = out.join(FINAL_CHECKPOINT);

    if trainer.model.store.trainable_count() == 0 {
        log_line(&mut log, &log_path, "# no trainable parameters in this configuration; training skipped")?;
        let mut ck = Checkpoint::from_store(&trainer.model.store);
        model_meta(&mut ck, "model", &trainer.model.config);
        ck.meta.set("step", 0);
        write_checkpoint(&final_path, &ck)?;
        return Ok(TrainOutcome { final_checkpoint: final_path, steps: 0, trainable_scalars: 0, seconds: started.elapsed().as_secs_f64(), trained: false });
    }

    let flat: Vec<Tensor> = pairs.iter().map(|p| p.flat.clone()).collect();
    let worn: Vec<Tensor> = pairs.iter().map(|p| p.worn.clone()).collect();
    let set = EncodedSet::encode(&trainer.model, &flat, &worn)?;
    drop(pairs);
    let total = train_cfg.total_steps();
    while !trainer.is_done() {
        let rec = trainer.train_step(&set)?;
        log_line(&mut log, &log_path, &rec.log_line())?;
        if rec.step % CHECKPOINT_EVERY == 0 || rec.step == train_cfg.stage1_steps || rec.step == total {
            save_rolling(&trainer, out)?;
        }
        if rec.step % 100 == 0 {
            log::info!("{} step {}/{total} stage {} l_total {:.4} ({:.0}s)", model_cfg.case, rec.step, rec.stage, rec.l_total, started.elapsed().as_secs_f64());
        }
    }
    trainer.check_freeze()?;
    write_checkpoint(&final_path, &trainer.checkpoint()?.without_optimizer())?;
    Ok(TrainOutcome { final_checkpoint: final_path, steps: trainer.step(), trainable_scalars: scalars, seconds: started.elapsed().as_secs_f64(), trained: true })
}

// ---------------------------------------------------------------------------
// Sampling and evaluation

pub fn load_model(path: &Path) -> Result<Model> {
    let ck = read_checkpoint(path)?;
    Ok(model_from_checkpoint(&ck)?)
}

/// Flat-lay images for `worn` images, in fixed-size seeded batches so the
/// output for a given position does not depend on the list length.
pub fn generate(model: &Model, worn: &[Tensor], sampler: &SamplerConfig) -> Result<Vec<Tensor>> {
    let sched = make_schedule(DIFFUSION_STEPS)?;
    let mut out = Vec::with_capacity(worn.len());
    for (k, chunk) in worn.chunks(GEN_BATCH).enumerate() {
        let cfg = SamplerConfig { seed: stream_seed(sampler.seed, GEN_STREAM, k as u64), ..*sampler };
        let imgs = sample(model, &Tensor::stack(chunk)?, &sched, &cfg)?;
        out.extend((0..chunk.len()).map(|i| imgs.index_first(i)));
    }
    Ok(out)
}

/// Generates the held-out split of `data` into `out/{index:05}.png`.
pub fn generate_split(model: &Model, data: &Dataset, sampler: &SamplerConfig, out: &Path) -> Result<Vec<(usize, Tensor)>> {
    let pairs = data.load(Split::Test)?;
    let worn: Vec<Tensor> = pairs.iter().map(|p| p.worn.clone()).collect();
    let imgs = generate(model, &worn, sampler)?;
    ensure_dir(out)?;
    let mut res = Vec::with_capacity(imgs.len());
    for (p, img) in pairs.iter().zip(imgs) {
        write_png(&out.join(image_name(p.index)), &img)?;
        res.push((p.index, img));
    }
    Ok(res)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut names = Vec::new();
    for e in rd {
        let e = e.map_err(|e| PipelineError::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Scores every PNG of `generated` against the same-named PNG of `reference`.
pub fn evaluate_dirs(generated: &Path, reference: &Path, kid_seed: u64) -> Result<MetricsReport> {
    let names = png_names(generated)?;
    let missing: Vec<&String> = names.iter().filter(|n| !reference.join(n).exists()).collect();
    if !missing.is_empty() {
        return Err(core(
            CoreError::Dimension,
            format!("{} generated images have no reference in {} (first: {})", missing.len(), reference.display(), missing[0]),
        ));
    }
    let size = alignvtoff_core::synthdata::IMAGE_SIZE;
    let gen = names.iter().map(|n| read_png(&generated.join(n), size)).collect::<Result<Vec<_>>>()?;
    let refs = names.iter().map(|n| read_png(&reference.join(n), size)).collect::<Result<Vec<_>>>()?;
    Ok(evaluate_images(&gen, &refs, &FeatureNet::new(), kid_seed)?)
}

/// Scores in-memory generations against the held-out flat-lays.
pub fn evaluate_generated(data: &Dataset, generated: &[(usize, Tensor)], kid_seed: u64) -> Result<MetricsReport> {
    let size = alignvtoff_core::synthdata::IMAGE_SIZE;
    let refs = generated.iter().map(|(i, _)| read_png(&data.flat_path(*i), size)).collect::<Result<Vec<_>>>()?;
    let gen: Vec<Tensor> = generated.iter().map(|(_, t)| t.clone()).collect();
    Ok(evaluate_images(&gen, &refs, &FeatureNet::new(), kid_seed)?)
}

// ---------------------------------------------------------------------------
// Ablation

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub label: String,
    pub case: AblationCase,
    pub seed: u64,
    pub unfreeze: bool,
}

impl AblationRun {
    pub fn new(case: AblationCase, seed: u64, unfreeze: bool, base_seed: u64) -> Self {
        let mut label = case.name().to_string();
        if unfreeze {
            label.push_str("-unfrozen");
        }
        if seed != base_seed {
            label.push_str(&format!("-s{seed}"));
        }
        Self { label, case, seed, unfreeze }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub case: AblationCase,
    pub report: Option<MetricsReport>,
    pub trainable_scalars: usize,
    pub seconds: f64,
    pub error: Option<String>,
}

pub const TABLE_HEADER: &str = "case\tssim\tms_ssim\tcw_ssim\tlpips\tdists\tfid\tkid\ttrainable\tseconds\tstatus";

impl AblationRow {
    pub fn to_tsv(&self) -> String {
        let scores = match &self.report {
            Some(r) => r.named().iter().map(|(_, v)| format!("{v:.3}")).collect::<Vec<_>>().join("\t"),
            None => vec!["-"; 7].join("\t"),
        };
        let status = match &self.error {
            Some(e) => format!("failed: {}", e.replace(['\t', '\n'], " ")),
            None => "ok".to_string(),
        };
        format!("{}\t{scores}\t{}\t{:.0}\t{status}", self.label, self.trainable_scalars, self.seconds)
    }
}

/// Shared settings of a sweep.
#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub vae: PathBuf,
    pub backbone: PathBuf,
}

/// Trains, samples and scores one run under `out/<label>`.
pub fn run_case(run: &AblationRun, s: &SweepSettings, data: &Dataset, out: &Path) -> Result<AblationRow> {
    let dir = out.join(&run.label);
    let model_cfg = ModelConfig { case: run.case, unfreeze_denoiser: run.unfreeze, lambda: s.train.lambda_tsfa, ..s.model.clone() };
    let train_cfg = TrainConfig { seed: run.seed, ..s.train.clone() };
    let outcome = train(&model_cfg, &train_cfg, data, &s.vae, &s.backbone, &dir)?;
    let started = Instant::now();
    let model = load_model(&outcome.final_checkpoint)?;
    let generated = generate_split(&model, data, &s.sampler, &dir.join("samples"))?;
    let report = evaluate_generated(data, &generated, s.sampler.seed)?;
    write_kv(&dir.join("metrics.txt"), &report.to_kv())?;
    Ok(AblationRow {
        label: run.label.clone(),
        case: run.case,
        report: Some(report),
        trainable_scalars: outcome.trainable_scalars,
        seconds: outcome.seconds + started.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Runs every case in order, writing `out/ablation.tsv` after each one. A
/// failing run becomes an annotated row; when any failed the result is a
/// partial-table error.
pub fn run_ablation(runs: &[AblationRun], s: &SweepSettings, data: &Dataset, out: &Path) -> Result<Vec<AblationRow>> {
    ensure_dir(out)?;
    let table = out.join("ablation.tsv");
    let mut rows = Vec::new();
    for run in runs {
        log::info!("ablation run {}", run.label);
        let row = run_case(run, s, data, out).unwrap_or_else(|e| {
            log::error!("run {} failed: {e}", run.label);
            AblationRow { label: run.label.clone(), case: run.case, report: None, trainable_scalars: 0, seconds: 0.0, error: Some(e.to_string()) }
        });
        rows.push(row);
        let text: String = std::iter::once(TABLE_HEADER.to_string()).chain(rows.iter().map(AblationRow::to_tsv)).map(|l| l + "\n").collect();
        write_atomic(&table, text.as_bytes())?;
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(PipelineError::Partial { failed, total: rows.len(), table });
    }
    Ok(rows)
}

/// Held-out scores of one checkpoint at each inference-time `lambda`.
pub fn lambda_sweep(ckpt: &Path, lambdas: &[f32], data: &Dataset, sampler: &SamplerConfig, out: &Path) -> Result<Vec<(f32, MetricsReport)>> {
    let mut model = load_model(ckpt)?;
    let mut res = Vec::new();
    for &l in lambdas {
        model.set_lambda(l)?;
        let generated = generate_split(&model, data, sampler, &out.join(format!("lambda{l}")))?;
        res.push((l, evaluate_generated(data, &generated, sampler.seed)?));
    }
    let mut kv = KvMap::new();
    for (l, r) in &res {
        for (name, v) in r.named() {
            kv.set(&format!("lambda{l}.{name}"), format!("{v:.6}"));
        }
    }
    write_kv(&out.join("lambda_sweep.txt"), &kv)?;
    Ok(res)
}
