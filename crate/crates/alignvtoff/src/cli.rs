//! Command-line interface.

use std::path::{Path, PathBuf};

use alignvtoff_core::diffusion::SamplerConfig;
use alignvtoff_core::kv::KvMap;
use alignvtoff_core::networks::{AblationCase, ModelConfig};
use alignvtoff_core::training::TrainConfig;
use alignvtoff_core::Error as CoreError;
use clap::{Args, Parser, Subcommand};

use crate::dataset::{self, Dataset};
use crate::error::{core, Result};
use crate::io::{read_kv, write_kv, write_png};
use crate::pipeline::{self, AblationRun, PretrainOptions, SweepSettings};

#[derive(Parser, Debug)]
#[command(name = "alignvtoff", version, about = "Reference-conditioned latent diffusion for virtual try-off, at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic paired dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and freeze the VAE; fails with exit code 12 if the PSNR gate is unmet.
    PretrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: PretrainArgs,
        /// Model configuration file (only the VAE widths matter here).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the prompt-only denoiser the model starts from.
    PretrainBackbone {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: PretrainArgs,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Two-stage training of one ablation case; resumes when `out` holds checkpoints.
    Train {
        #[arg(long)]
        case: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pre: PretrainedPaths,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate flat-lay images. `--input` is a PNG or a dataset directory
    /// (its held-out split is generated into the `--out` directory).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        guidance: f32,
        /// One value, or a comma list for a sweep (one output per value).
        #[arg(long, default_value = "1.0", value_delimiter = ',')]
        lambda: Vec<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, sample and score several cases on the same data and seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "baseline,ieb_ca,encoder_only,decoder_only,full")]
        cases: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pre: PretrainedPaths,
        /// Also run every case with the denoising U-Net unfrozen.
        #[arg(long)]
        unfreeze: bool,
        /// Extra training seeds, each run for every case.
        #[arg(long, value_delimiter = ',')]
        extra_seeds: Vec<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        guidance: f32,
    },
    /// Score generated images against same-named references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PretrainArgs {
    fn apply(&self, mut o: PretrainOptions) -> PretrainOptions {
        o.steps = self.steps.unwrap_or(o.steps);
        o.batch = self.batch.unwrap_or(o.batch);
        o.lr = self.lr.unwrap_or(o.lr);
        o.seed = self.seed;
        o
    }
}

#[derive(Args, Debug)]
pub struct PretrainedPaths {
    /// Defaults to `<data>/vae.avtc`.
    #[arg(long)]
    pub vae: Option<PathBuf>,
    /// Defaults to `<data>/backbone.avtc`.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

impl PretrainedPaths {
    fn resolve(&self, data: &Path) -> (PathBuf, PathBuf) {
        (self.vae.clone().unwrap_or_else(|| data.join("vae.avtc")), self.backbone.clone().unwrap_or_else(|| data.join("backbone.avtc")))
    }
}

/// Reads a combined configuration file: training keys plus model keys
/// (`case` comes from the command line and `lambda` from `lambda_tsfa`).
pub fn load_config(path: Option<&Path>) -> Result<(TrainConfig, ModelConfig)> {
    let kv = match path {
        Some(p) => read_kv(p)?,
        None => KvMap::new(),
    };
    for k in kv.keys() {
        let model_key = ModelConfig::KEYS.contains(&k) && k != "case" && k != "lambda";
        if !TrainConfig::KEYS.contains(&k) && !model_key {
            return Err(core(CoreError::Config, format!("unknown configuration key {k:?}")));
        }
    }
    Ok((TrainConfig::from_kv(&kv)?, ModelConfig::from_kv(&kv)?))
}

fn sweep_path(out: &Path, lambda: f32, many: bool) -> PathBuf {
    if !many {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match out.extension() {
        Some(ext) => out.with_file_name(format!("{stem}-lambda{lambda}.{}", ext.to_string_lossy())),
        None => out.join(format!("lambda{lambda}")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, seed, out } => {
            let entries = dataset::generate(n, seed, &out)?;
            let test = entries.iter().filter(|e| e.split == dataset::Split::Test).count();
            println!("wrote {n} pairs ({} train, {test} test) to {}", n - test, out.display());
        }
        Command::PretrainVae { data, out, opts, config } => {
            let (_, model) = load_config(config.as_deref())?;
            let r = pipeline::pretrain_vae(&Dataset::open(&data)?, &model, &opts.apply(PretrainOptions::vae()), &out)?;
            println!("psnr={:.4}\nlatent_scale={}\nsteps={}", r.psnr, r.latent_scale, r.steps);
        }
        Command::PretrainBackbone { data, vae, out, opts, config } => {
            let (train, model) = load_config(config.as_deref())?;
            let opts = opts.apply(PretrainOptions::backbone());
            let loss = pipeline::pretrain_backbone(&Dataset::open(&data)?, &vae, &model, &opts, train.cfg_drop_prob, &out)?;
            println!("final_loss={loss:.6}");
        }
        Command::Train { case, config, data, out, pre, seed } => {
            let (mut train, model) = load_config(config.as_deref())?;
            train.seed = seed.unwrap_or(train.seed);
            let model = ModelConfig { case: AblationCase::parse(&case)?, ..model };
            let (vae, backbone) = pre.resolve(&data);
            let o = pipeline::train(&model, &train, &Dataset::open(&data)?, &vae, &backbone, &out)?;
            println!("checkpoint={}\nsteps={}\ntrainable={}\nseconds={:.0}", o.final_checkpoint.display(), o.steps, o.trainable_scalars, o.seconds);
        }
        Command::Infer { ckpt, input, out, steps, guidance, lambda, seed } => {
            let mut model = pipeline::load_model(&ckpt)?;
            let sampler = SamplerConfig { steps, guidance, seed };
            let many = lambda.len() > 1;
            for &l in &lambda {
                model.set_lambda(l)?;
                let target = sweep_path(&out, l, many);
                if input.is_dir() {
                    let n = pipeline::generate_split(&model, &Dataset::open(&input)?, &sampler, &target)?.len();
                    println!("lambda={l} wrote {n} images to {}", target.display());
                } else {
                    let worn = crate::io::read_png(&input, model.config.image_size)?;
                    let img = pipeline::generate(&model, &[worn], &sampler)?.remove(0);
                    write_png(&target, &img)?;
                    println!("lambda={l} wrote {}", target.display());
                }
            }
        }
        Command::Ablate { cases, config, data, out, pre, unfreeze, extra_seeds, seed, steps, guidance } => {
            let (mut train, model) = load_config(config.as_deref())?;
            train.seed = seed.unwrap_or(train.seed);
            let cases = cases.iter().map(|c| AblationCase::parse(c.trim())).collect::<alignvtoff_core::Result<Vec<_>>>()?;
            let mut runs = Vec::new();
            for s in std::iter::once(train.seed).chain(extra_seeds.iter().copied()) {
                for &c in &cases {
                    runs.push(AblationRun::new(c, s, false, train.seed));
                    if unfreeze {
                        runs.push(AblationRun::new(c, s, true, train.seed));
                    }
                }
            }
            let (vae, backbone) = pre.resolve(&data);
            let settings = SweepSettings { sampler: SamplerConfig { steps, guidance, seed: train.seed }, train, model, vae, backbone };
            let rows = pipeline::run_ablation(&runs, &settings, &Dataset::open(&data)?, &out)?;
            println!("{}", pipeline::TABLE_HEADER);
            for r in rows {
                println!("{}", r.to_tsv());
            }
        }
        Command::Eval { generated, reference, out, seed } => {
            let report = pipeline::evaluate_dirs(&generated, &reference, seed)?;
            let kv = report.to_kv();
            write_kv(&out, &kv)?;
            print!("{}", kv.to_text());
        }
    }
    Ok(())
}
