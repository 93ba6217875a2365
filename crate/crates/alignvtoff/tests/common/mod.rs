//! Tiny-network fixture shared by the integration targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};

use alignvtoff::dataset::{self, Dataset};
use alignvtoff::pipeline::{self, PretrainOptions};
use alignvtoff::PipelineError;
use alignvtoff_core::networks::ModelConfig;
use alignvtoff_core::training::TrainConfig;

pub const CONFIG: &str = "\
# tiny networks so the whole pipeline runs in seconds
widths=8,16,16
vae_widths=8,8,8,8
heads=2
d_ctx=16
prompt_len=2
temb_dim=16
stage1_steps=8
stage2_steps=4
warmup_steps=4
lr_stage1_peak=1e-3
lr_stage2=5e-4
micro_batch=2
grad_accum=2
seed=3
";

/// Dataset of 20 pairs (indices 11 and 12 held out) plus pretrained
/// artifacts, built once per test binary.
pub struct Fixture {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub data: PathBuf,
    pub config: PathBuf,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        dataset::generate(20, 0, &data).unwrap();
        let config = root.join("tiny.txt");
        fs::write(&config, CONFIG).unwrap();
        let (train, model) = alignvtoff::cli::load_config(Some(&config)).unwrap();
        let opts = PretrainOptions { steps: 10, batch: 4, lr: 2e-3, seed: 1 };
        // Ten steps cannot reach the reconstruction gate; the checkpoint is still written.
        match pipeline::pretrain_vae(&Dataset::open(&data).unwrap(), &model, &opts, &data.join("vae.avtc")) {
            Err(PipelineError::Gate { psnr, .. }) => assert!(psnr.is_finite()),
            other => panic!("{other:?}"),
        }
        let opts = PretrainOptions { steps: 10, batch: 4, lr: 1e-3, seed: 1 };
        pipeline::pretrain_backbone(&Dataset::open(&data).unwrap(), &data.join("vae.avtc"), &model, &opts, train.cfg_drop_prob, &data.join("backbone.avtc"))
            .unwrap();
        Fixture { _dir: dir, root, data, config }
    })
}

pub fn tiny() -> (TrainConfig, ModelConfig) {
    alignvtoff::cli::load_config(Some(&fixture().config)).unwrap()
}

pub fn bin(args: &[&str]) -> (i32, String, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_alignvtoff")).args(args).env("RUST_LOG", "warn").output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn trained(case: &str) -> PathBuf {
    static DONE: OnceLock<Mutex<()>> = OnceLock::new();
    let _g = DONE.get_or_init(Default::default).lock().unwrap();
    let f = fixture();
    let out = f.root.join(format!("train-{case}"));
    let ck = out.join(pipeline::FINAL_CHECKPOINT);
    if !ck.exists() {
        let (code, _, err) = bin(&["train", "--case", case, "--config", s(&f.config), "--data", s(&f.data), "--out", s(&out)]);
        assert_eq!(code, 0, "{err}");
    }
    ck
}

