//! Central finite-difference gradient checking.
//!
//! The numeric side replays the recorded tape in f64 with its own loops, so
//! it shares no kernel with the reverse sweep it validates and carries no f32
//! rounding. Both sides differentiate `sum(out * R)` for a fixed random `R`.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, LeafRef, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-element relative errors for one checked tensor.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
    /// Elements skipped because both gradients were below the magnitude floor.
    pub skipped: usize,
}

impl GradCheckReport {
    /// Error at quantile `q` in `[0, 1]`; zero when nothing was checked.
    pub fn quantile(&self, q: f64) -> f64 {
        if self.rel_errors.is_empty() {
            return 0.0;
        }
        let mut v = self.rel_errors.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        let idx = libm::round((v.len() - 1) as f64 * q) as usize;
        v[idx]
    }

    pub fn max(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Settings shared by the checks.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, applied in f64.
    pub eps: f64,
    /// Gradients with magnitude at or below this floor are not compared.
    pub floor: f64,
    /// Upper bound on probed elements per tensor (sampled when exceeded).
    pub max_elems: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, floor: 1e-6, max_elems: 64, seed: 0 }
    }
}

fn weights_for(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).expect("shape from a live tensor")
}

fn probe_indices(n: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    if n <= cfg.max_elems {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(salt));
    let mut idx = sample(&mut rng, n, cfg.max_elems).into_vec();
    idx.sort_unstable();
    idx
}

fn compare(analytic: &[f32], numeric: &[(usize, f64)], floor: f64) -> GradCheckReport {
    let mut rel_errors = Vec::new();
    let mut skipped = 0;
    for &(i, num) in numeric {
        let a = analytic[i] as f64;
        let scale = a.abs().max(num.abs());
        if scale <= floor {
            skipped += 1;
            continue;
        }
        rel_errors.push((a - num).abs() / scale);
    }
    GradCheckReport { rel_errors, skipped }
}

/// Checks gradients w.r.t. free input tensors. `f` maps input vars to an
/// output var of any shape.
pub fn check_inputs<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let (loss, w) = weighted_loss(&mut g, out, cfg.seed)?;
    let grads = g.backward(loss)?;

    let mut reports = Vec::new();
    for (k, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let numeric = central(&g, out, &w, t, LeafRef::Input(v), &cfg, k as u64);
        reports.push(compare(analytic.data(), &numeric, cfg.floor));
    }
    Ok(reports)
}

/// Checks gradients w.r.t. parameters of `store`. `f` builds the output from
/// the store (parameters enter through [`Graph::param`]); extra constant
/// inputs are captured by the closure.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], cfg: GradCheckConfig, f: F) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    for &id in ids {
        work.get_mut(id).trainable = true;
    }
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    let (loss, w) = weighted_loss(&mut g, out, cfg.seed)?;
    g.backward_into(loss, &mut work)?;

    let mut reports = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        let p = work.get(id);
        let analytic = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let numeric = central(&g, out, &w, &p.value, LeafRef::Param(id), &cfg, 1000 + k as u64);
        reports.push(compare(analytic.data(), &numeric, cfg.floor));
    }
    Ok(reports)
}

fn weighted_loss(g: &mut Graph, out: Var, seed: u64) -> Result<(Var, Tensor)> {
    let w = weights_for(g.shape(out), seed);
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    Ok((g.sum(prod), w))
}

/// Central differences of `sum(out * w)` w.r.t. the probed elements of one
/// leaf, replaying the recorded tape in f64.
fn central(g: &Graph, out: Var, w: &Tensor, value: &Tensor, target: LeafRef, cfg: &GradCheckConfig, salt: u64) -> Vec<(usize, f64)> {
    let base: Vec<f64> = value.data().iter().map(|&x| x as f64).collect();
    let eval = |i: usize, d: f64| {
        let mut v = base.clone();
        v[i] += d;
        let y = g.replay_f64(out, &|l| (l == target).then(|| v.clone()));
        y.iter().zip(w.data()).map(|(a, &b)| a * b as f64).sum::<f64>()
    };
    probe_indices(value.numel(), cfg, salt)
        .into_iter()
        .map(|i| (i, (eval(i, cfg.eps) - eval(i, -cfg.eps)) / (2.0 * cfg.eps)))
        .collect()
}
