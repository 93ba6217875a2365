//! Noise schedule, forward noising, classifier-free guidance and the
//! second-order multistep DPM-Solver++ sampler.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::math;
use crate::networks::Model;
use crate::tensor::Tensor;

pub const DEFAULT_T: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear-beta schedule with cumulative signal coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        math::sqrt64(self.alpha_bar[t])
    }

    /// Noise scale `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        math::sqrt64(1.0 - self.alpha_bar[t])
    }

    /// Half log signal-to-noise ratio `ln(alpha / sigma)`.
    pub fn log_snr(&self, t: usize) -> f64 {
        math::ln64(self.alpha(t) / self.sigma(t))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            bail!(Range, "timestep {} outside [0, {})", t, self.len());
        }
        Ok(())
    }
}

pub fn make_schedule(t_steps: usize) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        bail!(Config, "schedule needs at least 2 steps, got {}", t_steps);
    }
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0f64;
    for i in 0..t_steps {
        let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (t_steps - 1) as f64;
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let (a, s) = (sched.alpha(t) as f32, sched.sigma(t) as f32);
    z0.zip_map(eps, |z, e| a * z + s * e)
}

/// Batched [`add_noise`] with one timestep per leading index.
pub fn add_noise_batch(z0: &Tensor, eps: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
        bail!(Dimension, "noising shapes {:?} / {:?} with {} timesteps", z0.shape(), eps.shape(), t.len());
    }
    let per = z0.numel() / t.len();
    let mut out = vec![0.0; z0.numel()];
    for (b, &tb) in t.iter().enumerate() {
        sched.check_t(tb)?;
        let (a, s) = (sched.alpha(tb) as f32, sched.sigma(tb) as f32);
        for i in b * per..(b + 1) * per {
            out[i] = a * z0.data()[i] + s * eps.data()[i];
        }
    }
    Tensor::new(z0.shape(), out)
}

/// One-step clean-latent estimate `(z_t - sqrt(1 - alpha_bar) eps_pred) / sqrt(alpha_bar)`
/// on the tape, one timestep per sample.
pub fn predict_x0(g: &mut Graph, z_t: Var, eps_pred: Var, t: &[usize], sched: &NoiseSchedule) -> Result<Var> {
    let shape = g.shape(z_t).to_vec();
    if shape.first() != Some(&t.len()) {
        bail!(Dimension, "{} timesteps for latent batch {:?}", t.len(), shape);
    }
    let mut bshape = vec![1; shape.len()];
    bshape[0] = t.len();
    let mut inv_a = Vec::with_capacity(t.len());
    let mut s_over_a = Vec::with_capacity(t.len());
    for &tb in t {
        sched.check_t(tb)?;
        inv_a.push((1.0 / sched.alpha(tb)) as f32);
        s_over_a.push((sched.sigma(tb) / sched.alpha(tb)) as f32);
    }
    let ia = g.constant(Tensor::new(&bshape, inv_a)?);
    let sa = g.constant(Tensor::new(&bshape, s_over_a)?);
    let a = g.mul(z_t, ia)?;
    let b = g.mul(eps_pred, sa)?;
    g.sub(a, b)
}

/// Guidance combination `w * eps_cond + (1 - w) * eps_uncond`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f32) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        bail!(Dimension, "guidance inputs differ in shape: {:?} vs {:?}", eps_cond.shape(), eps_uncond.shape());
    }
    eps_cond.zip_map(eps_uncond, |c, u| w * c + (1.0 - w) * u)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, guidance: 2.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            bail!(Config, "sampler steps {} outside [1, {}]", self.steps, sched.len());
        }
        if !self.guidance.is_finite() {
            bail!(Config, "guidance scale must be finite");
        }
        Ok(())
    }
}

/// Descending timesteps visited by an `steps`-step trajectory, starting at `T - 1`.
pub fn sampling_timesteps(sched: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let last = (sched.len() - 1) as f64;
    (0..steps).map(|i| libm::round(last * (1.0 - i as f64 / steps as f64)) as usize).collect()
}

/// Deterministic DPM-Solver++ (2M) in data-prediction form.
///
/// `eps_fn(x, t)` returns the guided noise prediction. Each step converts it
/// to a clean estimate `x0 = (x - sigma eps) / alpha`, the second-order
/// multistep correction blends the current and previous estimates, and the
/// last step lands on `sigma = 0` with the first-order update (`x = x0`).
pub fn dpm_solver_2m<F>(sched: &NoiseSchedule, steps: usize, x_t: Tensor, mut eps_fn: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if steps == 0 || steps > sched.len() {
        bail!(Config, "sampler steps {} outside [1, {}]", steps, sched.len());
    }
    let ts = sampling_timesteps(sched, steps);
    let mut x: Vec<f64> = x_t.data().iter().map(|&v| v as f64).collect();
    let shape = x_t.shape().to_vec();
    let mut prev: Option<(Vec<f64>, f64)> = None; // (x0 estimate, step size h)
    for (i, &t) in ts.iter().enumerate() {
        let xt = Tensor::new(&shape, x.iter().map(|&v| v as f32).collect())?;
        let eps = eps_fn(&xt, t)?;
        if eps.shape() != shape.as_slice() {
            bail!(Dimension, "noise prediction {:?} for latent {:?}", eps.shape(), shape);
        }
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let x0: Vec<f64> = x.iter().zip(eps.data()).map(|(&xv, &e)| (xv - s * e as f64) / a).collect();
        let Some(&t_next) = ts.get(i + 1) else {
            x = x0;
            break;
        };
        let (a_n, s_n) = (sched.alpha(t_next), sched.sigma(t_next));
        let h = sched.log_snr(t_next) - sched.log_snr(t);
        let phi = math::exp64(-h) - 1.0;
        let d: Vec<f64> = match &prev {
            Some((x0_prev, h_prev)) => {
                let r = h_prev / h;
                let c = 1.0 / (2.0 * r);
                x0.iter().zip(x0_prev).map(|(&cur, &old)| (1.0 + c) * cur - c * old).collect()
            }
            None => x0.clone(),
        };
        for (xv, dv) in x.iter_mut().zip(&d) {
            *xv = (s_n / s) * *xv - a_n * phi * dv;
        }
        prev = Some((x0, h));
    }
    Tensor::new(&shape, x.into_iter().map(|v| v as f32).collect())
}

/// Tensors computed once per sample call and reused at every solver step.
struct Conditioning {
    c_ref: Vec<Tensor>,
}

fn constants(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

/// Generates flat-lay images `[B, 3, H, W]` in `[-1, 1]` from person images.
///
/// The reference U-Net runs exactly once; every solver step evaluates the
/// conditional branch (prompt + reference features) and, unless `w == 1`,
/// the unconditional branch (null prompt, no reference features).
pub fn sample(model: &Model, person: &Tensor, sched: &NoiseSchedule, config: &SamplerConfig) -> Result<Tensor> {
    if !model.initialized {
        bail!(State, "model weights are not initialized; load a checkpoint first");
    }
    config.validate(sched)?;
    let batch = person.shape()[0];
    let cond = if model.config.case.uses_reference() {
        let mut g = Graph::inference();
        let x = g.constant(person.clone());
        let tokens = model.encode_person_tokens(&mut g, x)?;
        let z_g = model.encode_latent(&mut g, x)?;
        let c = model.reference_forward(&mut g, z_g, tokens)?;
        Conditioning { c_ref: c.iter().map(|v| g.value(*v).clone()).collect() }
    } else {
        Conditioning { c_ref: Vec::new() }
    };
    let latent = model.config.latent_size();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x_t = Tensor::randn(&[batch, crate::networks::LATENT_CHANNELS, latent, latent], 1.0, &mut rng);
    let w = config.guidance;
    let z0 = dpm_solver_2m(sched, config.steps, x_t, |x, t| {
        let tt = vec![t as f32; batch];
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let ctx = model.prompt_context(&mut g, batch, false)?;
        let c_ref = constants(&mut g, &cond.c_ref);
        let e_c = model.denoise_forward(&mut g, xv, &tt, ctx, &c_ref)?;
        let e_c = g.value(e_c).clone();
        if w == 1.0 {
            return Ok(e_c);
        }
        let null = model.prompt_context(&mut g, batch, true)?;
        let e_u = model.denoise_forward(&mut g, xv, &tt, null, &[])?;
        cfg_combine(&e_c, g.value(e_u), w)
    })?;
    let mut g = Graph::inference();
    let z = g.constant(z0);
    let img = model.decode_latent(&mut g, z)?;
    Ok(g.value(img).clone())
}
