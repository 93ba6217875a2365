//! Self-attention, cross-attention and the texture-spatial alignment block.
//!
//! The alignment block sums a self-attention branch over the denoising
//! features with a `lambda`-weighted cross-attention branch over reference
//! features. Both branches read the *same* projected query tensor; only the
//! reference key/value projections (`wk_prime`, `wv_prime`) are trainable.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::math;
use crate::nn::Builder;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Largest accepted reference weight.
pub const LAMBDA_MAX: f32 = 1.5;

/// Trainable projections of the reference branch.
#[derive(Clone, Debug)]
pub struct ReferenceProjections {
    pub wk_prime: ParamId,
    pub wv_prime: ParamId,
    pub ref_dim: usize,
}

/// Query/key/value projections of one attention site.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub reference: Option<ReferenceProjections>,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionWeights {
    /// Registers `wq`, `wk`, `wv` (`[dim, dim]`) with the builder's trainable flag.
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "model dim {} not divisible by head count {}", dim, heads);
        }
        let std = 1.0 / math::sqrt(dim as f32);
        Ok(Self {
            wq: b.normal("wq", &[dim, dim], std)?,
            wk: b.normal("wk", &[dim, dim], std)?,
            wv: b.normal("wv", &[dim, dim], std)?,
            reference: None,
            heads,
            dim,
        })
    }

    /// Adds the trainable reference projections under `prefix.tsfa.*`.
    ///
    /// With `ref_dim == dim` they start as copies of `wk`/`wv`; otherwise
    /// they are drawn from N(0, 0.02^2).
    pub fn with_reference(mut self, b: &mut Builder, ref_dim: usize) -> Result<Self> {
        let (wk_init, wv_init) = if ref_dim == self.dim {
            (b.store.value(self.wk).clone(), b.store.value(self.wv).clone())
        } else {
            (
                Tensor::randn(&[ref_dim, self.dim], 0.02, b.rng),
                Tensor::randn(&[ref_dim, self.dim], 0.02, b.rng),
            )
        };
        let wk_prime = b.store.add(&b.path("tsfa.wk_prime"), wk_init, true)?;
        let wv_prime = b.store.add(&b.path("tsfa.wv_prime"), wv_init, true)?;
        self.reference = Some(ReferenceProjections { wk_prime, wv_prime, ref_dim });
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// The texture-spatial feature alignment block: attention weights plus the
/// reference weight `lambda`.
#[derive(Clone, Debug)]
pub struct TsfaBlock {
    pub weights: AttentionWeights,
    lambda: f32,
}

impl TsfaBlock {
    pub fn new(weights: AttentionWeights, lambda: f32) -> Result<Self> {
        if weights.reference.is_none() {
            bail!(Config, "alignment block needs reference projections");
        }
        check_lambda(lambda)?;
        Ok(Self { weights, lambda })
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f32) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }
}

pub fn check_lambda(lambda: f32) -> Result<()> {
    if !(0.0..=LAMBDA_MAX).contains(&lambda) {
        bail!(Config, "lambda {} outside [0, {}]", lambda, LAMBDA_MAX);
    }
    Ok(())
}

/// Multi-head scaled dot-product attention. `q: [B, N, d]`, `k`, `v: [B, M, d]`.
/// Returns `(output [B, N, d], probabilities [B, heads, N, M])`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(v) != &ks[..] {
        bail!(Dimension, "attention operands incompatible: q {:?}, k {:?}, v {:?}", qs, ks, g.shape(v));
    }
    let (b, n, d) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    if heads == 0 || d % heads != 0 {
        bail!(Config, "dim {} not divisible by head count {}", d, heads);
    }
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, len: usize| -> Result<Var> {
        let r = g.reshape(x, &[b, len, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let qh = split(g, q, n)?;
    let kh = split(g, k, m)?;
    let vh = split(g, v, m)?;
    let logits = g.matmul_t(qh, kh)?;
    let logits = g.scale(logits, 1.0 / math::sqrt(dh as f32));
    let probs = g.softmax(logits, 3)?;
    let out = g.matmul(probs, vh)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok((g.reshape(out, &[b, n, d])?, probs))
}

fn check_tokens(g: &Graph, z: Var, dim: usize) -> Result<()> {
    let s = g.shape(z);
    if s.len() != 3 || s[2] != dim {
        bail!(Dimension, "expected tokens [B, N, {}], got {:?}", dim, s);
    }
    Ok(())
}

/// Projected self-attention branch; also returns the query tensor and probabilities.
fn self_branch(g: &mut Graph, s: &ParamStore, z: Var, w: &AttentionWeights) -> Result<(Var, Var, Var)> {
    check_tokens(g, z, w.dim)?;
    if w.heads == 0 || w.dim % w.heads != 0 {
        bail!(Config, "model dim {} not divisible by head count {}", w.dim, w.heads);
    }
    let wq = g.param(s, w.wq);
    let wk = g.param(s, w.wk);
    let wv = g.param(s, w.wv);
    let q = g.matmul(z, wq)?;
    let k = g.matmul(z, wk)?;
    let v = g.matmul(z, wv)?;
    let (out, probs) = attend(g, q, k, v, w.heads)?;
    Ok((out, q, probs))
}

/// `Softmax(Q K^T / sqrt(d_head)) V` with all three projections taken from `z`.
pub fn self_attention(g: &mut Graph, s: &ParamStore, z: Var, w: &AttentionWeights) -> Result<Var> {
    Ok(self_branch(g, s, z, w)?.0)
}

fn reference_branch(
    g: &mut Graph,
    s: &ParamStore,
    q: Var,
    c_ref: Var,
    w: &AttentionWeights,
) -> Result<(Var, Var)> {
    let Some(r) = &w.reference else {
        bail!(Config, "attention site has no reference projections");
    };
    let cs = g.shape(c_ref).to_vec();
    if cs.len() != 3 || cs[2] != r.ref_dim {
        bail!(Dimension, "reference tokens must be [B, M, {}], got {:?}", r.ref_dim, cs);
    }
    if cs[1] == 0 {
        bail!(Dimension, "reference token count must be positive");
    }
    if cs[0] != g.shape(q)[0] {
        bail!(Dimension, "reference batch {} differs from query batch {}", cs[0], g.shape(q)[0]);
    }
    let wk = g.param(s, r.wk_prime);
    let wv = g.param(s, r.wv_prime);
    let k = g.matmul(c_ref, wk)?;
    let v = g.matmul(c_ref, wv)?;
    attend(g, q, k, v, w.heads)
}

/// Vars recorded by an instrumented alignment forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TsfaTrace {
    pub output: Var,
    pub self_output: Var,
    /// Query consumed by the self branch.
    pub self_query: Var,
    /// Query consumed by the reference branch (absent when lambda is zero).
    pub cross_query: Option<Var>,
    pub self_probs: Var,
    pub cross_probs: Option<Var>,
}

/// Alignment forward: `SelfAttn(z_den) + lambda * Softmax(Q K_ref^T / sqrt(d_head)) V_ref`
/// with `Q` shared between branches and `K_ref = c_ref W'_k`, `V_ref = c_ref W'_v`.
pub fn tsfa_forward(g: &mut Graph, s: &ParamStore, z_den: Var, c_ref: Var, block: &TsfaBlock) -> Result<Var> {
    Ok(tsfa_forward_traced(g, s, z_den, c_ref, block)?.output)
}

pub fn tsfa_forward_traced(
    g: &mut Graph,
    s: &ParamStore,
    z_den: Var,
    c_ref: Var,
    block: &TsfaBlock,
) -> Result<TsfaTrace> {
    let w = &block.weights;
    let (self_out, q, self_probs) = self_branch(g, s, z_den, w)?;
    if block.lambda == 0.0 {
        // The additive term vanishes; returning the self branch keeps the
        // result bit-identical to `self_attention` (no +0.0/-0.0 round trip).
        let Some(r) = &w.reference else { unreachable!("checked in TsfaBlock::new") };
        let cs = g.shape(c_ref);
        if cs.len() != 3 || cs[2] != r.ref_dim || cs[1] == 0 {
            bail!(Dimension, "reference tokens must be [B, M>0, {}], got {:?}", r.ref_dim, cs);
        }
        return Ok(TsfaTrace {
            output: self_out,
            self_output: self_out,
            self_query: q,
            cross_query: None,
            self_probs,
            cross_probs: None,
        });
    }
    let (cross, cross_probs) = reference_branch(g, s, q, c_ref, w)?;
    let scaled = g.scale(cross, block.lambda);
    let output = g.add(self_out, scaled)?;
    Ok(TsfaTrace {
        output,
        self_output: self_out,
        self_query: q,
        cross_query: Some(q),
        self_probs,
        cross_probs: Some(cross_probs),
    })
}

/// Pure cross-attention to reference tokens (self branch removed). The
/// query still comes from the frozen `wq`.
pub fn reference_only_attention(g: &mut Graph, s: &ParamStore, z: Var, c_ref: Var, w: &AttentionWeights) -> Result<Var> {
    check_tokens(g, z, w.dim)?;
    let wq = g.param(s, w.wq);
    let q = g.matmul(z, wq)?;
    Ok(reference_branch(g, s, q, c_ref, w)?.0)
}

/// The parameters the optimizer may update inside an alignment block.
pub fn trainable_params(block: &TsfaBlock) -> Vec<ParamId> {
    match &block.weights.reference {
        Some(r) => vec![r.wk_prime, r.wv_prime],
        None => Vec::new(),
    }
}
