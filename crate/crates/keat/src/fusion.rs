//! Concept-attention fusion: weight each retrieved concept by its relevance
//! to the encoded text (α), by its standing within the concept set (β), blend
//! the two with a mixing coefficient γ, and collapse the concept matrix into a
//! single feature row r.
//!
//! For concepts C (m×d) and a pooled text query q (1×2u):
//!
//! - `α = softmax_i( v₁ᵀ tanh(W₁ [cᵢ; q] + b₁) )` — text-conditioned weights,
//! - `β = softmax_i( v₂ᵀ tanh(W₂ cᵢ) + b₂ )` — set-internal weights (the
//!   scalar bias sits outside the tanh; softmax cancels it either way),
//! - `a = softmax(γ·α + (1−γ)·β)` — fused distribution,
//! - `r = Σᵢ aᵢ cᵢ` — convex combination of the concept rows.
//!
//! An empty concept set never reaches these functions; the caller substitutes
//! a zero feature row and classifies on the text feature alone.

use rand::Rng;

use crate::error::{KeatError, Result};
use crate::tape::{ParamId, ParamSet, Regularization, Tape, VarId};
use crate::tensor::Tensor;

/// Parameter ids for the fusion layer. `w1` consumes `[cᵢ; q]` rows
/// (concept width d, then query width 2u); both biases are scalars.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub w1: ParamId,
    pub v1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub v2: ParamId,
    pub b2: ParamId,
}

impl FusionParams {
    pub fn register(
        set: &mut ParamSet,
        concept_dim: usize,
        query_dim: usize,
        text_attn_dim: usize,
        set_attn_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> FusionParams {
        let w1 = set.register(
            "fuse.w1",
            Tensor::randn(vec![concept_dim + query_dim, text_attn_dim], std, rng),
            Regularization::Full,
        );
        let v1 = set.register(
            "fuse.v1",
            Tensor::randn(vec![text_attn_dim, 1], std, rng),
            Regularization::Full,
        );
        let b1 = set.register("fuse.b1", Tensor::scalar(0.0), Regularization::None);
        let w2 = set.register(
            "fuse.w2",
            Tensor::randn(vec![concept_dim, set_attn_dim], std, rng),
            Regularization::Full,
        );
        let v2 = set.register(
            "fuse.v2",
            Tensor::randn(vec![set_attn_dim, 1], std, rng),
            Regularization::Full,
        );
        let b2 = set.register("fuse.b2", Tensor::scalar(0.0), Regularization::None);
        FusionParams { w1, v1, b1, w2, v2, b2 }
    }
}

/// α over the m concepts, conditioned on the text query. Output m×1.
pub fn text_concept_weights(
    tape: &mut Tape,
    set: &ParamSet,
    p: &FusionParams,
    concepts: VarId,
    query: VarId,
) -> Result<VarId> {
    let m = tape.value(concepts).rows();
    let w1 = tape.param(set, p.w1);
    let v1 = tape.param(set, p.v1);
    let b1 = tape.param(set, p.b1);
    let q_rep = tape.repeat_rows(query, m)?;
    let joined = tape.concat(concepts, q_rep, 1)?; // m×(d+2u)
    let lin = tape.matmul(joined, w1)?;
    let biased = tape.add_scalar_var(lin, b1)?;
    let th = tape.tanh(biased)?;
    let scores = tape.matmul(th, v1)?; // m×1
    tape.softmax(scores, 0)
}

/// β over the m concepts from the concept rows alone. Output m×1.
pub fn concept_self_weights(
    tape: &mut Tape,
    set: &ParamSet,
    p: &FusionParams,
    concepts: VarId,
) -> Result<VarId> {
    let w2 = tape.param(set, p.w2);
    let v2 = tape.param(set, p.v2);
    let b2 = tape.param(set, p.b2);
    let lin = tape.matmul(concepts, w2)?;
    let th = tape.tanh(lin)?;
    let scores = tape.matmul(th, v2)?;
    let shifted = tape.add_scalar_var(scores, b2)?;
    tape.softmax(shifted, 0)
}

/// `a = softmax(γ·α + (1−γ)·β)`; γ must lie in [0, 1].
pub fn fuse_weights(tape: &mut Tape, alpha: VarId, beta: VarId, gamma: f64) -> Result<VarId> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(KeatError::contract(format!("fusion γ must lie in [0, 1], got {gamma}")));
    }
    let ga = tape.affine(alpha, gamma, 0.0)?;
    let gb = tape.affine(beta, 1.0 - gamma, 0.0)?;
    let mixed = tape.add(ga, gb)?;
    tape.softmax(mixed, 0)
}

/// `r = Σᵢ aᵢ cᵢ` as a 1×d row. The weights must form a distribution.
pub fn concept_feature(tape: &mut Tape, weights: VarId, concepts: VarId) -> Result<VarId> {
    let w = tape.value(weights);
    if w.numel() != tape.value(concepts).rows() {
        return Err(KeatError::shape(format!(
            "concept weights have {} entries for {} concept rows",
            w.numel(),
            tape.value(concepts).rows()
        )));
    }
    let sum: f64 = w.data().iter().sum();
    if (sum - 1.0).abs() > 1e-6 || w.data().iter().any(|&v| v < 0.0) {
        return Err(KeatError::contract(format!(
            "concept weights must form a distribution (sum {sum:.9})"
        )));
    }
    let row = tape.transpose(weights)?; // 1×m
    tape.matmul(row, concepts)
}

#[derive(Debug, Clone, Copy)]
pub struct ConceptAttentionOut {
    pub alpha: VarId,
    pub beta: VarId,
    pub fused: VarId,
    /// 1×d concept feature r.
    pub feature: VarId,
}

/// Full fusion pass. With `use_raw_alpha` the feature is built from α instead
/// of the fused weights (a comparison mode; the fused path is the default).
pub fn concept_attention(
    tape: &mut Tape,
    set: &ParamSet,
    p: &FusionParams,
    concepts: VarId,
    query: VarId,
    gamma: f64,
    use_raw_alpha: bool,
) -> Result<ConceptAttentionOut> {
    let alpha = text_concept_weights(tape, set, p, concepts, query)?;
    let beta = concept_self_weights(tape, set, p, concepts)?;
    let fused = fuse_weights(tape, alpha, beta, gamma)?;
    let picked = if use_raw_alpha { alpha } else { fused };
    let feature = concept_feature(tape, picked, concepts)?;
    Ok(ConceptAttentionOut { alpha, beta, fused, feature })
}
