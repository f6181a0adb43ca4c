//! Short-text encoder: char-CNN word vectors, word embeddings, Bi-GRU,
//! multi-head self-attention, and attention pooling into the text feature q.
//!
//! Everything here builds graph nodes on a [`Tape`], so one `backward` call at
//! the loss covers the whole encoder. Parameter bundles hold [`ParamId`]s into
//! the model's [`ParamSet`]; `register` constructors create the tensors with
//! the crate-wide init scheme (weights N(0, σ), biases zero).
//!
//! Matrix convention: activations are rows, so every linear map is
//! `x · W + b` with `W` of shape in×out.

use rand::Rng;

use crate::corpus::Document;
use crate::error::{KeatError, Result};
use crate::tape::{ParamId, ParamSet, Regularization, Tape, VarId};
use crate::tensor::Tensor;

// ── Parameter bundles ────────────────────────────────────────────────────────

/// Character embedding table plus the affine convolution kernel.
#[derive(Debug, Clone, Copy)]
pub struct CharCnnParams {
    pub emb: ParamId,
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl CharCnnParams {
    pub fn register(
        set: &mut ParamSet,
        alphabet: usize,
        char_dim: usize,
        window: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> CharCnnParams {
        let emb = set.register(
            "emb.char",
            Tensor::randn(vec![alphabet, char_dim], std, rng),
            Regularization::SkipFirstRows(1), // row 0 is the char UNK
        );
        let kernel = set.register(
            "char_conv.w",
            Tensor::randn(vec![window * char_dim, char_dim], std, rng),
            Regularization::Full,
        );
        let bias = set.register("char_conv.b", Tensor::zeros(vec![1, char_dim]), Regularization::None);
        CharCnnParams { emb, kernel, bias }
    }
}

/// One GRU direction: update (z), reset (r), candidate (h) gates, each an
/// (input+hidden)×hidden map over the concatenated `[x; h]` row.
#[derive(Debug, Clone, Copy)]
pub struct GruDirParams {
    pub wz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
}

impl GruDirParams {
    pub fn register(
        set: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> GruDirParams {
        let mut w = |set: &mut ParamSet, gate: &str| {
            set.register(
                &format!("{prefix}.{gate}.w"),
                Tensor::randn(vec![input + hidden, hidden], std, rng),
                Regularization::Full,
            )
        };
        let wz = w(set, "z");
        let wr = w(set, "r");
        let wh = w(set, "h");
        let b = |set: &mut ParamSet, gate: &str| {
            set.register(
                &format!("{prefix}.{gate}.b"),
                Tensor::zeros(vec![1, hidden]),
                Regularization::None,
            )
        };
        let bz = b(set, "z");
        let br = b(set, "r");
        let bh = b(set, "h");
        GruDirParams { wz, bz, wr, br, wh, bh }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruParams {
    pub fwd: GruDirParams,
    pub bwd: GruDirParams,
}

impl BiGruParams {
    pub fn register(
        set: &mut ParamSet,
        input: usize,
        hidden: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> BiGruParams {
        BiGruParams {
            fwd: GruDirParams::register(set, "gru.fwd", input, hidden, std, rng),
            bwd: GruDirParams::register(set, "gru.bwd", input, hidden, std, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub out: ParamId,
}

impl MultiHeadParams {
    /// `model_dim` must divide evenly into `heads` subspaces.
    pub fn register(
        set: &mut ParamSet,
        model_dim: usize,
        heads: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<MultiHeadParams> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(KeatError::config(format!(
                "attention dim {model_dim} not divisible into {heads} heads"
            )));
        }
        let dk = model_dim / heads;
        let head_params = (0..heads)
            .map(|i| {
                let mut proj = |set: &mut ParamSet, which: &str| {
                    set.register(
                        &format!("attn.head{i}.{which}"),
                        Tensor::randn(vec![model_dim, dk], std, rng),
                        Regularization::Full,
                    )
                };
                let wq = proj(set, "q");
                let wk = proj(set, "k");
                let wv = proj(set, "v");
                HeadParams { wq, wk, wv }
            })
            .collect();
        let out = set.register(
            "attn.out",
            Tensor::randn(vec![model_dim, model_dim], std, rng),
            Regularization::Full,
        );
        Ok(MultiHeadParams { heads: head_params, out })
    }
}

// ── Forward ops ──────────────────────────────────────────────────────────────

/// Character-level word vector: embed the characters, run a zero-padded
/// centered affine window over the positions, and max-pool into one row.
pub fn char_cnn_embed(
    tape: &mut Tape,
    set: &ParamSet,
    p: &CharCnnParams,
    ids: &[usize],
) -> Result<VarId> {
    if ids.is_empty() {
        return Err(KeatError::contract("char_cnn_embed: word with no characters"));
    }
    let char_dim = set.get(p.emb).cols();
    let window = set.get(p.kernel).rows() / char_dim;
    let pad = (window - 1) / 2;
    let emb = tape.param(set, p.emb);
    let chars = tape.gather(emb, ids)?; // L×char_dim
    let len = ids.len();
    let padded = if pad > 0 {
        let zeros = tape.leaf(Tensor::zeros(vec![pad, char_dim]));
        let top = tape.concat(zeros, chars, 0)?;
        let zeros2 = tape.leaf(Tensor::zeros(vec![pad, char_dim]));
        tape.concat(top, zeros2, 0)?
    } else {
        chars
    };
    // Shifted views of the padded sequence give every centered window at once.
    let mut windows = tape.slice_rows(padded, 0, len)?;
    for k in 1..window {
        let shifted = tape.slice_rows(padded, k, len)?;
        windows = tape.concat(windows, shifted, 1)?;
    }
    let kernel = tape.param(set, p.kernel);
    let bias = tape.param(set, p.bias);
    let lin = tape.matmul(windows, kernel)?;
    let act = tape.add_bias(lin, bias)?; // affine only; pooling supplies the nonlinearity
    tape.max_pool(act)
}

/// Word rows: embedding-table lookup concatenated with the char-CNN vector.
pub fn embed_tokens(
    tape: &mut Tape,
    set: &ParamSet,
    word_emb: ParamId,
    cnn: &CharCnnParams,
    doc: &Document,
) -> Result<VarId> {
    if doc.word_ids.is_empty() {
        return Err(KeatError::contract("embed_tokens: empty document"));
    }
    let we = tape.param(set, word_emb);
    let words = tape.gather(we, &doc.word_ids)?;
    let mut char_rows = Vec::with_capacity(doc.char_ids.len());
    for ids in &doc.char_ids {
        char_rows.push(char_cnn_embed(tape, set, cnn, ids)?);
    }
    let chars = tape.stack_rows(&char_rows)?;
    tape.concat(words, chars, 1)
}

/// One GRU direction over the rows of `x`; `out[t]` is the hidden state after
/// reading position t (document order regardless of direction).
pub fn gru_direction(
    tape: &mut Tape,
    set: &ParamSet,
    p: &GruDirParams,
    x: VarId,
    reverse: bool,
) -> Result<Vec<VarId>> {
    let n = tape.value(x).rows();
    let hidden = set.get(p.bz).cols();
    let mut h = tape.leaf(Tensor::zeros(vec![1, hidden]));
    let (wz, bz) = (tape.param(set, p.wz), tape.param(set, p.bz));
    let (wr, br) = (tape.param(set, p.wr), tape.param(set, p.br));
    let (wh, bh) = (tape.param(set, p.wh), tape.param(set, p.bh));
    let order: Vec<usize> =
        if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    let mut out = vec![h; n];
    for t in order {
        let xt = tape.slice_rows(x, t, 1)?;
        let xh = tape.concat(xt, h, 1)?;
        let z_lin = tape.matmul(xh, wz)?;
        let z_aff = tape.add_bias(z_lin, bz)?;
        let z = tape.sigmoid(z_aff)?;
        let r_lin = tape.matmul(xh, wr)?;
        let r_aff = tape.add_bias(r_lin, br)?;
        let r = tape.sigmoid(r_aff)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(xt, rh, 1)?;
        let c_lin = tape.matmul(xrh, wh)?;
        let c_aff = tape.add_bias(c_lin, bh)?;
        let cand = tape.tanh(c_aff)?;
        let keep = tape.affine(z, -1.0, 1.0)?; // 1 − z
        let kept = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        h = tape.add(kept, new)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bi-GRU: forward and backward passes from zero initial states, hidden
/// states concatenated per position into n×2u.
pub fn bigru_forward(
    tape: &mut Tape,
    set: &ParamSet,
    p: &BiGruParams,
    x: VarId,
) -> Result<VarId> {
    let f = gru_direction(tape, set, &p.fwd, x, false)?;
    let b = gru_direction(tape, set, &p.bwd, x, true)?;
    let rows: Vec<VarId> = f
        .into_iter()
        .zip(b)
        .map(|(ft, bt)| tape.concat(ft, bt, 1))
        .collect::<Result<_>>()?;
    tape.stack_rows(&rows)
}

/// `softmax(QKᵀ/√d_k)·V`; also returns the row-stochastic weight matrix.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
) -> Result<(VarId, VarId)> {
    let dk = tape.value(q).cols();
    if tape.value(k).cols() != dk {
        return Err(KeatError::shape(format!(
            "attention: query dim {dk} vs key dim {}",
            tape.value(k).cols()
        )));
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.affine(raw, 1.0 / (dk as f64).sqrt(), 0.0)?;
    let weights = tape.softmax(scaled, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Self-attention with per-head projections of the same input, concatenated
/// and mixed by the output projection. Returns the n×2u output and each
/// head's n×n weight matrix.
pub fn multihead_self_attention(
    tape: &mut Tape,
    set: &ParamSet,
    p: &MultiHeadParams,
    h: VarId,
) -> Result<(VarId, Vec<VarId>)> {
    let mut head_outs = Vec::with_capacity(p.heads.len());
    let mut head_weights = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let wq = tape.param(set, head.wq);
        let wk = tape.param(set, head.wk);
        let wv = tape.param(set, head.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let (out, w) = scaled_dot_attention(tape, q, k, v)?;
        head_outs.push(out);
        head_weights.push(w);
    }
    let mut cat = head_outs[0];
    for &o in &head_outs[1..] {
        cat = tape.concat(cat, o, 1)?;
    }
    let wo = tape.param(set, p.out);
    let mixed = tape.matmul(cat, wo)?;
    Ok((mixed, head_weights))
}

/// Reduce the per-head weight matrices to one weight per token: average the
/// heads, take the column mean (attention received per position), and
/// renormalize onto the simplex.
pub fn pooling_weights(tape: &mut Tape, head_weights: &[VarId]) -> Result<VarId> {
    if head_weights.is_empty() {
        return Err(KeatError::contract("pooling_weights: no attention heads"));
    }
    let mut sum = head_weights[0];
    for &w in &head_weights[1..] {
        sum = tape.add(sum, w)?;
    }
    let avg = tape.affine(sum, 1.0 / head_weights.len() as f64, 0.0)?;
    let col_mean = tape.mean_rows(avg)?;
    tape.normalize(col_mean)
}

/// Scale row t of `h` by `a_t` and max-pool the result into the text feature.
/// `a` must lie on the probability simplex (Σ = 1 within 1e-6).
pub fn attention_pool(tape: &mut Tape, h: VarId, a: VarId) -> Result<(VarId, VarId)> {
    let av = tape.value(a);
    if av.numel() != tape.value(h).rows() {
        return Err(KeatError::shape(format!(
            "attention_pool: {} weights for {} rows",
            av.numel(),
            tape.value(h).rows()
        )));
    }
    let sum: f64 = av.data().iter().sum();
    if (sum - 1.0).abs() > 1e-6 || av.data().iter().any(|&v| v < 0.0) {
        return Err(KeatError::contract(format!(
            "attention_pool: weights must be a probability vector (sum {sum})"
        )));
    }
    let weighted = tape.scale_rows(h, a)?;
    let pooled = tape.max_pool(weighted)?;
    Ok((weighted, pooled))
}
