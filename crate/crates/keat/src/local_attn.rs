//! Gaussian-biased local self-attention with tanh scoring, a predicted center
//! and window per sequence, and the absolute-value score variant.
//!
//! For an input sequence u₁…u_n the layer computes, per step t:
//!
//! - a relevance score `e_t = vᵉᵀ tanh(wᵉ u_t + bᵉ)` — or `|·|` of it in the
//!   improved variant, which lets extreme negative activations score as high
//!   as extreme positive ones,
//! - a predicted center `Q_t = I·sigmoid(v_qᵀ tanh(w_q u_t))` with `I = n`,
//! - a shared window width `D = I·sigmoid(z)` (clamped ≥ 1e-3), where `z`
//!   comes either from the mean key vector (`Learned`) or from a frequency
//!   parameter ω (`Frequency`),
//! - a Gaussian position bias `G_t = −(t − Q_t)² / (2σ²)` with `σ = D/2`.
//!
//! The distribution is `β = softmax(w^β·e + G)` over steps, and the output is
//! `S = Σ_t β_t (W_v u_t)`. Positions are 1-based so the center range `(0, n)`
//! brackets the sequence symmetrically.

use rand::Rng;

use crate::error::{KeatError, Result};
use crate::tape::{ParamId, ParamSet, Regularization, Tape, VarId};
use crate::tensor::Tensor;

/// Smallest admissible window width; keeps σ = D/2 away from zero.
pub const MIN_WINDOW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Original,
    /// Absolute value of the original score.
    ImprovedAbs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowSource {
    /// z from the mean of the key vectors.
    Learned,
    /// z from the fixed frequency ω (must be > 0).
    Frequency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalAttnMode {
    pub score: ScoreMode,
    pub window: WindowSource,
}

impl Default for LocalAttnMode {
    fn default() -> Self {
        LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Learned }
    }
}

/// Parameter ids for one local-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct LocalAttnParams {
    pub score_w: ParamId,
    pub score_v: ParamId,
    pub score_b: ParamId,
    /// Learned scalar multiplier on the score inside the softmax; starts at 1.
    pub beta_w: ParamId,
    pub center_w: ParamId,
    pub center_v: ParamId,
    pub window_w: ParamId,
    pub window_v: ParamId,
    /// Frequency-mode replacements for the window parameters.
    pub freq_w: ParamId,
    pub freq_u: ParamId,
    pub value_w: ParamId,
}

impl LocalAttnParams {
    /// `input` is the per-step feature width, `attn` the tanh-MLP width, and
    /// `out` the pooled output width.
    pub fn register(
        set: &mut ParamSet,
        input: usize,
        attn: usize,
        out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> LocalAttnParams {
        let mut w = |set: &mut ParamSet, name: &str, r: usize, c: usize| {
            set.register(&format!("local.{name}"), Tensor::randn(vec![r, c], std, rng), Regularization::Full)
        };
        let score_w = w(set, "score.w", input, attn);
        let score_v = w(set, "score.v", attn, 1);
        let center_w = w(set, "center.w", input, attn);
        let center_v = w(set, "center.v", attn, 1);
        let window_w = w(set, "window.w", input, attn);
        let window_v = w(set, "window.v", attn, 1);
        let freq_w = w(set, "freq.w", 1, attn);
        let freq_u = w(set, "freq.u", attn, 1);
        let value_w = w(set, "value.w", input, out);
        let score_b =
            set.register("local.score.b", Tensor::zeros(vec![1, attn]), Regularization::None);
        // A gain rather than a weight matrix: unpenalized, starts at identity.
        let beta_w = set.register("local.beta.w", Tensor::scalar(1.0), Regularization::None);
        LocalAttnParams {
            score_w,
            score_v,
            score_b,
            beta_w,
            center_w,
            center_v,
            window_w,
            window_v,
            freq_w,
            freq_u,
            value_w,
        }
    }
}

// ── Pieces ───────────────────────────────────────────────────────────────────

/// `e_t = vᵉᵀ tanh(wᵉ u_t + bᵉ)`, optionally wrapped in |·|. 1×1 output.
pub fn score(
    tape: &mut Tape,
    set: &ParamSet,
    p: &LocalAttnParams,
    u_t: VarId,
    mode: ScoreMode,
) -> Result<VarId> {
    let w = tape.param(set, p.score_w);
    let v = tape.param(set, p.score_v);
    let b = tape.param(set, p.score_b);
    let lin = tape.matmul(u_t, w)?;
    let biased = tape.add_bias(lin, b)?;
    let th = tape.tanh(biased)?;
    let s = tape.matmul(th, v)?;
    match mode {
        ScoreMode::Original => Ok(s),
        ScoreMode::ImprovedAbs => tape.abs(s),
    }
}

/// `Q_t = I·sigmoid(v_qᵀ tanh(w_q u_t))`, with `I` the sequence length.
pub fn predict_center(
    tape: &mut Tape,
    set: &ParamSet,
    p: &LocalAttnParams,
    u_t: VarId,
    i_scale: f64,
) -> Result<VarId> {
    let w = tape.param(set, p.center_w);
    let v = tape.param(set, p.center_v);
    let lin = tape.matmul(u_t, w)?;
    let th = tape.tanh(lin)?;
    let q = tape.matmul(th, v)?;
    let sig = tape.sigmoid(q)?;
    tape.affine(sig, i_scale, 0.0)
}

/// Window pre-activation from the mean key vector: `z = v_dᵀ tanh(w_d K̄)`.
pub fn window_scalar_learned(
    tape: &mut Tape,
    set: &ParamSet,
    p: &LocalAttnParams,
    u: VarId,
) -> Result<VarId> {
    let kbar = tape.mean_rows(u)?;
    let w = tape.param(set, p.window_w);
    let v = tape.param(set, p.window_v);
    let lin = tape.matmul(kbar, w)?;
    let th = tape.tanh(lin)?;
    tape.matmul(th, v)
}

/// Frequency-driven window pre-activation: `z = U_dᵀ tanh(w_d / ω)`. Larger ω
/// shrinks the tanh argument, so z falls toward 0.
pub fn window_scalar_frequency(
    tape: &mut Tape,
    set: &ParamSet,
    p: &LocalAttnParams,
    omega: f64,
) -> Result<VarId> {
    if omega <= 0.0 {
        return Err(KeatError::contract(format!("window frequency ω must be > 0, got {omega}")));
    }
    let w = tape.param(set, p.freq_w);
    let u = tape.param(set, p.freq_u);
    let scaled = tape.affine(w, 1.0 / omega, 0.0)?;
    let th = tape.tanh(scaled)?;
    tape.matmul(th, u)
}

/// `D = I·sigmoid(z)` clamped to at least [`MIN_WINDOW`].
pub fn window_width(tape: &mut Tape, z: VarId, i_scale: f64) -> Result<VarId> {
    let sig = tape.sigmoid(z)?;
    let d = tape.affine(sig, i_scale, 0.0)?;
    tape.clamp_min(d, MIN_WINDOW)
}

/// Plain-number Gaussian bias, used by callers that only need the value.
pub fn gaussian_bias_value(t: f64, center: f64, sigma: f64) -> f64 {
    let d = t - center;
    -(d * d) / (2.0 * sigma * sigma)
}

/// On-tape Gaussian bias `−(t − Q)²/(2σ²)` for a constant position t.
pub fn gaussian_bias(tape: &mut Tape, t: f64, center: VarId, sigma: VarId) -> Result<VarId> {
    let diff = tape.affine(center, -1.0, t)?; // t − Q
    let sq = tape.mul(diff, diff)?;
    let s2 = tape.mul(sigma, sigma)?;
    let denom = tape.affine(s2, 2.0, 0.0)?;
    let frac = tape.div(sq, denom)?;
    tape.affine(frac, -1.0, 0.0)
}

// ── Layer ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LocalOutput {
    /// 1×out pooled feature `S = Σ β_t (W_v u_t)`.
    pub pooled: VarId,
    /// n×1 distribution over steps.
    pub beta: VarId,
    /// n×out value rows scaled by β (per-step contributions).
    pub weighted: VarId,
    /// Shared window width D (1×1), after clamping.
    pub width: VarId,
}

pub fn local_attention_layer(
    tape: &mut Tape,
    set: &ParamSet,
    p: &LocalAttnParams,
    u: VarId,
    mode: LocalAttnMode,
) -> Result<LocalOutput> {
    let n = tape.value(u).rows();
    let i_scale = n as f64;
    let value_w = tape.param(set, p.value_w);
    let values = tape.matmul(u, value_w)?;
    let z = match mode.window {
        WindowSource::Learned => window_scalar_learned(tape, set, p, u)?,
        WindowSource::Frequency(omega) => window_scalar_frequency(tape, set, p, omega)?,
    };
    let width = window_width(tape, z, i_scale)?;
    let sigma = tape.affine(width, 0.5, 0.0)?;
    let beta_w = tape.param(set, p.beta_w);
    let mut args = Vec::with_capacity(n);
    for t in 0..n {
        let u_t = tape.slice_rows(u, t, 1)?;
        let e = score(tape, set, p, u_t, mode.score)?;
        let center = predict_center(tape, set, p, u_t, i_scale)?;
        let g = gaussian_bias(tape, (t + 1) as f64, center, sigma)?;
        let scaled_e = tape.mul(e, beta_w)?;
        args.push(tape.add(scaled_e, g)?);
    }
    let column = tape.stack_rows(&args)?; // n×1
    let beta = tape.softmax(column, 0)?;
    let weighted = tape.scale_rows(values, beta)?;
    let beta_row = tape.transpose(beta)?;
    let pooled = tape.matmul(beta_row, values)?;
    Ok(LocalOutput { pooled, beta, weighted, width })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(input: usize, attn: usize, out: usize, seed: u64) -> (ParamSet, LocalAttnParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let p = LocalAttnParams::register(&mut set, input, attn, out, 0.4, &mut rng);
        (set, p)
    }

    #[test]
    fn score_is_odd_in_its_input_and_matches_direct_formula() {
        let (set, p) = params(3, 2, 2, 1);
        let u = Tensor::row(vec![0.7, -0.2, 0.4]);

        // Zero input with zero bias scores zero.
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::row(vec![0.0; 3]));
        let s0 = score(&mut tape, &set, &p, zero, ScoreMode::Original).unwrap();
        assert_eq!(tape.value(s0).item(), 0.0);

        // Sign flip of u flips the score (bias is zero at init).
        let mut tp = Tape::new();
        let up = tp.leaf(u.clone());
        let sp = score(&mut tp, &set, &p, up, ScoreMode::Original).unwrap();
        let mut tn = Tape::new();
        let neg = Tensor::row(u.data().iter().map(|v| -v).collect());
        let un = tn.leaf(neg);
        let sn = score(&mut tn, &set, &p, un, ScoreMode::Original).unwrap();
        assert!((tp.value(sp).item() + tn.value(sn).item()).abs() <= 1e-12);

        // Direct formula.
        let mut want = 0.0;
        for j in 0..2 {
            let mut lin = set.get(p.score_b).data()[j];
            for i in 0..3 {
                lin += u.data()[i] * set.get(p.score_w).at(i, j);
            }
            want += lin.tanh() * set.get(p.score_v).at(j, 0);
        }
        assert!((tp.value(sp).item() - want).abs() <= 1e-12);
    }

    #[test]
    fn improved_score_is_exactly_abs_of_original() {
        let (set, p) = params(4, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u = Tensor::randn(vec![1, 4], 1.5, &mut rng);
            let mut t1 = Tape::new();
            let u1 = t1.leaf(u.clone());
            let orig = score(&mut t1, &set, &p, u1, ScoreMode::Original).unwrap();
            let mut t2 = Tape::new();
            let u2 = t2.leaf(u);
            let imp = score(&mut t2, &set, &p, u2, ScoreMode::ImprovedAbs).unwrap();
            let (o, i) = (t1.value(orig).item(), t2.value(imp).item());
            assert_eq!(i, o.abs());
            assert!(i >= 0.0);
        }
    }

    #[test]
    fn center_and_width_stay_inside_the_sequence_range() {
        // Zero weights drive both sigmoids to 0.5, so Q = D = n/2.
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LocalAttnParams::register(&mut set, 3, 2, 2, 0.3, &mut rng);
        for id in [p.center_w, p.center_v, p.window_w, p.window_v] {
            for v in set.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let n = 6usize;
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::randn(vec![n, 3], 1.0, &mut rng));
        let ut = tape.slice_rows(u, 2, 1).unwrap();
        let q = predict_center(&mut tape, &set, &p, ut, n as f64).unwrap();
        assert_eq!(tape.value(q).item(), 3.0);
        let z = window_scalar_learned(&mut tape, &set, &p, u).unwrap();
        let d = window_width(&mut tape, z, n as f64).unwrap();
        assert_eq!(tape.value(d).item(), 3.0);

        // Random weights: sigmoid times I keeps both in (0, n).
        let (set2, p2) = params(3, 2, 2, 5);
        for trial in 0..20 {
            let mut tape = Tape::new();
            let u = tape.leaf(Tensor::randn(vec![n, 3], 2.0, &mut rng));
            let ut = tape.slice_rows(u, trial % n, 1).unwrap();
            let q = predict_center(&mut tape, &set2, &p2, ut, n as f64).unwrap();
            let qv = tape.value(q).item();
            assert!(qv > 0.0 && qv < n as f64);
            let z = window_scalar_learned(&mut tape, &set2, &p2, u).unwrap();
            let d = window_width(&mut tape, z, n as f64).unwrap();
            let dv = tape.value(d).item();
            assert!(dv > 0.0 && dv < n as f64);
        }
    }

    #[test]
    fn center_matches_direct_formula_on_fixed_weights() {
        let (set, p) = params(2, 2, 2, 6);
        let u = Tensor::row(vec![0.9, -0.4]);
        let n = 4.0;
        let mut tape = Tape::new();
        let uv = tape.leaf(u.clone());
        let q = predict_center(&mut tape, &set, &p, uv, n).unwrap();
        let mut pre = 0.0;
        for j in 0..2 {
            let mut lin = 0.0;
            for i in 0..2 {
                lin += u.data()[i] * set.get(p.center_w).at(i, j);
            }
            pre += lin.tanh() * set.get(p.center_v).at(j, 0);
        }
        let want = n / (1.0 + (-pre).exp());
        assert!((tape.value(q).item() - want).abs() <= 1e-12);
    }

    #[test]
    fn frequency_window_shrinks_with_omega() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LocalAttnParams::register(&mut set, 2, 1, 2, 0.3, &mut rng);
        set.get_mut(p.freq_w).data_mut()[0] = 1.0;
        set.get_mut(p.freq_u).data_mut()[0] = 1.0;
        let z_at = |set: &ParamSet, omega: f64| -> f64 {
            let mut tape = Tape::new();
            let z = window_scalar_frequency(&mut tape, set, &p, omega).unwrap();
            tape.value(z).item()
        };
        // Direct evaluation: z(2) = tanh(1/2).
        assert!((z_at(&set, 2.0) - 0.5f64.tanh()).abs() <= 1e-12);
        assert!((z_at(&set, 2.0) - 0.4621).abs() < 1e-4);
        // Monotone on the positive branch, vanishing in the large-ω limit.
        assert!(z_at(&set, 1.0) > z_at(&set, 10.0));
        assert!(z_at(&set, 1e9).abs() < 1e-8);
        // Non-positive ω refused.
        let mut tape = Tape::new();
        assert!(matches!(
            window_scalar_frequency(&mut tape, &set, &p, 0.0),
            Err(KeatError::Contract(_))
        ));
        let _ = &mut tape;
    }

    #[test]
    fn gaussian_bias_geometry() {
        let (q, sigma) = (3.7, 1.3);
        assert_eq!(gaussian_bias_value(q, q, sigma), 0.0);
        let rad = sigma * 2f64.sqrt();
        assert!((gaussian_bias_value(q + rad, q, sigma) + 1.0).abs() <= 1e-12);
        assert!((gaussian_bias_value(q - rad, q, sigma) + 1.0).abs() <= 1e-12);
        for delta in [0.1, 0.5, 2.0, 11.0] {
            let plus = gaussian_bias_value(q + delta, q, sigma);
            let minus = gaussian_bias_value(q - delta, q, sigma);
            assert_eq!(plus, minus);
            assert!(plus < 0.0);
        }
        // Tape version agrees with the plain function.
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(q));
        let s = tape.leaf(Tensor::scalar(sigma));
        let g = gaussian_bias(&mut tape, 5.0, c, s).unwrap();
        assert!((tape.value(g).item() - gaussian_bias_value(5.0, q, sigma)).abs() <= 1e-15);
    }

    #[test]
    fn layer_distribution_properties() {
        let (set, p) = params(3, 2, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // n=1: β = [1], S = W_v u₁.
        let u1 = Tensor::randn(vec![1, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let uv = tape.leaf(u1.clone());
        let out = local_attention_layer(&mut tape, &set, &p, uv, LocalAttnMode::default()).unwrap();
        assert_eq!(tape.value(out.beta).data(), &[1.0]);
        for c in 0..4 {
            let want: f64 =
                (0..3).map(|i| u1.data()[i] * set.get(p.value_w).at(i, c)).sum();
            assert!((tape.value(out.pooled).data()[c] - want).abs() <= 1e-12);
        }

        // β sums to 1 across lengths and modes.
        for n in [1usize, 5, 64] {
            for mode in [
                LocalAttnMode { score: ScoreMode::Original, window: WindowSource::Learned },
                LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Frequency(2.5) },
            ] {
                let mut tape = Tape::new();
                let u = tape.leaf(Tensor::randn(vec![n, 3], 1.0, &mut rng));
                let out = local_attention_layer(&mut tape, &set, &p, u, mode).unwrap();
                let b = tape.value(out.beta);
                assert_eq!(b.shape(), &[n, 1]);
                let s: f64 = b.data().iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
                assert!(b.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn constant_scores_reduce_beta_to_softmax_of_bias() {
        // Zero score weights → e_t = 0 for every t → β = softmax(G).
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LocalAttnParams::register(&mut set, 3, 2, 2, 0.5, &mut rng);
        for id in [p.score_w, p.score_v] {
            for v in set.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let n = 6;
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::randn(vec![n, 3], 1.0, &mut rng));
        let out =
            local_attention_layer(&mut tape, &set, &p, u, LocalAttnMode::default()).unwrap();
        // Rebuild G by hand from the same parameters.
        let width = tape.value(out.width).item();
        let sigma = width / 2.0;
        let mut g = Vec::with_capacity(n);
        for t in 0..n {
            let mut tape2 = Tape::new();
            let u2 = tape2.leaf(Tensor::new(vec![n, 3], tape.value(u).data().to_vec()).unwrap());
            let ut = tape2.slice_rows(u2, t, 1).unwrap();
            let c = predict_center(&mut tape2, &set, &p, ut, n as f64).unwrap();
            g.push(gaussian_bias_value((t + 1) as f64, tape2.value(c).item(), sigma));
        }
        let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = g.iter().map(|v| (v - m).exp()).sum();
        for t in 0..n {
            let want = (g[t] - m).exp() / z;
            assert!((tape.value(out.beta).data()[t] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn tight_window_concentrates_mass_at_the_center() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = LocalAttnParams::register(&mut set, 3, 1, 2, 0.3, &mut rng);
        // Center at n/2 (zero center weights); window slammed shut via the
        // frequency path (z ≈ −50 → D clamps to the minimum).
        for id in [p.center_w, p.center_v, p.score_w, p.score_v] {
            for v in set.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        set.get_mut(p.freq_w).data_mut()[0] = 5.0;
        set.get_mut(p.freq_u).data_mut()[0] = -50.0;
        let n = 6;
        let mode = LocalAttnMode {
            score: ScoreMode::Original,
            window: WindowSource::Frequency(1.0),
        };
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::randn(vec![n, 3], 1.0, &mut rng));
        let out = local_attention_layer(&mut tape, &set, &p, u, mode).unwrap();
        assert_eq!(tape.value(out.width).item(), MIN_WINDOW);
        // Q = 3 for every step; position t = 3 (index 2) takes all the mass.
        let beta = tape.value(out.beta);
        let argmax = (0..n).max_by(|&a, &b| beta.data()[a].partial_cmp(&beta.data()[b]).unwrap());
        assert_eq!(argmax, Some(2));
        assert!(beta.data()[2] > 0.999);
    }

    #[test]
    fn layer_gradients_match_finite_differences_in_every_mode() {
        for (seed, mode) in [
            (20, LocalAttnMode { score: ScoreMode::Original, window: WindowSource::Learned }),
            (21, LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Learned }),
            (22, LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Frequency(3.0) }),
        ] {
            let (mut set, p) = params(3, 2, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let u = Tensor::randn(vec![5, 3], 0.8, &mut rng);
            let outcome = check_graph(&mut set, DEFAULT_STEP, &mut |tape, s| {
                let uv = tape.leaf(u.clone());
                let out = local_attention_layer(tape, s, &p, uv, mode)?;
                let sq = tape.mul(out.pooled, out.pooled)?;
                tape.sum(sq)
            })
            .unwrap();
            assert!(
                outcome.pass(DEFAULT_TOLERANCE),
                "mode {mode:?}: max rel {} at {}",
                outcome.max_rel,
                outcome
                    .reports
                    .iter()
                    .max_by(|a, b| a.max_rel.partial_cmp(&b.max_rel).unwrap())
                    .map(|r| r.name.clone())
                    .unwrap_or_default()
            );
        }
    }
}
