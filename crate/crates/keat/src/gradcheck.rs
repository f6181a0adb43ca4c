//! Central finite-difference verification of tape gradients.
//!
//! The finite-difference side never reuses tape machinery beyond the forward
//! pass: each probe rebuilds the graph from scratch on a fresh tape and reads
//! off the scalar loss, so the two derivative estimates are independent.
//!
//! Error metric, used everywhere a gradient comparison happens:
//! `rel(a, b) = |a - b| / max(|a|, |b|, 1e-5)` — the floor keeps tiny
//! gradients from inflating the ratio.

use crate::error::Result;
use crate::tape::{GradStore, ParamSet, Tape, VarId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Worst-case comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub max_rel: f64,
    /// Flat index of the worst entry, with its two estimates.
    pub worst_entry: usize,
    pub ad_value: f64,
    pub fd_value: f64,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub reports: Vec<TensorReport>,
    pub max_rel: f64,
}

impl CheckOutcome {
    pub fn pass(&self, tolerance: f64) -> bool {
        self.max_rel <= tolerance
    }
}

/// Central differences `(f(θ+h) - f(θ-h)) / 2h` for every entry of every
/// parameter. The set is mutated during probing and restored bit-for-bit.
pub fn fd_gradients(
    set: &mut ParamSet,
    h: f64,
    f: &mut dyn FnMut(&ParamSet) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(set.len());
    for id in 0..set.len() {
        let numel = set.get(id).numel();
        let mut grad = Tensor::zeros(set.get(id).shape().to_vec());
        for k in 0..numel {
            let orig = set.get(id).data()[k];
            set.get_mut(id).data_mut()[k] = orig + h;
            let plus = f(set)?;
            set.get_mut(id).data_mut()[k] = orig - h;
            let minus = f(set)?;
            set.get_mut(id).data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Entrywise worst-case report of tape gradients against finite differences.
pub fn compare(set: &ParamSet, ad: &GradStore, fd: &[Tensor]) -> CheckOutcome {
    let mut reports = Vec::with_capacity(set.len());
    let mut overall = 0.0f64;
    for id in 0..set.len() {
        let (a, f) = (ad.get(id), &fd[id]);
        let mut worst = TensorReport {
            name: set.name(id).to_string(),
            max_rel: 0.0,
            worst_entry: 0,
            ad_value: a.data().first().copied().unwrap_or(0.0),
            fd_value: f.data().first().copied().unwrap_or(0.0),
        };
        for (k, (&av, &fv)) in a.data().iter().zip(f.data()).enumerate() {
            let r = rel_err(av, fv);
            if r > worst.max_rel {
                worst.max_rel = r;
                worst.worst_entry = k;
                worst.ad_value = av;
                worst.fd_value = fv;
            }
        }
        overall = overall.max(worst.max_rel);
        reports.push(worst);
    }
    CheckOutcome { reports, max_rel: overall }
}

/// Run one graph builder both ways — tape backward and finite differences —
/// and report the discrepancy. `build` must construct the scalar loss from the
/// given set alone, deterministically, so repeated calls see only the
/// parameter perturbation.
pub fn check_graph(
    set: &mut ParamSet,
    h: f64,
    build: &mut dyn FnMut(&mut Tape, &ParamSet) -> Result<VarId>,
) -> Result<CheckOutcome> {
    let ad = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, set)?;
        tape.backward(loss, set)?
    };
    let fd = fd_gradients(set, h, &mut |s| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s)?;
        Ok(tape.value(loss).item())
    })?;
    Ok(compare(set, &ad, &fd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Regularization;

    #[test]
    fn rel_err_floors_small_magnitudes() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        // Denominator floors at 1e-5, so a 1e-9 absolute gap stays tiny.
        assert!(rel_err(1e-9, 2e-9) < 1e-3);
        // Symmetric in its arguments.
        assert_eq!(rel_err(3.0, 5.0), rel_err(5.0, 3.0));
    }

    #[test]
    fn fd_matches_closed_form_quadratic() {
        // f = Σ w², whose gradient is exactly 2w.
        let mut set = ParamSet::new();
        let w = set.register(
            "w",
            Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.05, 2.0, -0.4, 0.9]).unwrap(),
            Regularization::Full,
        );
        let fd = fd_gradients(&mut set, 1e-5, &mut |s| {
            Ok(s.get(w).data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        for (g, v) in fd[0].data().iter().zip(set.get(w).data()) {
            assert!(rel_err(*g, 2.0 * v) < 1e-8, "fd {g} vs analytic {}", 2.0 * v);
        }
    }

    #[test]
    fn fd_restores_parameters_bitwise() {
        let mut set = ParamSet::new();
        let w = set.register("w", Tensor::row(vec![0.1, -0.7, 1.3]), Regularization::Full);
        let before = set.get(w).data().to_vec();
        fd_gradients(&mut set, 1e-5, &mut |s| Ok(s.get(w).data().iter().sum())).unwrap();
        let after = set.get(w).data();
        for (b, a) in before.iter().zip(after) {
            assert_eq!(b.to_bits(), a.to_bits());
        }
    }

    #[test]
    fn check_graph_passes_on_composed_graph_and_catches_corruption() {
        let mut set = ParamSet::new();
        let w = set.register(
            "w",
            Tensor::new(vec![2, 2], vec![0.4, -0.3, 0.8, 0.1]).unwrap(),
            Regularization::Full,
        );
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.25, 0.75]).unwrap();
        let mut build = |tape: &mut Tape, s: &ParamSet| {
            let wv = tape.param(s, w);
            let xv = tape.leaf(x.clone());
            let y = tape.matmul(wv, xv)?;
            let t = tape.tanh(y)?;
            tape.sum(t)
        };
        let outcome = check_graph(&mut set, DEFAULT_STEP, &mut build).unwrap();
        assert!(outcome.pass(DEFAULT_TOLERANCE), "max rel {}", outcome.max_rel);

        // A corrupted tape gradient must trip the same comparison.
        let mut tape = Tape::new();
        let loss = build(&mut tape, &set).unwrap();
        let mut ad = tape.backward(loss, &set).unwrap();
        ad.get_mut(w).data_mut()[2] += 1e-2;
        let fd = fd_gradients(&mut set, DEFAULT_STEP, &mut |s| {
            let mut t = Tape::new();
            let l = build(&mut t, s)?;
            Ok(t.value(l).item())
        })
        .unwrap();
        let bad = compare(&set, &ad, &fd);
        assert!(!bad.pass(DEFAULT_TOLERANCE));
        assert_eq!(bad.reports[0].worst_entry, 2);
    }
}
