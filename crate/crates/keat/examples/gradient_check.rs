//! Verifies the hand-written backward pass against central finite
//! differences: every tape gradient is compared entry by entry with
//! `(f(θ+h) − f(θ−h)) / 2h`, and the worst relative error per parameter
//! tensor is reported.
//!
//! Also shows `check_graph` on a small custom graph, which is the same
//! machinery the full-model check uses.
//!
//! Run with `cargo run --release --example gradient_check`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use keat::cli::gradcheck_fixture;
use keat::gradcheck::{check_graph, DEFAULT_STEP, DEFAULT_TOLERANCE};
use keat::model::Example;
use keat::tape::{ParamSet, Regularization};
use keat::tensor::Tensor;

fn main() -> keat::Result<()> {
    // A full model on a tiny vocabulary, with a two-document batch that
    // exercises both the concept path and the no-concept path.
    let (mut model, examples) = gradcheck_fixture()?;
    let batch: Vec<&Example> = examples.iter().collect();
    let outcome = model.gradient_check(&batch, DEFAULT_STEP)?;

    println!(
        "checked {} parameter tensors (step h = {DEFAULT_STEP:e}, tolerance {DEFAULT_TOLERANCE:e})",
        outcome.reports.len()
    );
    let mut worst = outcome.reports.clone();
    worst.sort_by(|a, b| b.max_rel.partial_cmp(&a.max_rel).unwrap());
    println!("\nlargest relative errors:");
    for r in worst.iter().take(8) {
        println!(
            "  {:<16} max_rel {:.3e}   (tape {:+.6e} vs differences {:+.6e})",
            r.name, r.max_rel, r.ad_value, r.fd_value
        );
    }
    println!(
        "\nfull model: max_rel {:.3e}  ->  {}",
        outcome.max_rel,
        if outcome.pass(DEFAULT_TOLERANCE) { "pass" } else { "FAIL" }
    );

    // The same check works on any graph built against a parameter set. Here:
    // loss = Σ tanh(x·W)², a two-parameter toy.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut set = ParamSet::new();
    let w = set.register("toy.w", Tensor::randn(vec![4, 3], 0.5, &mut rng), Regularization::Full);
    let x = set.register("toy.x", Tensor::randn(vec![2, 4], 0.5, &mut rng), Regularization::None);
    let outcome = check_graph(&mut set, DEFAULT_STEP, &mut |tape, s| {
        let xv = tape.param(s, x);
        let wv = tape.param(s, w);
        let prod = tape.matmul(xv, wv)?;
        let act = tape.tanh(prod)?;
        let sq = tape.mul(act, act)?;
        tape.sum(sq)
    })?;
    println!(
        "custom graph Σ tanh(x·W)²: max_rel {:.3e}  ->  {}",
        outcome.max_rel,
        if outcome.pass(DEFAULT_TOLERANCE) { "pass" } else { "FAIL" }
    );
    Ok(())
}
