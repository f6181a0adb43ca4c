//! Scans the text/concept mixing factor γ: trains one model per value on a
//! slice of the checked-in synthetic news corpus (same seed throughout) and
//! reports each model's held-out accuracy. γ = 1 weights concepts purely by
//! the text query, γ = 0 purely by concept-set agreement.
//!
//! On clean synthetic data every mix tends to reach the same predictions, so
//! the example also trains the two endpoints directly and prints their loss
//! trajectories, which do diverge — the accuracy column is simply a coarse
//! metric. On noisier corpora this table is how γ gets picked.
//!
//! Runs seven short trainings, so expect a few seconds.
//!
//! Run with `cargo run --release --example gamma_sweep`.

use std::path::PathBuf;

use keat::concept::ConceptLexicon;
use keat::corpus::read_records;
use keat::model::HyperParams;
use keat::pipeline::{sweep, TrainedModel};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn main() -> keat::Result<()> {
    let train: Vec<_> = read_records(&data("agnews_train.tsv"))?.into_iter().take(80).collect();
    let eval = read_records(&data("agnews_test.tsv"))?;
    let lexicon = ConceptLexicon::load(&data("lexicon.tsv"))?;
    println!(
        "{} training / {} held-out documents, {} lexicon concepts",
        train.len(),
        eval.len(),
        lexicon.num_concepts()
    );

    let hp = HyperParams {
        word_dim: 32,
        char_dim: 12,
        concept_dim: 16,
        hidden: 16,
        heads: 2,
        fusion_text_dim: 16,
        fusion_set_dim: 16,
        dropout: 0.1,
        learning_rate: 0.003,
        batch_size: 25,
        epochs: 3,
        seed: 42,
        ..HyperParams::default()
    };

    let gammas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows = sweep(&train, &eval, &lexicon, &hp, &gammas)?;
    println!("\ngamma  accuracy");
    for (gamma, accuracy) in rows {
        let bar = "#".repeat((accuracy * 40.0).round() as usize);
        println!("{gamma:<5}  {accuracy:.4}  {bar}");
    }

    // The tie above is the metric, not the mix: train the endpoints directly
    // and the losses separate.
    println!("\nloss per epoch at the endpoints (identical seed {}):", hp.seed);
    let mut curves = Vec::new();
    for gamma in [0.0, 1.0] {
        let hp_g = HyperParams { gamma, ..hp.clone() };
        let (_, run) = TrainedModel::train(&train, lexicon.clone(), &hp_g)?;
        curves.push(run.metrics);
    }
    println!("epoch  {:>14}  {:>14}  {:>11}", "loss @ γ=0", "loss @ γ=1", "difference");
    for (a, b) in curves[0].iter().zip(&curves[1]) {
        println!(
            "{:>5}  {:>14.9}  {:>14.9}  {:>11.2e}",
            a.epoch,
            a.loss,
            b.loss,
            (a.loss - b.loss).abs()
        );
    }
    Ok(())
}
