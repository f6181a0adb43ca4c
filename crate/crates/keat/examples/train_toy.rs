//! End-to-end training on a 20-sentence toy corpus: two classes, a 10-entry
//! concept lexicon, small dimensions, and enough epochs to overfit. Streams
//! the per-epoch loss, then evaluates on the training set and classifies a
//! few unseen sentences.
//!
//! Run with `cargo run --release --example train_toy`.

use keat::concept::ConceptLexicon;
use keat::corpus::RawRecord;
use keat::model::HyperParams;
use keat::pipeline::TrainedModel;

fn toy_records() -> Vec<RawRecord> {
    let pets = [
        "the puppy chased a ball",
        "kitten naps in the warm sun",
        "a leash hangs by the door",
        "the vet checked the paw",
        "soft fur and a long tail",
        "the collar fits the puppy",
        "a treat for the good kitten",
        "the ball rolled past the paw",
        "fur covered the old collar",
        "the tail wagged for a treat",
    ];
    let finance = [
        "the invoice lists the budget",
        "an audit of the ledger",
        "tax on the new loan",
        "credit terms for payroll",
        "interest raised the budget",
        "the refund cleared the ledger",
        "payroll tax forms arrived",
        "a loan against the invoice",
        "the audit found the refund",
        "credit interest fell today",
    ];
    let mut out = Vec::new();
    for t in pets {
        out.push(RawRecord { label: "pets".into(), text: t.into() });
    }
    for t in finance {
        out.push(RawRecord { label: "finance".into(), text: t.into() });
    }
    out
}

fn toy_lexicon() -> keat::Result<ConceptLexicon> {
    ConceptLexicon::parse(
        "\
puppy\tanimal\t0.9
kitten\tanimal\t0.85
leash\tgear\t0.7
vet\tcaregiver\t0.8
treat\tfood\t0.6
invoice\tdocument\t0.9
ledger\tdocument\t0.85
audit\tprocess\t0.8
loan\tcontract\t0.75
tax\tlevy\t0.7
",
        "toy-lexicon",
    )
}

fn main() -> keat::Result<()> {
    let records = toy_records();
    let lexicon = toy_lexicon()?;
    let hp = HyperParams {
        word_dim: 12,
        char_dim: 6,
        concept_dim: 8,
        hidden: 6,
        heads: 2,
        fusion_text_dim: 4,
        fusion_set_dim: 4,
        dropout: 0.0,
        learning_rate: 0.01,
        init_std: 0.2,
        batch_size: 5,
        epochs: 40,
        seed: 11,
        ..HyperParams::default()
    };

    println!("training on {} documents, 2 classes", records.len());
    let (trained, _run) = TrainedModel::train_with(&records, lexicon, &hp, &mut |m| {
        if m.epoch % 5 == 0 || m.epoch == 1 {
            println!("epoch {:>3}  loss {:.6}  accuracy {:.3}", m.epoch, m.loss, m.accuracy);
        }
    })?;

    let eval = trained.evaluate_records(&records)?;
    println!("\ntraining-set accuracy: {:.3}", eval.accuracy);

    println!("\npredictions on unseen sentences:");
    for text in [
        "the kitten licked a paw",
        "interest on the payroll loan",
        "a collar and a leash",
        "the budget audit is due",
    ] {
        let (label, probs) = trained.predict_text(text)?;
        let shown: Vec<String> = trained
            .classes
            .iter()
            .zip(&probs)
            .map(|(c, p)| format!("{c} {p:.3}"))
            .collect();
        println!("  {text:<32} -> {label:<8} ({})", shown.join(", "));
    }
    Ok(())
}
