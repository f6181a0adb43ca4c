//! Trains a small model, saves it, loads it back, and shows that the loaded
//! model reproduces the original's predictions bit for bit. Parameters are
//! stored as 32-bit floats (the in-memory values are kept on the same grid),
//! the optimizer moments and RNG state ride along for resumption, and a
//! tampered file is rejected instead of yielding a silently wrong model.
//!
//! Run with `cargo run --release --example checkpoint_roundtrip`.

use std::fs;

use keat::checkpoint::Archive;
use keat::concept::ConceptLexicon;
use keat::corpus::RawRecord;
use keat::model::HyperParams;
use keat::pipeline::{meta_path, TrainedModel};

const PROBES: [&str; 3] =
    ["the puppy found a treat", "tax on the ledger", "a new collar for the kitten"];

fn main() -> keat::Result<()> {
    let records: Vec<RawRecord> = [
        ("pets", "the puppy chased a ball"),
        ("pets", "kitten naps in the warm sun"),
        ("pets", "the vet checked the paw"),
        ("pets", "a treat for the good kitten"),
        ("pets", "the collar fits the puppy"),
        ("finance", "the invoice lists the budget"),
        ("finance", "an audit of the ledger"),
        ("finance", "tax on the new loan"),
        ("finance", "credit terms for payroll"),
        ("finance", "interest raised the budget"),
    ]
    .into_iter()
    .map(|(label, text)| RawRecord { label: label.into(), text: text.into() })
    .collect();
    let lexicon = ConceptLexicon::parse(
        "puppy\tanimal\t0.9\nkitten\tanimal\t0.85\ninvoice\tdocument\t0.9\nledger\tdocument\t0.85\n",
        "toy-lexicon",
    )?;
    let hp = HyperParams {
        word_dim: 10,
        char_dim: 5,
        concept_dim: 6,
        hidden: 5,
        heads: 1,
        fusion_text_dim: 4,
        fusion_set_dim: 4,
        dropout: 0.0,
        learning_rate: 0.01,
        init_std: 0.2,
        batch_size: 5,
        epochs: 15,
        seed: 4,
        ..HyperParams::default()
    };
    let (trained, run) = TrainedModel::train(&records, lexicon, &hp)?;

    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("toy.keat");
    trained.save(&ckpt, Some(&run.adam), Some(&run.rng))?;
    println!(
        "saved {} ({} bytes) + sidecar {} ({} bytes)",
        ckpt.file_name().unwrap().to_string_lossy(),
        fs::metadata(&ckpt)?.len(),
        meta_path(&ckpt).file_name().unwrap().to_string_lossy(),
        fs::metadata(meta_path(&ckpt))?.len(),
    );

    // The checkpoint is a flat archive of named tensors: the model weights
    // plus hyperparameter scalars, optimizer moments, and the RNG state.
    let archive = Archive::read(&ckpt)?;
    println!("\narchive holds {} tensors; a few of the model weights:", archive.len());
    let aux = ["hp.", "adam.", "rng."];
    for (name, tensor) in
        archive.iter().filter(|(n, _)| !aux.iter().any(|p| n.starts_with(p))).take(5)
    {
        println!("  {name:<12} {:?}", tensor.shape());
    }
    for prefix in aux {
        let n = archive.iter().filter(|(name, _)| name.starts_with(prefix)).count();
        println!("  … plus {n} tensors under {prefix}*");
    }

    let loaded = TrainedModel::load(&ckpt)?;
    let mut all_bitwise = true;
    println!("\npredictions before save vs after load:");
    for text in PROBES {
        let (label_a, probs_a) = trained.predict_text(text)?;
        let (label_b, probs_b) = loaded.pipeline.predict_text(text)?;
        let bitwise = label_a == label_b
            && probs_a.iter().zip(&probs_b).all(|(x, y)| x.to_bits() == y.to_bits());
        all_bitwise &= bitwise;
        println!("  {text:<30} {label_b:<8} bit-identical: {bitwise}");
    }
    println!(
        "round-trip is {} (optimizer state restored: {})",
        if all_bitwise { "exact" } else { "NOT exact" },
        loaded.adam.is_some() && loaded.rng.is_some()
    );

    // Tampering is caught up front.
    let mut bytes = fs::read(&ckpt)?;
    bytes[0] ^= 0xFF;
    let bad_magic = dir.path().join("bad_magic.keat");
    fs::write(&bad_magic, &bytes)?;
    match TrainedModel::load(&bad_magic) {
        Err(e) => println!("\nflipped magic byte  -> rejected: {e}"),
        Ok(_) => println!("\nflipped magic byte  -> ACCEPTED (bug!)"),
    }
    let truncated = dir.path().join("truncated.keat");
    let original = fs::read(&ckpt)?;
    fs::write(&truncated, &original[..original.len() / 2])?;
    match TrainedModel::load(&truncated) {
        Err(e) => println!("truncated archive   -> rejected: {e}"),
        Ok(_) => println!("truncated archive   -> ACCEPTED (bug!)"),
    }
    Ok(())
}
