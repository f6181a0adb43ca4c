//! Ranks vocabulary tokens by information gain — how many bits knowing
//! "does this document contain the token?" reveals about the class label —
//! and prunes the vocabulary to the top-scoring tokens.
//!
//! Tokens that appear in only one class score high; tokens spread evenly
//! across classes score near zero. A token present in exactly the documents
//! of one class resolves the label completely, so its gain equals the label
//! entropy H(C).
//!
//! Run with `cargo run --release --example information_gain`.

use std::collections::HashSet;

use keat::corpus::{build_documents, entropy, intern_labels, tokenize, IgReport, RawRecord, Vocab};

fn main() -> keat::Result<()> {
    let records: Vec<RawRecord> = [
        ("weather", "rain and wind expected today"),
        ("weather", "heavy rain floods the valley"),
        ("weather", "sunshine returns after the rain"),
        ("traffic", "crash blocks the highway today"),
        ("traffic", "the highway reopens after delays"),
        ("traffic", "expect delays on the bridge"),
    ]
    .into_iter()
    .map(|(label, text)| RawRecord { label: label.into(), text: text.into() })
    .collect();

    let token_docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
    let vocab = Vocab::build(&token_docs);
    let (classes, labels) = intern_labels(&records);
    let docs = build_documents(&records, &labels, &vocab);

    let report = IgReport::build(&docs, classes.len())?;
    println!("token ranking ({} classes, {} documents):\n", classes.len(), docs.len());
    println!("{}", report.to_tsv());

    // "rain" appears in every weather document and no traffic document, so it
    // is a perfect separator: its gain matches the label entropy exactly.
    let priors: Vec<f64> = classes
        .iter()
        .enumerate()
        .map(|(k, _)| labels.iter().filter(|&&l| l == k).count() as f64 / labels.len() as f64)
        .collect();
    let h_label = entropy(&priors)?;
    let rain_gain = report
        .entries
        .iter()
        .find(|e| e.token == "rain")
        .map(|e| e.ig_bits)
        .unwrap_or(f64::NAN);
    println!("label entropy H(C) = {h_label:.6} bits");
    println!("IG(rain)          = {rain_gain:.6} bits  (perfect separator)");

    // Keep only the three most informative tokens; everything else maps to UNK.
    let keep: HashSet<String> = report.select_top_k(3).into_iter().collect();
    let pruned = vocab.retain(&keep);
    println!(
        "\nvocabulary pruned from {} to {} entries (two reserved rows always stay): {:?}",
        vocab.len(),
        pruned.len(),
        report.select_top_k(3)
    );
    Ok(())
}
