//! Retrieves weighted concepts for short texts from a surface-form lexicon.
//!
//! Matching walks the tokens left to right: a two-word surface form beats the
//! single words it covers, the same concept reached through several surface
//! forms merges by summing scores, and only the `max_concepts` best survive.
//!
//! Run with `cargo run --release --example conceptualize`.

use keat::concept::{conceptualize, ConceptLexicon};
use keat::corpus::{char_ids, tokenize, Document};

fn doc_from(text: &str) -> Document {
    let tokens = tokenize(text);
    Document {
        label: 0,
        word_ids: vec![0; tokens.len()],
        char_ids: tokens.iter().map(|t| char_ids(t)).collect(),
        tokens,
    }
}

fn main() -> keat::Result<()> {
    let lexicon = ConceptLexicon::parse(
        "\
apple\tfruit\t0.6
apple\tcompany\t0.4
interest rate\tmonetary_policy\t0.95
interest\temotion\t0.3
rate\tmeasure\t0.4
banana\tfruit\t0.7
orange\tfruit\t0.65
orange\tcolor\t0.35
",
        "demo-lexicon",
    )?;
    println!(
        "lexicon: {} surface forms, {} concepts: {:?}\n",
        lexicon.rows().len(),
        lexicon.num_concepts(),
        lexicon.concept_names()
    );

    let texts = [
        // Bigram wins: "interest rate" maps to monetary_policy, so neither
        // "interest" (emotion) nor "rate" (measure) fires on its own.
        "the interest rate rose again",
        // Here "interest" stands alone and keeps its unigram sense.
        "public interest in the rate hike",
        // Three fruit words hit the same concept; their scores merge.
        "apple banana and orange salad",
    ];
    for text in texts {
        let doc = doc_from(text);
        let cs = conceptualize(&doc, &lexicon, 5);
        println!("{text}");
        for m in &cs.items {
            println!(
                "  concept {:<16} score {:.2}  (via \"{}\")",
                lexicon.concept_name(m.concept_id),
                m.score,
                m.surface
            );
        }
        println!();
    }

    // The cap keeps only the strongest matches.
    let doc = doc_from("apple banana and orange salad");
    let capped = conceptualize(&doc, &lexicon, 1);
    println!(
        "same fruit text capped at 1 concept: {:?}",
        capped.items.iter().map(|m| lexicon.concept_name(m.concept_id)).collect::<Vec<_>>()
    );
    Ok(())
}
