//! Walks one sentence through the text encoder stage by stage: word
//! embedding + char-CNN rows, the bidirectional GRU, multi-head
//! self-attention, and attention pooling down to a single text feature.
//! Prints the tensor shape after each stage and the per-token attention
//! weights.
//!
//! Run with `cargo run --release --example encode_text`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use keat::corpus::{build_documents, tokenize, RawRecord, Vocab, CHAR_ALPHABET};
use keat::encoder::{
    attention_pool, bigru_forward, embed_tokens, multihead_self_attention, pooling_weights,
    BiGruParams, CharCnnParams, MultiHeadParams,
};
use keat::tape::{ParamSet, Regularization, Tape};
use keat::tensor::Tensor;

const WORD_DIM: usize = 10;
const CHAR_DIM: usize = 6;
const HIDDEN: usize = 8;
const HEADS: usize = 2;

fn main() -> keat::Result<()> {
    let text = "a tiny robot reads the news";
    let records = vec![RawRecord { label: "demo".into(), text: text.into() }];
    let token_docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
    let vocab = Vocab::build(&token_docs);
    let docs = build_documents(&records, &[0], &vocab);
    let doc = &docs[0];
    println!("tokens: {:?}", doc.tokens);

    // Fresh randomly initialized encoder parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut set = ParamSet::new();
    let word_emb = set.register(
        "emb.word",
        Tensor::randn(vec![vocab.len(), WORD_DIM], 0.3, &mut rng),
        Regularization::SkipFirstRows(2),
    );
    let cnn = CharCnnParams::register(&mut set, CHAR_ALPHABET, CHAR_DIM, 3, 0.3, &mut rng);
    let gru = BiGruParams::register(&mut set, WORD_DIM + CHAR_DIM, HIDDEN, 0.3, &mut rng);
    let attn = MultiHeadParams::register(&mut set, 2 * HIDDEN, HEADS, 0.3, &mut rng)?;
    println!("registered {} parameter tensors\n", set.len());

    let mut tape = Tape::new();
    let x = embed_tokens(&mut tape, &set, word_emb, &cnn, doc)?;
    println!("word + char-CNN rows: {:?}  (word {WORD_DIM} + char {CHAR_DIM})", tape.value(x).shape());

    let h = bigru_forward(&mut tape, &set, &gru, x)?;
    println!("Bi-GRU states:        {:?}  (forward {HIDDEN} ++ backward {HIDDEN})", tape.value(h).shape());

    let (ctx, head_weights) = multihead_self_attention(&mut tape, &set, &attn, h)?;
    println!("self-attention out:   {:?}  ({HEADS} heads)", tape.value(ctx).shape());

    let a = pooling_weights(&mut tape, &head_weights)?;
    let (_, feature) = attention_pool(&mut tape, ctx, a)?;
    println!("pooled text feature:  {:?}\n", tape.value(feature).shape());

    println!("attention received per token (sums to 1):");
    let weights = tape.value(a).data().to_vec();
    for (tok, w) in doc.tokens.iter().zip(&weights) {
        let bar = "#".repeat((w * 120.0).round() as usize);
        println!("  {tok:<8} {w:.4}  {bar}");
    }
    println!("  sum = {:.12}", weights.iter().sum::<f64>());
    Ok(())
}
