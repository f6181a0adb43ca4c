//! Weights a document's concept set two ways — by relevance to the text
//! query (α) and by agreement among the concepts themselves (β) — then blends
//! the two with the mixing factor γ: `fused = softmax(γ·α + (1−γ)·β)`.
//!
//! γ = 1 listens only to the text, γ = 0 only to the concept set; at the
//! endpoints the fused weights equal softmax(α) or softmax(β) bit for bit.
//!
//! Run with `cargo run --release --example concept_fusion`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use keat::fusion::{concept_attention, FusionParams};
use keat::tape::{ParamSet, Tape};
use keat::tensor::Tensor;

const CONCEPT_DIM: usize = 5;
const QUERY_DIM: usize = 6;
const NUM_CONCEPTS: usize = 4;

fn main() -> keat::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut set = ParamSet::new();
    let p = FusionParams::register(&mut set, CONCEPT_DIM, QUERY_DIM, 4, 4, 0.5, &mut rng);

    // Four concept embedding rows and one text query row.
    let concepts = Tensor::randn(vec![NUM_CONCEPTS, CONCEPT_DIM], 0.8, &mut rng);
    let query = Tensor::randn(vec![1, QUERY_DIM], 0.8, &mut rng);

    let fmt =
        |v: &Tensor| v.data().iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("  ");

    // α and β depend only on the inputs, so compute them once.
    let mut tape = Tape::new();
    let c = tape.leaf(concepts.clone());
    let q = tape.leaf(query.clone());
    let once = concept_attention(&mut tape, &set, &p, c, q, 0.5, false)?;
    println!("weights over {NUM_CONCEPTS} concepts:");
    println!("  α (text-conditioned): {}", fmt(tape.value(once.alpha)));
    println!("  β (set-internal):     {}", fmt(tape.value(once.beta)));

    println!("\nfused = softmax(γ·α + (1−γ)·β):");
    for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mut tape = Tape::new();
        let c = tape.leaf(concepts.clone());
        let q = tape.leaf(query.clone());
        let out = concept_attention(&mut tape, &set, &p, c, q, gamma, false)?;
        println!("  γ = {gamma:<4}  {}", fmt(tape.value(out.fused)));
    }

    // Endpoint identity: at γ = 1 the blend is exactly softmax(α), because
    // 1·α + 0·β is the same floating-point vector as α.
    let mut tape = Tape::new();
    let c = tape.leaf(concepts.clone());
    let q = tape.leaf(query.clone());
    let out = concept_attention(&mut tape, &set, &p, c, q, 1.0, false)?;
    let alpha = tape.value(out.alpha).clone();
    let fused = tape.value(out.fused).clone();
    let mut check = Tape::new();
    let a = check.leaf(alpha);
    let sm = check.softmax(a, 0)?;
    let bitwise = check
        .value(sm)
        .data()
        .iter()
        .zip(fused.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    println!("\nγ = 1 fused == softmax(α) bit for bit: {bitwise}");

    // The weighted sum of concept rows is the 1×d feature handed to the
    // classifier alongside the text feature.
    println!("concept feature shape: {:?}", tape.value(out.feature).shape());
    Ok(())
}
