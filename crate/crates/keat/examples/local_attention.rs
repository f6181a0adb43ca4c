//! The Gaussian-biased local attention layer: each position's content score
//! is shifted by a penalty that grows with distance from a predicted center,
//! so the attention distribution concentrates in a learned window.
//!
//! Shows the bias curve itself, then runs the layer over one input in its
//! three modes: the original signed score, the improved absolute-value score,
//! and the improved score with a frequency-derived window.
//!
//! Run with `cargo run --release --example local_attention`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use keat::local_attn::{
    gaussian_bias_value, local_attention_layer, LocalAttnMode, LocalAttnParams, ScoreMode,
    WindowSource,
};
use keat::tape::{ParamSet, Tape};
use keat::tensor::Tensor;

const STEPS: usize = 9;
const INPUT: usize = 6;
const ATTN: usize = 4;
const OUT: usize = 5;

fn main() -> keat::Result<()> {
    // The bias is 0 at the predicted center and falls off as -(t-P)²/2σ²,
    // with σ tied to the window width D by σ = D/2.
    let center = 5.0;
    let width = 4.0;
    println!("Gaussian bias around center {center}, window width {width}:");
    for t in 1..=STEPS {
        let g = gaussian_bias_value(t as f64, center, width / 2.0);
        let bar = "#".repeat(((g + 2.0).max(0.0) * 24.0).round() as usize);
        println!("  position {t}  bias {g:>7.3}  {bar}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = ParamSet::new();
    let p = LocalAttnParams::register(&mut set, INPUT, ATTN, OUT, 0.4, &mut rng);
    let input = Tensor::randn(vec![STEPS, INPUT], 0.8, &mut rng);

    let modes = [
        ("original score, learned window", LocalAttnMode {
            score: ScoreMode::Original,
            window: WindowSource::Learned,
        }),
        ("improved |score|, learned window", LocalAttnMode {
            score: ScoreMode::ImprovedAbs,
            window: WindowSource::Learned,
        }),
        ("improved |score|, frequency window (ω = 3)", LocalAttnMode {
            score: ScoreMode::ImprovedAbs,
            window: WindowSource::Frequency(3.0),
        }),
    ];
    for (name, mode) in modes {
        let mut tape = Tape::new();
        let u = tape.leaf(input.clone());
        let out = local_attention_layer(&mut tape, &set, &p, u, mode)?;
        println!("\n{name}:");
        println!("  window width D = {:.4}", tape.value(out.width).item());
        println!("  pooled feature shape {:?}", tape.value(out.pooled).shape());
        let beta = tape.value(out.beta).data().to_vec();
        for (t, b) in beta.iter().enumerate() {
            let bar = "#".repeat((b * 200.0).round() as usize);
            println!("  β[{}] = {b:.4}  {bar}", t + 1);
        }
        println!("  Σβ = {:.12}", beta.iter().sum::<f64>());
    }
    Ok(())
}
