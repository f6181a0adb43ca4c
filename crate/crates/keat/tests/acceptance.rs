//! Release gate: one test per acceptance criterion, each printing a single
//! `criterion N …: pass|FAIL` line (visible with `--nocapture`). The suite
//! covers gradient verification, simplex invariants of every attention
//! distribution, the information-gain oracle, fusion endpoints, the improved
//! score identity, the Gaussian-bias geometry, overfit and desk-scale
//! training, the γ sweep table, and checkpoint round-trips.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use keat::concept::ConceptLexicon;
use keat::corpus::{entropy, information_gain, Document, IgReport, RawRecord};
use keat::encoder::{multihead_self_attention, pooling_weights, MultiHeadParams};
use keat::fusion::{concept_self_weights, fuse_weights, text_concept_weights, FusionParams};
use keat::local_attn::{
    gaussian_bias_value, local_attention_layer, score, LocalAttnMode, LocalAttnParams, ScoreMode,
    WindowSource,
};
use keat::model::HyperParams;
use keat::pipeline::TrainedModel;
use keat::tape::{ParamSet, Tape};
use keat::tensor::Tensor;

fn criterion(n: usize, what: &str, ok: bool, detail: String) {
    println!("criterion {n} ({what}): {} — {detail}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "criterion {n} ({what}): {detail}");
}

fn data_path(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .display()
        .to_string()
}

fn run_keat(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_keat")).args(args).output().expect("spawn keat");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

// ── Shared small fixture: 20 separable documents, 10-entry lexicon ──────────

fn overfit_records() -> Vec<RawRecord> {
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

fn overfit_lexicon() -> ConceptLexicon {
    let rows = "\
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
";
    ConceptLexicon::parse(rows, "overfit-lexicon").unwrap()
}

fn overfit_hp() -> HyperParams {
    HyperParams {
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
        epochs: 200,
        seed: 11,
        ..HyperParams::default()
    }
}

// ── Criteria ─────────────────────────────────────────────────────────────────

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let (code, stdout, stderr) = run_keat(&["gradcheck"]);
    let elapsed = started.elapsed().as_secs_f64();
    let verdict_line = stdout.lines().last().unwrap_or_default().to_string();
    let tensors = stdout.lines().filter(|l| l.ends_with("\tok")).count();
    let covers_model = stdout.lines().any(|l| l.starts_with("model\t"));
    let covers_original = stdout.lines().any(|l| l.starts_with("local-original\t"));
    let covers_improved = stdout.lines().any(|l| l.starts_with("local-improved\t"));
    let ok = code == 0
        && verdict_line == "gradcheck\tpass"
        && covers_model
        && covers_original
        && covers_improved
        && elapsed < 60.0;
    criterion(
        1,
        "gradient oracle",
        ok,
        format!("exit {code}, {tensors} tensors ok, {elapsed:.1}s; stderr: {}", stderr.trim()),
    );
}

#[test]
fn criterion_2_simplex_suite() {
    let tol = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut set = ParamSet::new();
    let mh = MultiHeadParams::register(&mut set, 4, 2, 0.5, &mut rng).unwrap();
    let fu = FusionParams::register(&mut set, 3, 4, 3, 3, 0.5, &mut rng);
    let la = LocalAttnParams::register(&mut set, 4, 3, 3, 0.5, &mut rng);
    let modes = [
        LocalAttnMode { score: ScoreMode::Original, window: WindowSource::Learned },
        LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Learned },
        LocalAttnMode { score: ScoreMode::Original, window: WindowSource::Frequency(2.5) },
        LocalAttnMode { score: ScoreMode::ImprovedAbs, window: WindowSource::Frequency(4.0) },
    ];
    let mut worst: f64 = 0.0;
    let mut distributions = 0usize;
    let check = |data: &[f64], worst: &mut f64, distributions: &mut usize| -> bool {
        *distributions += 1;
        let sum: f64 = data.iter().sum();
        *worst = worst.max((sum - 1.0).abs());
        data.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() <= tol
    };
    let mut ok = true;
    for round in 0..1000 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=5);
        let gamma: f64 = rng.gen_range(0.0..=1.0);
        let mut tape = Tape::new();

        // Multi-head self-attention rows, plus the pooled mixture.
        let u = tape.leaf(Tensor::randn(vec![n, 4], 1.5, &mut rng));
        let (_, head_weights) = multihead_self_attention(&mut tape, &set, &mh, u).unwrap();
        for &hw in &head_weights {
            let w = tape.value(hw);
            for r in 0..w.rows() {
                ok &= check(w.row_slice(r), &mut worst, &mut distributions);
            }
        }
        let pool = pooling_weights(&mut tape, &head_weights).unwrap();
        ok &= check(tape.value(pool).data(), &mut worst, &mut distributions);

        // Concept-fusion α, β, and the γ-fused weights.
        let concepts = tape.leaf(Tensor::randn(vec![m, 3], 1.2, &mut rng));
        let query = tape.leaf(Tensor::randn(vec![1, 4], 1.2, &mut rng));
        let alpha = text_concept_weights(&mut tape, &set, &fu, concepts, query).unwrap();
        let beta = concept_self_weights(&mut tape, &set, &fu, concepts).unwrap();
        let fused = fuse_weights(&mut tape, alpha, beta, gamma).unwrap();
        for dist in [alpha, beta, fused] {
            ok &= check(tape.value(dist).data(), &mut worst, &mut distributions);
        }

        // Local-attention β in every score/window mode.
        let out = local_attention_layer(&mut tape, &set, &la, u, modes[round % modes.len()])
            .unwrap();
        ok &= check(tape.value(out.beta).data(), &mut worst, &mut distributions);
    }
    criterion(
        2,
        "simplex suite",
        ok,
        format!("{distributions} distributions over 1000 inputs, worst |sum-1| = {worst:.2e}"),
    );
}

#[test]
fn criterion_3_information_gain_oracle() {
    // Independent contingency-table oracle, written from the counts up.
    fn oracle(docs: &[Document], num_classes: usize, token: &str) -> f64 {
        let h = |counts: &[usize], total: usize| -> f64 {
            if total == 0 {
                return 0.0;
            }
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.log2()
                })
                .sum()
        };
        let n = docs.len();
        let mut class_total = vec![0usize; num_classes];
        let mut class_with = vec![0usize; num_classes];
        for d in docs {
            class_total[d.label] += 1;
            if d.tokens.iter().any(|t| t == token) {
                class_with[d.label] += 1;
            }
        }
        let with: usize = class_with.iter().sum();
        let without = n - with;
        let class_without: Vec<usize> =
            class_total.iter().zip(&class_with).map(|(t, w)| t - w).collect();
        h(&class_total, n)
            - with as f64 / n as f64 * h(&class_with, with)
            - without as f64 / n as f64 * h(&class_without, without)
    }

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let pool: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for _ in 0..50 {
        let num_classes = rng.gen_range(2..=4);
        let num_docs = rng.gen_range(5..=20);
        let docs: Vec<Document> = (0..num_docs)
            .map(|_| {
                let tokens: Vec<String> = (0..rng.gen_range(1..=6))
                    .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                    .collect();
                Document {
                    label: rng.gen_range(0..num_classes),
                    tokens,
                    word_ids: Vec::new(),
                    char_ids: Vec::new(),
                }
            })
            .collect();
        let mut distinct: Vec<&str> = Vec::new();
        for d in &docs {
            for t in &d.tokens {
                if !distinct.contains(&t.as_str()) {
                    distinct.push(t);
                }
            }
        }
        for token in distinct {
            let got = information_gain(&docs, num_classes, token).unwrap();
            let want = oracle(&docs, num_classes, token);
            worst = worst.max((got - want).abs());
            compared += 1;
        }
        // The ranked report reproduces the same numbers.
        let report = IgReport::build(&docs, num_classes).unwrap();
        for e in &report.entries {
            let want = oracle(&docs, num_classes, &e.token);
            worst = worst.max((e.ig_bits - want).abs());
            compared += 1;
        }
    }

    // A token marking one side of a two-class split earns the full prior
    // entropy.
    let mut sep_worst: f64 = 0.0;
    for _ in 0..10 {
        let a = rng.gen_range(1..=10);
        let b = rng.gen_range(1..=10);
        let mut docs = Vec::new();
        for _ in 0..a {
            docs.push(Document {
                label: 0,
                tokens: vec!["marker".into(), "noise".into()],
                word_ids: Vec::new(),
                char_ids: Vec::new(),
            });
        }
        for _ in 0..b {
            docs.push(Document {
                label: 1,
                tokens: vec!["noise".into()],
                word_ids: Vec::new(),
                char_ids: Vec::new(),
            });
        }
        let n = (a + b) as f64;
        let prior = entropy(&[a as f64 / n, b as f64 / n]).unwrap();
        let got = information_gain(&docs, 2, "marker").unwrap();
        sep_worst = sep_worst.max((got - prior).abs());
    }

    let ok = worst <= 1e-12 && sep_worst <= 1e-12;
    criterion(
        3,
        "information-gain oracle",
        ok,
        format!("{compared} comparisons, worst |Δ| = {worst:.2e}, separator |Δ| = {sep_worst:.2e}"),
    );
}

#[test]
fn criterion_4_fusion_endpoints_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut exact = true;
    for _ in 0..100 {
        let m = rng.gen_range(1..=6);
        let mut tape = Tape::new();
        let alpha = tape.leaf(Tensor::randn(vec![m, 1], 2.0, &mut rng));
        let beta = tape.leaf(Tensor::randn(vec![m, 1], 2.0, &mut rng));
        let at_one = fuse_weights(&mut tape, alpha, beta, 1.0).unwrap();
        let soft_alpha = tape.softmax(alpha, 0).unwrap();
        let at_zero = fuse_weights(&mut tape, alpha, beta, 0.0).unwrap();
        let soft_beta = tape.softmax(beta, 0).unwrap();
        // Bitwise equality: the off-signal contributes exactly nothing.
        exact &= tape.value(at_one).data() == tape.value(soft_alpha).data();
        exact &= tape.value(at_zero).data() == tape.value(soft_beta).data();
    }
    criterion(4, "fusion endpoints", exact, "γ=1 ≡ softmax(α), γ=0 ≡ softmax(β), bitwise".into());
}

#[test]
fn criterion_5_improved_score_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut set = ParamSet::new();
    let p = LocalAttnParams::register(&mut set, 4, 3, 2, 0.6, &mut rng);
    let mut exact = true;
    let mut negatives_coverage = 0usize;
    for _ in 0..1000 {
        let u = Tensor::randn(vec![1, 4], 1.5, &mut rng);
        let mut t1 = Tape::new();
        let u1 = t1.leaf(u.clone());
        let original = score(&mut t1, &set, &p, u1, ScoreMode::Original).unwrap();
        let mut t2 = Tape::new();
        let u2 = t2.leaf(u);
        let improved = score(&mut t2, &set, &p, u2, ScoreMode::ImprovedAbs).unwrap();
        let (o, i) = (t1.value(original).item(), t2.value(improved).item());
        if o < 0.0 {
            negatives_coverage += 1;
        }
        exact &= i == o.abs() && i >= 0.0;
    }
    let ok = exact && negatives_coverage > 100;
    criterion(
        5,
        "improved-score identity",
        ok,
        format!("1000 inputs exact, {negatives_coverage} had negative original scores"),
    );
}

#[test]
fn criterion_6_gaussian_bias_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let center = rng.gen_range(0.5..9.5);
        let sigma = rng.gen_range(0.1..3.0);
        // Zero at the predicted position.
        worst = worst.max(gaussian_bias_value(center, center, sigma).abs());
        // Even around the center.
        for _ in 0..10 {
            let d = rng.gen_range(0.0..4.0);
            let left = gaussian_bias_value(center - d, center, sigma);
            let right = gaussian_bias_value(center + d, center, sigma);
            worst = worst.max((left - right).abs());
        }
        // Exactly −1 where the offset is σ√2.
        let off = sigma * std::f64::consts::SQRT_2;
        worst = worst.max((gaussian_bias_value(center + off, center, sigma) + 1.0).abs());
        worst = worst.max((gaussian_bias_value(center - off, center, sigma) + 1.0).abs());
    }
    criterion(6, "Gaussian-bias geometry", worst <= 1e-12, format!("worst |Δ| = {worst:.2e}"));
}

#[test]
fn criterion_7_overfit_smoke_test() {
    let started = Instant::now();
    let records = overfit_records();
    let hp = overfit_hp();
    let (tm, run) = TrainedModel::train(&records, overfit_lexicon(), &hp).unwrap();
    let first_perfect = run.metrics.iter().find(|m| m.accuracy == 1.0).map(|m| m.epoch);
    let final_eval = tm.evaluate_records(&records).unwrap();

    // Same seed, same trajectory, bit for bit.
    let (_, run2) = TrainedModel::train(&records, overfit_lexicon(), &hp).unwrap();
    let deterministic = run
        .metrics
        .iter()
        .zip(&run2.metrics)
        .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits() && a.accuracy == b.accuracy);

    let elapsed = started.elapsed().as_secs_f64();
    let ok = first_perfect.map_or(false, |e| e <= 200)
        && final_eval.accuracy == 1.0
        && deterministic
        && elapsed < 120.0;
    criterion(
        7,
        "overfit smoke test",
        ok,
        format!(
            "100% at epoch {}, final accuracy {:.3}, deterministic {deterministic}, {elapsed:.1}s",
            first_perfect.map_or("never".into(), |e| e.to_string()),
            final_eval.accuracy
        ),
    );
}

#[test]
fn criterion_8_desk_scale_learning_signal() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("desk.ckpt").display().to_string();
    let (code, _, stderr) = run_keat(&[
        "train",
        "--train",
        &data_path("agnews_train.tsv"),
        "--lexicon",
        &data_path("lexicon.tsv"),
        "--out",
        &ckpt,
        "--config",
        &data_path("desk.conf"),
    ]);
    assert_eq!(code, 0, "training failed: {stderr}");
    let (code, stdout, stderr) = run_keat(&["eval", "--ckpt", &ckpt, "--eval", &data_path("agnews_test.tsv")]);
    assert_eq!(code, 0, "eval failed: {stderr}");
    let accuracy: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("accuracy\t"))
        .expect("accuracy line")
        .parse()
        .expect("accuracy value");
    let ok = accuracy >= 0.45;
    criterion(
        8,
        "desk-scale learning signal",
        ok,
        format!("held-out accuracy {accuracy:.3} vs 0.25 majority baseline (needs ≥ 0.45)"),
    );
}

#[test]
fn criterion_9_gamma_sweep_table() {
    let (code, stdout, stderr) = run_keat(&[
        "sweep",
        "--train",
        &data_path("agnews_train.tsv"),
        "--eval",
        &data_path("agnews_test.tsv"),
        "--lexicon",
        &data_path("lexicon.tsv"),
        "--gammas",
        "0,0.25,0.5,0.75,1",
        "--config",
        &data_path("desk.conf"),
        "--epochs",
        "2",
    ]);
    assert_eq!(code, 0, "sweep failed: {stderr}");
    let lines: Vec<&str> = stdout.lines().collect();
    let mut ok = lines.first() == Some(&"gamma\taccuracy") && lines.len() == 6;
    let expected = ["0", "0.25", "0.5", "0.75", "1"];
    if ok {
        for (row, want_gamma) in lines[1..].iter().zip(expected) {
            let mut cols = row.split('\t');
            let gamma = cols.next().unwrap_or_default();
            let accuracy: Option<f64> = cols.next().and_then(|v| v.parse().ok());
            ok &= gamma == want_gamma
                && cols.next().is_none()
                && accuracy.map_or(false, |a| (0.0..=1.0).contains(&a));
        }
    }
    criterion(9, "γ-sweep table", ok, format!("{} data rows:\n{stdout}", lines.len().saturating_sub(1)));
}

#[test]
fn criterion_10_checkpoint_round_trip() {
    let records = overfit_records();
    let hp = HyperParams { epochs: 30, ..overfit_hp() };
    let (tm, run) = TrainedModel::train(&records, overfit_lexicon(), &hp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let before_eval = tm.evaluate_records(&records).unwrap();
    let before_probs: Vec<Vec<f64>> = ["the puppy naps", "tax audit today", "unrelated words"]
        .iter()
        .map(|t| tm.predict_text(t).unwrap().1)
        .collect();
    tm.save(&path, Some(&run.adam), Some(&run.rng)).unwrap();

    let loaded = TrainedModel::load(&path).unwrap();
    let after_eval = loaded.pipeline.evaluate_records(&records).unwrap();
    let after_probs: Vec<Vec<f64>> = ["the puppy naps", "tax audit today", "unrelated words"]
        .iter()
        .map(|t| loaded.pipeline.predict_text(t).unwrap().1)
        .collect();
    let identical = after_eval == before_eval
        && before_probs
            .iter()
            .flatten()
            .zip(after_probs.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    // Structural corruption must be rejected, never half-loaded.
    let original = std::fs::read(&path).unwrap();
    let mut rejected = 0usize;
    let mut variants: Vec<Vec<u8>> = Vec::new();
    variants.push(original[..original.len() / 2].to_vec()); // truncated
    let mut bad_magic = original.clone();
    bad_magic[0] ^= 0xFF;
    variants.push(bad_magic);
    let mut bad_version = original.clone();
    bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
    variants.push(bad_version);
    let mut bad_length = original.clone();
    bad_length[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    variants.push(bad_length);
    let meta = format!("{}.meta", path.display());
    for bytes in &variants {
        std::fs::write(&path, bytes).unwrap();
        if TrainedModel::load(&path).is_err() {
            rejected += 1;
        }
    }
    // Restore the archive but garble the sidecar.
    std::fs::write(&path, &original).unwrap();
    let mut sidecar = std::fs::read_to_string(&meta).unwrap();
    sidecar.push_str("mystery\trow\n");
    std::fs::write(&meta, sidecar).unwrap();
    let sidecar_rejected = TrainedModel::load(&path).is_err();

    let ok = identical && rejected == variants.len() && sidecar_rejected;
    criterion(
        10,
        "checkpoint round-trip",
        ok,
        format!(
            "evaluation bit-identical: {identical}; {rejected}/{} corruptions rejected, sidecar rejected: {sidecar_rejected}",
            variants.len()
        ),
    );
}
