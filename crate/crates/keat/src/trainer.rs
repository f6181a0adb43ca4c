//! Adam optimization with gradient clipping, the seeded epoch loop,
//! evaluation metrics, and the γ sweep.
//!
//! Training is deterministic for a fixed seed: one ChaCha8 stream drives the
//! per-epoch shuffle and the dropout masks, in that order, so repeated runs
//! produce bit-identical loss sequences on one machine.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KeatError, Result};
use crate::model::{Example, HyperParams, KeatModel};
use crate::tape::{GradStore, ParamSet, Tape};
use crate::tensor::Tensor;

/// Gradients are rescaled when their global L2 norm exceeds this.
pub const CLIP_NORM: f64 = 5.0;

/// Bias-corrected first/second moment estimates per parameter tensor.
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(set: &ParamSet) -> AdamState {
        let m = set.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = set.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn apply(
        &mut self,
        set: &mut ParamSet,
        grads: &GradStore,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if self.m.len() != set.len() || grads.len() != set.len() {
            return Err(KeatError::contract(format!(
                "optimizer tracks {} tensors, gradients carry {}, parameters {}",
                self.m.len(),
                grads.len(),
                set.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in 0..set.len() {
            let g = grads.get(id);
            if g.shape() != set.get(id).shape() {
                return Err(KeatError::contract(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    set.name(id),
                    set.get(id).shape()
                )));
            }
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let theta = set.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean per-document batch loss (cross-entropy plus regularization).
    pub loss: f64,
    /// Training-set accuracy after the epoch's updates.
    pub accuracy: f64,
}

pub struct TrainRun {
    pub metrics: Vec<EpochMetrics>,
    pub adam: AdamState,
    /// RNG state after training, for checkpointed resumption.
    pub rng: ChaCha8Rng,
}

fn at_batch(err: KeatError, epoch: usize, batch: usize) -> KeatError {
    match err {
        KeatError::NonFinite(msg) => {
            KeatError::NonFinite(format!("epoch {epoch}, batch {batch}: {msg}"))
        }
        other => other,
    }
}

/// Runs the full epoch loop on `model` in place.
pub fn train_model(model: &mut KeatModel, examples: &[Example]) -> Result<TrainRun> {
    train_model_with(model, examples, &mut |_| {})
}

/// [`train_model`] with a per-epoch observer, called as soon as each epoch's
/// metrics are known (e.g. to stream progress to a terminal).
pub fn train_model_with(
    model: &mut KeatModel,
    examples: &[Example],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    if examples.is_empty() {
        return Err(KeatError::contract("training set is empty"));
    }
    if model.num_classes < 2 {
        return Err(KeatError::config(format!(
            "training needs at least 2 classes, got {}",
            model.num_classes
        )));
    }
    let hp = model.hp.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut adam = AdamState::new(&model.set);
    let mut metrics = Vec::with_capacity(hp.epochs);
    for epoch in 1..=hp.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for (bi, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new();
            let loss = model
                .batch_loss(&mut tape, &batch, Some(&mut rng))
                .map_err(|e| at_batch(e, epoch, bi))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(KeatError::NonFinite(format!(
                    "epoch {epoch}, batch {bi}: loss is {value}"
                )));
            }
            let mut grads =
                tape.backward(loss, &model.set).map_err(|e| at_batch(e, epoch, bi))?;
            clip_gradients(&mut grads, CLIP_NORM);
            adam.apply(&mut model.set, &grads, hp.learning_rate, hp.beta1, hp.beta2, hp.epsilon)?;
            total_loss += value * chunk.len() as f64;
        }
        let mut correct = 0usize;
        for ex in examples {
            let (_, best) = model.predict_probs(&ex.doc, &ex.concept_ids)?;
            if best == ex.doc.label {
                correct += 1;
            }
        }
        let entry = EpochMetrics {
            epoch,
            loss: total_loss / examples.len() as f64,
            accuracy: correct as f64 / examples.len() as f64,
        };
        on_epoch(&entry);
        metrics.push(entry);
    }
    // Checkpoints store 32-bit values; snapping now means an evaluation run
    // before saving matches one after loading bit for bit.
    model.set.snap_to_f32();
    Ok(TrainRun { metrics, adam, rng })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Number of evaluation documents with this true class.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_model(model: &KeatModel, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(KeatError::contract("evaluation set is empty"));
    }
    let c = model.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    for ex in examples {
        if ex.doc.label >= c {
            return Err(KeatError::contract(format!(
                "label {} out of range for {c} classes",
                ex.doc.label
            )));
        }
        let (_, best) = model.predict_probs(&ex.doc, &ex.concept_ids)?;
        confusion[ex.doc.label][best] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..c).map(|i| confusion[i][k]).sum();
        let tp = confusion[k][k];
        per_class.push(ClassMetrics {
            precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
            recall: if support == 0 { 0.0 } else { tp as f64 / support as f64 },
            support,
        });
    }
    Ok(Evaluation { accuracy: correct as f64 / examples.len() as f64, per_class, confusion })
}

/// Trains a fresh model per γ (same seed throughout) and reports held-out
/// accuracy for each. γ values are taken in the order given.
pub fn gamma_sweep(
    base: &HyperParams,
    vocab_len: usize,
    num_concepts: usize,
    num_classes: usize,
    train: &[Example],
    eval: &[Example],
    gammas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut hp = base.clone();
        hp.gamma = gamma;
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut model = KeatModel::new(&hp, vocab_len, num_concepts, num_classes, &mut rng)?;
        train_model(&mut model, train)?;
        let ev = evaluate_model(&model, eval)?;
        rows.push((gamma, ev.accuracy));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::tape::Regularization;

    // ── Optimizer oracles ────────────────────────────────────────────────────

    /// Hand-rolled scalar Adam, kept free of the production code paths.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: u32,
    }

    impl ScalarAdam {
        fn step(&mut self, theta: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let m_hat = self.m / (1.0 - b1.powi(self.t as i32));
            let v_hat = self.v / (1.0 - b2.powi(self.t as i32));
            theta - lr * m_hat / (v_hat.sqrt() + eps)
        }
    }

    fn one_param(initial: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.register("theta", Tensor::scalar(initial), Regularization::None);
        set
    }

    #[test]
    fn adam_trajectory_matches_reference_on_a_quadratic() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let mut set = one_param(0.0);
        let mut state = AdamState::new(&set);
        let mut reference = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        let mut theta_ref = 0.0;
        for _ in 0..5 {
            // f(θ) = (θ − 3)², so g = 2(θ − 3).
            let g = 2.0 * (set.get(0).item() - 3.0);
            let mut grads = GradStore::zeros_like(&set);
            grads.get_mut(0).data_mut()[0] = g;
            state.apply(&mut set, &grads, lr, b1, b2, eps).unwrap();
            let g_ref = 2.0 * (theta_ref - 3.0);
            theta_ref = reference.step(theta_ref, g_ref, lr, b1, b2, eps);
            assert!((set.get(0).item() - theta_ref).abs() <= 1e-12);
        }
        // Five steps of lr 1e-3 from zero should have moved θ toward 3.
        assert!(set.get(0).item() > 0.0);
    }

    #[test]
    fn adam_first_step_and_zero_gradient_behavior() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        // Zero gradient from a fresh state leaves the parameter untouched.
        let mut set = one_param(1.5);
        let mut state = AdamState::new(&set);
        let grads = GradStore::zeros_like(&set);
        state.apply(&mut set, &grads, lr, b1, b2, eps).unwrap();
        assert_eq!(set.get(0).item(), 1.5);
        // First step with gradient g moves by ≈ −lr·sign(g).
        for g in [0.5, -2.0] {
            let mut set = one_param(0.0);
            let mut state = AdamState::new(&set);
            let mut grads = GradStore::zeros_like(&set);
            grads.get_mut(0).data_mut()[0] = g;
            state.apply(&mut set, &grads, lr, b1, b2, eps).unwrap();
            assert!((set.get(0).item() + lr * g.signum()).abs() <= 1e-9);
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut set = ParamSet::new();
        set.register("a", Tensor::row(vec![0.0, 0.0]), Regularization::None);
        set.register("b", Tensor::scalar(0.0), Regularization::None);
        let mut grads = GradStore::zeros_like(&set);
        grads.get_mut(0).data_mut().copy_from_slice(&[6.0, 8.0]);
        // Norm √(36+64) = 10 → scaled down to 5.
        let before = clip_gradients(&mut grads, 5.0);
        assert!((before - 10.0).abs() <= 1e-12);
        assert!((grads.global_norm() - 5.0).abs() <= 1e-12);
        assert!((grads.get(0).data()[0] - 3.0).abs() <= 1e-12);
        // Under the cap nothing changes.
        let mut small = GradStore::zeros_like(&set);
        small.get_mut(1).data_mut()[0] = 3.0;
        let before = clip_gradients(&mut small, 5.0);
        assert_eq!(before, 3.0);
        assert_eq!(small.get(1).data()[0], 3.0);
    }

    // ── Training loop ────────────────────────────────────────────────────────

    fn toy_hp() -> HyperParams {
        HyperParams {
            word_dim: 8,
            char_dim: 4,
            concept_dim: 6,
            hidden: 6,
            heads: 2,
            fusion_text_dim: 4,
            fusion_set_dim: 4,
            init_std: 0.2,
            batch_size: 20,
            epochs: 120,
            seed: 11,
            ..HyperParams::default()
        }
    }

    fn toy_doc(label: usize, words: &[usize]) -> Document {
        Document {
            label,
            tokens: Vec::new(),
            word_ids: words.to_vec(),
            char_ids: words.iter().map(|&w| vec![(w % 26) + 1, ((w * 5) % 26) + 1]).collect(),
        }
    }

    /// 20 documents, two clearly separable classes over disjoint word ids,
    /// with a shared noise word and occasional concepts.
    fn toy_corpus() -> Vec<Example> {
        let mut examples = Vec::new();
        for i in 0..10 {
            let words = [2 + (i % 3), 3 + (i % 2), 8];
            examples.push(Example {
                doc: toy_doc(0, &words),
                concept_ids: if i % 2 == 0 { vec![0] } else { vec![] },
            });
            let words = [5 + (i % 3), 6 + (i % 2), 8];
            examples.push(Example {
                doc: toy_doc(1, &words),
                concept_ids: if i % 2 == 0 { vec![1] } else { vec![] },
            });
        }
        examples
    }

    #[test]
    fn overfits_a_separable_corpus_and_trends_downward() {
        let hp = toy_hp();
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut model = KeatModel::new(&hp, 9, 2, 2, &mut rng).unwrap();
        let examples = toy_corpus();
        let run = train_model(&mut model, &examples).unwrap();
        assert_eq!(run.metrics.len(), hp.epochs);
        let perfect = run.metrics.iter().find(|m| m.accuracy == 1.0);
        assert!(perfect.is_some(), "never reached 100% train accuracy");
        assert!(perfect.unwrap().epoch <= 200);
        // Loss trend: non-increasing across any 20-epoch window.
        let losses: Vec<f64> = run.metrics.iter().map(|m| m.loss).collect();
        for i in 0..losses.len().saturating_sub(20) {
            assert!(
                losses[i + 20] <= losses[i] + 1e-6,
                "loss rose over window starting at epoch {}: {} → {}",
                i + 1,
                losses[i],
                losses[i + 20]
            );
        }
        // Evaluating the training set right after overfitting gives 1.0.
        let ev = evaluate_model(&model, &examples).unwrap();
        assert_eq!(ev.accuracy, 1.0);
    }

    #[test]
    fn training_is_bit_deterministic_for_a_seed() {
        let hp = HyperParams { epochs: 3, ..toy_hp() };
        let examples = toy_corpus();
        let runs: Vec<Vec<EpochMetrics>> = (0..2)
            .map(|_| {
                let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
                let mut model = KeatModel::new(&hp, 9, 2, 2, &mut rng).unwrap();
                train_model(&mut model, &examples).unwrap().metrics
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn degenerate_training_inputs_are_rejected() {
        let hp = toy_hp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = KeatModel::new(&hp, 9, 2, 2, &mut rng).unwrap();
        assert!(matches!(train_model(&mut model, &[]), Err(KeatError::Contract(_))));
        let mut single = KeatModel::new(&hp, 9, 2, 1, &mut rng).unwrap();
        let examples = vec![Example { doc: toy_doc(0, &[2]), concept_ids: vec![] }];
        assert!(matches!(train_model(&mut single, &examples), Err(KeatError::Config(_))));
    }

    // ── Evaluation ───────────────────────────────────────────────────────────

    #[test]
    fn constant_predictor_scores_the_majority_baseline() {
        let hp = HyperParams { concept_dim: 6, ..toy_hp() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = KeatModel::new(&hp, 9, 2, 4, &mut rng).unwrap();
        // Zero every tensor, then bias the classifier toward class 0.
        for id in 0..model.set.len() {
            for v in model.set.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        model.set.get_mut(model.parts.cls_b).data_mut()[0] = 5.0;
        let examples: Vec<Example> = (0..12)
            .map(|i| Example { doc: toy_doc(i % 4, &[2 + (i % 5)]), concept_ids: vec![] })
            .collect();
        let ev = evaluate_model(&model, &examples).unwrap();
        assert!((ev.accuracy - 0.25).abs() <= 1e-12);
        assert_eq!(ev.per_class[0].recall, 1.0);
        assert!((ev.per_class[0].precision - 0.25).abs() <= 1e-12);
        for k in 1..4 {
            assert_eq!(ev.per_class[k].recall, 0.0);
            assert_eq!(ev.per_class[k].precision, 0.0);
            assert_eq!(ev.per_class[k].support, 3);
        }
        // Confusion rows sum to the class supports.
        for k in 0..4 {
            assert_eq!(ev.confusion[k].iter().sum::<usize>(), ev.per_class[k].support);
        }
        assert!(matches!(evaluate_model(&model, &[]), Err(KeatError::Contract(_))));
    }

    // ── γ sweep ──────────────────────────────────────────────────────────────

    #[test]
    fn gamma_sweep_produces_one_deterministic_row_per_gamma() {
        let hp = HyperParams { epochs: 2, ..toy_hp() };
        let examples = toy_corpus();
        let gammas = [0.0, 0.5, 1.0];
        let a = gamma_sweep(&hp, 9, 2, 2, &examples, &examples, &gammas).unwrap();
        let b = gamma_sweep(&hp, 9, 2, 2, &examples, &examples, &gammas).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        for (row, &g) in a.iter().zip(&gammas) {
            assert_eq!(row.0, g);
            assert!((0.0..=1.0).contains(&row.1));
        }
        // Out-of-range γ is refused before any training happens.
        assert!(gamma_sweep(&hp, 9, 2, 2, &examples, &examples, &[1.2]).is_err());
    }
}
