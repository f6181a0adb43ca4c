//! The full classifier: character-aware embeddings → Bi-GRU → an attention
//! stage (multi-head self-attention with attention pooling, or the local
//! Gaussian-biased variant) → concept fusion → affine classifier head.
//!
//! The loss is mean cross-entropy over a batch plus a single L2 term
//! `λ‖θ‖²` over weight matrices (biases and the reserved embedding rows are
//! exempt). The whole loss lives on one tape, so gradient checks cover the
//! regularizer too.
//!
//! The forward pass is written as free functions over a [`ParamSet`] plus a
//! copyable [`ModelParts`] id bundle; [`KeatModel`] owns both and delegates.
//! That split lets the finite-difference checker borrow the parameter storage
//! mutably while the graph builder keeps reading the ids.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::concept::DEFAULT_MAX_CONCEPTS;
use crate::corpus::{Document, CHAR_ALPHABET};
use crate::encoder::{
    attention_pool, bigru_forward, embed_tokens, multihead_self_attention, pooling_weights,
    BiGruParams, CharCnnParams, MultiHeadParams,
};
use crate::error::{KeatError, Result};
use crate::fusion::{concept_attention, FusionParams};
use crate::gradcheck::{check_graph, CheckOutcome};
use crate::local_attn::{local_attention_layer, LocalAttnMode, LocalAttnParams};
use crate::tape::{ParamId, ParamSet, Regularization, Tape, VarId};
use crate::tensor::Tensor;

/// Every knob in one place: layer widths, fusion and regularization
/// coefficients, optimizer settings, and the attention-stage selection.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub word_dim: usize,
    pub char_dim: usize,
    pub concept_dim: usize,
    /// GRU hidden width per direction; the text feature is 2× this.
    pub hidden: usize,
    pub heads: usize,
    /// Width of the text-conditioned fusion scorer (d_a).
    pub fusion_text_dim: usize,
    /// Width of the set-internal fusion scorer (d_b).
    pub fusion_set_dim: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init_std: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_concepts: usize,
    /// Keep only the top-k vocabulary tokens by information gain, if set.
    pub top_k: Option<usize>,
    /// `None` selects multi-head self-attention with attention pooling.
    pub local_attn: Option<LocalAttnMode>,
    /// Build the concept feature from raw α instead of the fused weights.
    pub use_raw_alpha: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            word_dim: 300,
            char_dim: 50,
            concept_dim: 100,
            hidden: 100,
            heads: 4,
            fusion_text_dim: 64,
            fusion_set_dim: 64,
            gamma: 0.5,
            lambda: 1e-4,
            dropout: 0.3,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_std: 0.1,
            batch_size: 50,
            epochs: 10,
            seed: 42,
            max_concepts: DEFAULT_MAX_CONCEPTS,
            top_k: None,
            local_attn: None,
            use_raw_alpha: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("concept_dim", self.concept_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("fusion_text_dim", self.fusion_text_dim),
            ("fusion_set_dim", self.fusion_set_dim),
            ("batch_size", self.batch_size),
            ("max_concepts", self.max_concepts),
        ] {
            if v == 0 {
                return Err(KeatError::config(format!("{name} must be positive")));
            }
        }
        if (2 * self.hidden) % self.heads != 0 {
            return Err(KeatError::config(format!(
                "heads ({}) must divide the 2×hidden model width ({})",
                self.heads,
                2 * self.hidden
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(KeatError::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KeatError::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("init_std", self.init_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(KeatError::config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(KeatError::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if let Some(k) = self.top_k {
            if k == 0 {
                return Err(KeatError::config("top_k must be positive when set"));
            }
        }
        Ok(())
    }

    /// Width of the Bi-GRU output rows (and of the pooled text feature q).
    pub fn model_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// One document ready for the forward pass: token/char indices plus the ids
/// of its retrieved concepts (possibly none).
#[derive(Debug, Clone)]
pub struct Example {
    pub doc: Document,
    pub concept_ids: Vec<usize>,
}

pub struct Forward {
    /// 1×C unnormalized class scores.
    pub logits: VarId,
    /// 1×2u pooled text feature q.
    pub text_feature: VarId,
    /// 1×d_c concept feature r (a zero leaf when no concepts matched).
    pub concept_feature: VarId,
    /// Per-step attention mass: 1×n pooling weights in the multi-head stage,
    /// n×1 β in the local stage.
    pub step_weights: VarId,
}

/// Parameter ids for the whole network, cheap to hand around by value.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub word_emb: ParamId,
    pub char_cnn: CharCnnParams,
    pub bigru: BiGruParams,
    pub attn: MultiHeadParams,
    pub local: LocalAttnParams,
    pub fusion: FusionParams,
    pub concept_emb: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

/// Registers every parameter in a fixed order (checkpoints depend on it).
/// `num_concepts` may be zero; the concept table then keeps one unused row.
pub fn register_model(
    set: &mut ParamSet,
    hp: &HyperParams,
    vocab_len: usize,
    num_concepts: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParts> {
    hp.validate()?;
    if vocab_len < 2 {
        return Err(KeatError::config(format!(
            "vocabulary must include the reserved rows, got {vocab_len}"
        )));
    }
    if num_classes == 0 {
        return Err(KeatError::config("model needs at least one class"));
    }
    let std = hp.init_std;
    let word_emb = set.register(
        "emb.word",
        Tensor::randn(vec![vocab_len, hp.word_dim], std, rng),
        Regularization::SkipFirstRows(2),
    );
    let char_cnn = CharCnnParams::register(set, CHAR_ALPHABET, hp.char_dim, 3, std, rng);
    let bigru = BiGruParams::register(set, hp.word_dim + hp.char_dim, hp.hidden, std, rng);
    let attn = MultiHeadParams::register(set, hp.model_dim(), hp.heads, std, rng)?;
    let local =
        LocalAttnParams::register(set, hp.model_dim(), hp.hidden, hp.model_dim(), std, rng);
    let fusion = FusionParams::register(
        set,
        hp.concept_dim,
        hp.model_dim(),
        hp.fusion_text_dim,
        hp.fusion_set_dim,
        std,
        rng,
    );
    let concept_emb = set.register(
        "concepts",
        Tensor::randn(vec![num_concepts.max(1), hp.concept_dim], std, rng),
        Regularization::Full,
    );
    let cls_w = set.register(
        "cls.w",
        Tensor::randn(vec![hp.model_dim() + hp.concept_dim, num_classes], std, rng),
        Regularization::Full,
    );
    let cls_b = set.register("cls.b", Tensor::zeros(vec![1, num_classes]), Regularization::None);
    Ok(ModelParts {
        word_emb,
        char_cnn,
        bigru,
        attn,
        local,
        fusion,
        concept_emb,
        cls_w,
        cls_b,
    })
}

/// Documents with no tokens flow through as a single unknown word.
fn effective_doc(doc: &Document) -> Document {
    if doc.word_ids.is_empty() {
        Document { label: doc.label, tokens: Vec::new(), word_ids: vec![0], char_ids: vec![vec![0]] }
    } else {
        doc.clone()
    }
}

/// One document through the network. `dropout_rng` enables the training
/// dropout mask on the embedding rows; pass `None` for inference and
/// gradient checks.
pub fn model_forward(
    tape: &mut Tape,
    set: &ParamSet,
    parts: &ModelParts,
    hp: &HyperParams,
    doc: &Document,
    concept_ids: &[usize],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    let doc = effective_doc(doc);
    let mut x = embed_tokens(tape, set, parts.word_emb, &parts.char_cnn, &doc)?;
    if let Some(rng) = dropout_rng.as_deref_mut() {
        if hp.dropout > 0.0 {
            let keep = 1.0 - hp.dropout;
            let mask: Vec<f64> = (0..tape.value(x).numel())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            x = tape.dropout(x, &mask)?;
        }
    }
    let h = bigru_forward(tape, set, &parts.bigru, x)?;
    let (q, step_weights) = match hp.local_attn {
        None => {
            let (mixed, head_weights) = multihead_self_attention(tape, set, &parts.attn, h)?;
            let a = pooling_weights(tape, &head_weights)?;
            let (_weighted, pooled) = attention_pool(tape, mixed, a)?;
            (pooled, a)
        }
        Some(mode) => {
            let out = local_attention_layer(tape, set, &parts.local, h, mode)?;
            (out.pooled, out.beta)
        }
    };
    let r = if concept_ids.is_empty() {
        tape.leaf(Tensor::zeros(vec![1, hp.concept_dim]))
    } else {
        let table = tape.param(set, parts.concept_emb);
        let rows = tape.gather(table, concept_ids)?;
        let out =
            concept_attention(tape, set, &parts.fusion, rows, q, hp.gamma, hp.use_raw_alpha)?;
        out.feature
    };
    let joined = tape.concat(q, r, 1)?;
    let w = tape.param(set, parts.cls_w);
    let b = tape.param(set, parts.cls_b);
    let lin = tape.matmul(joined, w)?;
    let logits = tape.add_bias(lin, b)?;
    Ok(Forward { logits, text_feature: q, concept_feature: r, step_weights })
}

/// `λ‖θ‖²` over the regularized parameters as a tape scalar, or `None` when
/// λ = 0.
pub fn regularization_term(tape: &mut Tape, set: &ParamSet, lambda: f64) -> Result<Option<VarId>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let mut acc: Option<VarId> = None;
    for (id, _, tensor) in set.iter() {
        let body = match set.regularization(id) {
            Regularization::None => continue,
            Regularization::Full => tape.param(set, id),
            Regularization::SkipFirstRows(k) => {
                if k >= tensor.rows() {
                    continue;
                }
                let full = tape.param(set, id);
                tape.slice_rows(full, k, tensor.rows() - k)?
            }
        };
        let sq = tape.mul(body, body)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    match acc {
        None => Ok(None),
        Some(a) => Ok(Some(tape.affine(a, lambda, 0.0)?)),
    }
}

/// Mean cross-entropy over the batch plus one regularization term.
pub fn model_batch_loss(
    tape: &mut Tape,
    set: &ParamSet,
    parts: &ModelParts,
    hp: &HyperParams,
    num_classes: usize,
    batch: &[&Example],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<VarId> {
    if batch.is_empty() {
        return Err(KeatError::contract("batch_loss: empty batch"));
    }
    let mut acc: Option<VarId> = None;
    for ex in batch {
        if ex.doc.label >= num_classes {
            return Err(KeatError::contract(format!(
                "label {} out of range for {num_classes} classes",
                ex.doc.label
            )));
        }
        let fwd =
            model_forward(tape, set, parts, hp, &ex.doc, &ex.concept_ids, dropout_rng.as_deref_mut())?;
        let ce = tape.cross_entropy(fwd.logits, ex.doc.label)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    let mean = tape.affine(acc.unwrap(), 1.0 / batch.len() as f64, 0.0)?;
    match regularization_term(tape, set, hp.lambda)? {
        None => Ok(mean),
        Some(reg) => tape.add(mean, reg),
    }
}

pub struct KeatModel {
    pub hp: HyperParams,
    pub num_classes: usize,
    pub set: ParamSet,
    pub parts: ModelParts,
}

impl KeatModel {
    pub fn new(
        hp: &HyperParams,
        vocab_len: usize,
        num_concepts: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<KeatModel> {
        let mut set = ParamSet::new();
        let parts = register_model(&mut set, hp, vocab_len, num_concepts, num_classes, rng)?;
        // Keep parameters on the 32-bit grid that checkpoints store, so a
        // save/load cycle at any point is bit-exact.
        set.snap_to_f32();
        Ok(KeatModel { hp: hp.clone(), num_classes, set, parts })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        doc: &Document,
        concept_ids: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        model_forward(tape, &self.set, &self.parts, &self.hp, doc, concept_ids, dropout_rng)
    }

    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        batch: &[&Example],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        model_batch_loss(
            tape,
            &self.set,
            &self.parts,
            &self.hp,
            self.num_classes,
            batch,
            dropout_rng,
        )
    }

    /// Class probabilities for one document on a fresh tape, plus the argmax
    /// label (ties resolve to the lowest index).
    pub fn predict_probs(&self, doc: &Document, concept_ids: &[usize]) -> Result<(Vec<f64>, usize)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, doc, concept_ids, None)?;
        let probs = tape.softmax(fwd.logits, 1)?;
        let p = tape.value(probs).data().to_vec();
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok((p, best))
    }

    /// Finite-difference check of the batch loss over every parameter.
    /// Dropout stays off so repeated rebuilds see the same function.
    pub fn gradient_check(&mut self, batch: &[&Example], h: f64) -> Result<CheckOutcome> {
        let KeatModel { ref mut set, ref parts, ref hp, num_classes } = *self;
        check_graph(set, h, &mut |tape, s| {
            model_batch_loss(tape, s, parts, hp, num_classes, batch, None)
        })
    }
}
