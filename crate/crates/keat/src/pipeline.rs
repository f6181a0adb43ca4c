//! End-to-end glue: labeled TSV records → vocabulary, label table, and
//! per-document concept sets → a trained model → predictions on raw text,
//! plus persistence. A checkpoint is the binary tensor archive next to a
//! `.meta` text sidecar holding the class names, vocabulary, and lexicon so
//! a loaded model can process new text exactly like the one that saved it.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{archive_training, restore_training, Archive};
use crate::concept::{conceptualize, ConceptLexicon};
use crate::corpus::{
    build_documents, char_ids, intern_labels, map_labels, tokenize, Document, IgReport,
    RawRecord, Vocab,
};
use crate::error::{KeatError, Result};
use crate::model::{Example, HyperParams, KeatModel};
use crate::trainer::{
    evaluate_model, gamma_sweep, train_model_with, AdamState, EpochMetrics, Evaluation, TrainRun,
};

/// Sidecar path for a checkpoint: the same file name with `.meta` appended.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.meta", checkpoint.display()))
}

fn attach_concepts(
    docs: Vec<Document>,
    lexicon: &ConceptLexicon,
    max_concepts: usize,
) -> Vec<Example> {
    docs.into_iter()
        .map(|doc| {
            let concept_ids = conceptualize(&doc, lexicon, max_concepts).ids();
            Example { doc, concept_ids }
        })
        .collect()
}

/// Training-ready data derived from raw records: interned classes, the
/// (possibly information-gain-pruned) vocabulary, and encoded examples.
pub struct Prepared {
    pub classes: Vec<String>,
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

pub fn prepare_training(
    records: &[RawRecord],
    lexicon: &ConceptLexicon,
    hp: &HyperParams,
) -> Result<Prepared> {
    if records.is_empty() {
        return Err(KeatError::contract("training set is empty"));
    }
    let (classes, labels) = intern_labels(records);
    if classes.len() < 2 {
        return Err(KeatError::config(format!(
            "training needs at least 2 distinct labels, found {}",
            classes.len()
        )));
    }
    let token_docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
    let mut vocab = Vocab::build(&token_docs);
    if let Some(k) = hp.top_k {
        let prelim = build_documents(records, &labels, &vocab);
        let report = IgReport::build(&prelim, classes.len())?;
        let keep: HashSet<String> = report.select_top_k(k).into_iter().collect();
        vocab = vocab.retain(&keep);
    }
    let docs = build_documents(records, &labels, &vocab);
    let examples = attach_concepts(docs, lexicon, hp.max_concepts);
    Ok(Prepared { classes, vocab, examples })
}

/// A model together with everything needed to process raw text.
pub struct TrainedModel {
    pub model: KeatModel,
    pub vocab: Vocab,
    pub classes: Vec<String>,
    pub lexicon: ConceptLexicon,
}

/// What [`TrainedModel::load`] recovers from disk.
pub struct LoadedPipeline {
    pub pipeline: TrainedModel,
    pub adam: Option<AdamState>,
    pub rng: Option<ChaCha8Rng>,
}

impl TrainedModel {
    /// Builds vocabulary and label tables from the records, trains a fresh
    /// model, and returns it with its per-epoch metrics.
    pub fn train(
        records: &[RawRecord],
        lexicon: ConceptLexicon,
        hp: &HyperParams,
    ) -> Result<(TrainedModel, TrainRun)> {
        Self::train_with(records, lexicon, hp, &mut |_| {})
    }

    /// [`TrainedModel::train`] with a per-epoch observer for streaming
    /// progress.
    pub fn train_with(
        records: &[RawRecord],
        lexicon: ConceptLexicon,
        hp: &HyperParams,
        on_epoch: &mut dyn FnMut(&EpochMetrics),
    ) -> Result<(TrainedModel, TrainRun)> {
        let prepared = prepare_training(records, &lexicon, hp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut model = KeatModel::new(
            hp,
            prepared.vocab.len(),
            lexicon.num_concepts(),
            prepared.classes.len(),
            &mut rng,
        )?;
        let run = train_model_with(&mut model, &prepared.examples, on_epoch)?;
        Ok((
            TrainedModel { model, vocab: prepared.vocab, classes: prepared.classes, lexicon },
            run,
        ))
    }

    /// Encodes unlabeled text with this model's vocabulary and lexicon.
    pub fn example_for_text(&self, text: &str) -> Example {
        let tokens = tokenize(text);
        let word_ids = tokens.iter().map(|t| self.vocab.id_or_unk(t)).collect();
        let chars = tokens.iter().map(|t| char_ids(t)).collect();
        let doc = Document { label: 0, tokens, word_ids, char_ids: chars };
        let concept_ids = conceptualize(&doc, &self.lexicon, self.model.hp.max_concepts).ids();
        Example { doc, concept_ids }
    }

    /// Predicted class name and the full probability row for one text.
    pub fn predict_text(&self, text: &str) -> Result<(String, Vec<f64>)> {
        let ex = self.example_for_text(text);
        let (probs, best) = self.model.predict_probs(&ex.doc, &ex.concept_ids)?;
        Ok((self.classes[best].clone(), probs))
    }

    /// Encodes labeled records; unknown label strings are an error.
    pub fn examples_for_records(&self, records: &[RawRecord]) -> Result<Vec<Example>> {
        let labels = map_labels(records, &self.classes)?;
        let docs = build_documents(records, &labels, &self.vocab);
        Ok(attach_concepts(docs, &self.lexicon, self.model.hp.max_concepts))
    }

    pub fn evaluate_records(&self, records: &[RawRecord]) -> Result<Evaluation> {
        let examples = self.examples_for_records(records)?;
        evaluate_model(&self.model, &examples)
    }

    /// Writes the tensor archive to `path` and the text tables to
    /// `path.meta`.
    pub fn save(
        &self,
        path: &Path,
        adam: Option<&AdamState>,
        rng: Option<&ChaCha8Rng>,
    ) -> Result<()> {
        archive_training(&self.model, adam, rng)?.write(path)?;
        fs::write(meta_path(path), self.meta_tsv())?;
        Ok(())
    }

    fn meta_tsv(&self) -> String {
        let mut out = String::new();
        for class in &self.classes {
            out.push_str(&format!("class\t{class}\n"));
        }
        for (token, doc_freq) in self.vocab.entries() {
            out.push_str(&format!("token\t{token}\t{doc_freq}\n"));
        }
        for name in self.lexicon.concept_names() {
            out.push_str(&format!("concept\t{name}\n"));
        }
        for (surface, concept_id, score) in self.lexicon.rows() {
            out.push_str(&format!("lexicon\t{surface}\t{concept_id}\t{score}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<LoadedPipeline> {
        let archive = Archive::read(path)?;
        let restored = restore_training(&archive)?;
        let meta_file = meta_path(path);
        let origin = meta_file.display().to_string();
        let content = fs::read_to_string(&meta_file)
            .map_err(|e| KeatError::parse(&origin, 0, format!("cannot read sidecar: {e}")))?;
        let meta = parse_meta(&content, &origin)?;
        let vocab = Vocab::from_entries(meta.vocab_entries)?;
        let lexicon = ConceptLexicon::from_rows(meta.concepts, meta.lexicon_rows)?;
        let model = restored.model;
        if meta.classes.len() != model.num_classes {
            return Err(KeatError::contract(format!(
                "sidecar lists {} classes but the checkpoint was trained with {}",
                meta.classes.len(),
                model.num_classes
            )));
        }
        if vocab.len() != model.set.get(model.parts.word_emb).rows() {
            return Err(KeatError::contract(format!(
                "sidecar vocabulary has {} entries but the embedding table has {} rows",
                vocab.len(),
                model.set.get(model.parts.word_emb).rows()
            )));
        }
        let table_rows = model.set.get(model.parts.concept_emb).rows();
        if lexicon.num_concepts().max(1) != table_rows {
            return Err(KeatError::contract(format!(
                "sidecar lexicon has {} concepts but the concept table has {table_rows} rows",
                lexicon.num_concepts()
            )));
        }
        Ok(LoadedPipeline {
            pipeline: TrainedModel { model, vocab, classes: meta.classes, lexicon },
            adam: restored.adam,
            rng: restored.rng,
        })
    }
}

/// Trains once per γ with a shared seed and reports held-out accuracy rows.
pub fn sweep(
    train_records: &[RawRecord],
    eval_records: &[RawRecord],
    lexicon: &ConceptLexicon,
    hp: &HyperParams,
    gammas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let prepared = prepare_training(train_records, lexicon, hp)?;
    let labels = map_labels(eval_records, &prepared.classes)?;
    let docs = build_documents(eval_records, &labels, &prepared.vocab);
    let eval_examples = attach_concepts(docs, lexicon, hp.max_concepts);
    gamma_sweep(
        hp,
        prepared.vocab.len(),
        lexicon.num_concepts(),
        prepared.classes.len(),
        &prepared.examples,
        &eval_examples,
        gammas,
    )
}

struct Meta {
    classes: Vec<String>,
    vocab_entries: Vec<(String, usize)>,
    concepts: Vec<String>,
    lexicon_rows: Vec<(String, usize, f64)>,
}

fn parse_meta(content: &str, origin: &str) -> Result<Meta> {
    let mut meta = Meta {
        classes: Vec::new(),
        vocab_entries: Vec::new(),
        concepts: Vec::new(),
        lexicon_rows: Vec::new(),
    };
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let expect = |n: usize| -> Result<()> {
            if fields.len() != n {
                Err(KeatError::parse(
                    origin,
                    i + 1,
                    format!("'{}' rows need {n} fields, got {}", fields[0], fields.len()),
                ))
            } else {
                Ok(())
            }
        };
        match fields[0] {
            "class" => {
                expect(2)?;
                meta.classes.push(fields[1].to_string());
            }
            "token" => {
                expect(3)?;
                let freq = fields[2].parse().map_err(|_| {
                    KeatError::parse(origin, i + 1, format!("bad document count {:?}", fields[2]))
                })?;
                meta.vocab_entries.push((fields[1].to_string(), freq));
            }
            "concept" => {
                expect(2)?;
                meta.concepts.push(fields[1].to_string());
            }
            "lexicon" => {
                expect(4)?;
                let id = fields[2].parse().map_err(|_| {
                    KeatError::parse(origin, i + 1, format!("bad concept id {:?}", fields[2]))
                })?;
                let score = fields[3].parse().map_err(|_| {
                    KeatError::parse(origin, i + 1, format!("bad score {:?}", fields[3]))
                })?;
                meta.lexicon_rows.push((fields[1].to_string(), id, score));
            }
            other => {
                return Err(KeatError::parse(
                    origin,
                    i + 1,
                    format!("unknown sidecar row kind {other:?}"),
                ))
            }
        }
    }
    Ok(Meta { ..meta })
}
