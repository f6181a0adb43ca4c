//! Tokenization, vocabularies, dataset ingestion, and information-gain
//! feature selection.
//!
//! Datasets are UTF-8 TSV files, one `label<TAB>text` record per line; only
//! the first tab splits, so free text may contain tabs. Tokens are maximal
//! runs of alphanumeric characters, lowercased. Information gain is computed
//! in bits from document-presence counts and can optionally prune the
//! vocabulary before embedding.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{KeatError, Result};

/// Reserved vocabulary index for out-of-vocabulary words.
pub const UNK: usize = 0;
/// Reserved vocabulary index for padding.
pub const PAD: usize = 1;

/// Character alphabet: index 0 = unknown, 1–26 = a–z, 27–36 = 0–9.
pub const CHAR_ALPHABET: usize = 37;
/// Per-word character cap; longer words are right-truncated.
pub const MAX_WORD_CHARS: usize = 16;

// ── Tokenization ─────────────────────────────────────────────────────────────

/// Lowercase and split into maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Map a token to character indices, capped at [`MAX_WORD_CHARS`].
pub fn char_ids(token: &str) -> Vec<usize> {
    token
        .chars()
        .take(MAX_WORD_CHARS)
        .map(|c| match c {
            'a'..='z' => 1 + (c as usize - 'a' as usize),
            '0'..='9' => 27 + (c as usize - '0' as usize),
            _ => 0,
        })
        .collect()
}

// ── Vocabulary ───────────────────────────────────────────────────────────────

/// Dense token→index map. Indices 0 and 1 are reserved for UNK and PAD and
/// survive every rebuild; real tokens follow, ordered by descending document
/// frequency with lexicographic tie-breaks.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    doc_freq: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from per-document token lists. Frequencies count documents, not
    /// occurrences.
    pub fn build(docs: &[Vec<String>]) -> Vocab {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            let mut seen = HashSet::new();
            for tok in doc {
                if seen.insert(tok.as_str()) {
                    *freq.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut order: Vec<(&str, usize)> = freq.into_iter().collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_sorted(order.into_iter().map(|(t, f)| (t.to_string(), f)))
    }

    fn from_sorted(entries: impl Iterator<Item = (String, usize)>) -> Vocab {
        let mut v = Vocab {
            tokens: vec!["<unk>".into(), "<pad>".into()],
            doc_freq: vec![0, 0],
            index: HashMap::new(),
        };
        v.index.insert("<unk>".into(), UNK);
        v.index.insert("<pad>".into(), PAD);
        for (tok, f) in entries {
            let id = v.tokens.len();
            v.index.insert(tok.clone(), id);
            v.tokens.push(tok);
            v.doc_freq.push(f);
        }
        v
    }

    /// Keep only the listed tokens (reserved entries always stay); ordering is
    /// recomputed with the same frequency/lexicographic key.
    pub fn retain(&self, keep: &HashSet<String>) -> Vocab {
        let mut kept: Vec<(String, usize)> = self
            .tokens
            .iter()
            .zip(&self.doc_freq)
            .skip(2)
            .filter(|(t, _)| keep.contains(*t))
            .map(|(t, f)| (t.clone(), *f))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_sorted(kept.into_iter())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn doc_freq(&self, id: usize) -> usize {
        self.doc_freq[id]
    }

    /// `(token, doc_freq)` rows in index order, reserved entries included.
    /// [`Vocab::from_entries`] reverses this exactly.
    pub fn entries(&self) -> Vec<(String, usize)> {
        self.tokens.iter().cloned().zip(self.doc_freq.iter().copied()).collect()
    }

    pub fn from_entries(entries: Vec<(String, usize)>) -> Result<Vocab> {
        if entries.len() < 2 || entries[0].0 != "<unk>" || entries[1].0 != "<pad>" {
            return Err(KeatError::contract(
                "vocabulary entries must start with <unk>, <pad>",
            ));
        }
        Ok(Self::from_sorted(entries.into_iter().skip(2)))
    }
}

// ── Documents ────────────────────────────────────────────────────────────────

/// One classified short text, fully interned.
#[derive(Debug, Clone)]
pub struct Document {
    /// Class index in `[0, C)`.
    pub label: usize,
    pub tokens: Vec<String>,
    /// One vocabulary index per token (UNK for unseen words).
    pub word_ids: Vec<usize>,
    /// Per-token character indices, each row ≤ [`MAX_WORD_CHARS`].
    pub char_ids: Vec<Vec<usize>>,
}

/// One line of a dataset file, before interning.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub label: String,
    pub text: String,
}

/// Parse a `label<TAB>text` TSV. Lines without a tab are rejected with their
/// 1-based line number.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((label, text)) => records.push(RawRecord {
                label: label.to_string(),
                text: text.to_string(),
            }),
            None => {
                return Err(KeatError::parse(
                    path.display().to_string(),
                    i + 1,
                    "expected label<TAB>text",
                ))
            }
        }
    }
    Ok(records)
}

/// Intern label strings in first-appearance order.
pub fn intern_labels(records: &[RawRecord]) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<String> = Vec::new();
    let mut ids = Vec::with_capacity(records.len());
    for r in records {
        let id = match classes.iter().position(|c| c == &r.label) {
            Some(i) => i,
            None => {
                classes.push(r.label.clone());
                classes.len() - 1
            }
        };
        ids.push(id);
    }
    (classes, ids)
}

/// Map labels against a fixed class list (evaluation mode); unseen labels are
/// an error rather than a new class.
pub fn map_labels(records: &[RawRecord], classes: &[String]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            classes.iter().position(|c| c == &r.label).ok_or_else(|| {
                KeatError::contract(format!(
                    "label {:?} not among the model's classes {:?}",
                    r.label, classes
                ))
            })
        })
        .collect()
}

/// Tokenize and intern records into [`Document`]s.
pub fn build_documents(records: &[RawRecord], labels: &[usize], vocab: &Vocab) -> Vec<Document> {
    records
        .iter()
        .zip(labels)
        .map(|(r, &label)| {
            let tokens = tokenize(&r.text);
            let word_ids = tokens.iter().map(|t| vocab.id_or_unk(t)).collect();
            let char_ids = tokens.iter().map(|t| char_ids(t)).collect();
            Document { label, tokens, word_ids, char_ids }
        })
        .collect()
}

// ── Information gain ─────────────────────────────────────────────────────────

/// Shannon entropy in bits, with the 0·log 0 = 0 convention.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(KeatError::contract(format!("entropy: negative probability {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(KeatError::contract(format!("entropy: probabilities sum to {sum}, not 1")));
    }
    Ok(p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum())
}

fn class_priors(docs: &[Document], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for d in docs {
        counts[d.label] += 1;
    }
    counts.iter().map(|&c| c as f64 / docs.len() as f64).collect()
}

/// IG(x) = H(C) − P(x)·H(C|x) − P(x̄)·H(C|x̄), in bits, over document
/// presence. Unknown tokens have P(x) = 0 and gain 0.
pub fn information_gain(docs: &[Document], num_classes: usize, token: &str) -> Result<f64> {
    if docs.is_empty() || num_classes == 0 {
        return Err(KeatError::contract("information_gain: empty corpus"));
    }
    let mut with = vec![0usize; num_classes];
    let mut without = vec![0usize; num_classes];
    for d in docs {
        if d.tokens.iter().any(|t| t == token) {
            with[d.label] += 1;
        } else {
            without[d.label] += 1;
        }
    }
    ig_from_counts(&with, &without, docs.len(), &class_priors(docs, num_classes))
}

fn ig_from_counts(
    with: &[usize],
    without: &[usize],
    total: usize,
    priors: &[f64],
) -> Result<f64> {
    let n_with: usize = with.iter().sum();
    let n_without: usize = without.iter().sum();
    let h_c = entropy(priors)?;
    let mut ig = h_c;
    if n_with > 0 {
        let cond: Vec<f64> = with.iter().map(|&c| c as f64 / n_with as f64).collect();
        ig -= (n_with as f64 / total as f64) * entropy(&cond)?;
    }
    if n_without > 0 {
        let cond: Vec<f64> = without.iter().map(|&c| c as f64 / n_without as f64).collect();
        ig -= (n_without as f64 / total as f64) * entropy(&cond)?;
    }
    Ok(ig)
}

/// One scored vocabulary token.
#[derive(Debug, Clone)]
pub struct IgEntry {
    pub token: String,
    pub doc_freq: usize,
    pub ig_bits: f64,
    /// 1-based position after sorting by descending gain.
    pub rank: usize,
}

/// Per-token information gain for a whole corpus, sorted by rank.
#[derive(Debug, Clone)]
pub struct IgReport {
    pub entries: Vec<IgEntry>,
}

impl IgReport {
    /// Score every distinct token in one pass over the corpus. Ties rank by
    /// higher document frequency, then lexicographic order.
    pub fn build(docs: &[Document], num_classes: usize) -> Result<IgReport> {
        if docs.is_empty() || num_classes == 0 {
            return Err(KeatError::contract("ig report: empty corpus"));
        }
        let priors = class_priors(docs, num_classes);
        // token → per-class document-presence counts
        let mut presence: HashMap<&str, Vec<usize>> = HashMap::new();
        for d in docs {
            let mut seen = HashSet::new();
            for t in &d.tokens {
                if seen.insert(t.as_str()) {
                    presence.entry(t).or_insert_with(|| vec![0; num_classes])[d.label] += 1;
                }
            }
        }
        let mut class_totals = vec![0usize; num_classes];
        for d in docs {
            class_totals[d.label] += 1;
        }
        let mut entries = Vec::with_capacity(presence.len());
        for (tok, with) in presence {
            let without: Vec<usize> =
                class_totals.iter().zip(&with).map(|(t, w)| t - w).collect();
            let ig = ig_from_counts(&with, &without, docs.len(), &priors)?;
            entries.push(IgEntry {
                token: tok.to_string(),
                doc_freq: with.iter().sum(),
                ig_bits: ig,
                rank: 0,
            });
        }
        entries.sort_by(|a, b| {
            b.ig_bits
                .partial_cmp(&a.ig_bits)
                .unwrap()
                .then_with(|| b.doc_freq.cmp(&a.doc_freq))
                .then_with(|| a.token.cmp(&b.token))
        });
        for (i, e) in entries.iter_mut().enumerate() {
            e.rank = i + 1;
        }
        Ok(IgReport { entries })
    }

    /// The k highest-gain tokens, in rank order.
    pub fn select_top_k(&self, k: usize) -> Vec<String> {
        self.entries.iter().take(k).map(|e| e.token.clone()).collect()
    }

    /// `token\tdoc_freq\tig_bits\trank` lines in rank order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{:.6}\t{}\n", e.token, e.doc_freq, e.ig_bits, e.rank));
        }
        out
    }
}
