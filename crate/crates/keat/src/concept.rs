//! Local knowledge-base lexicon and per-document concept retrieval.
//!
//! The lexicon is a TSV stand-in for a remote IsA knowledge graph: each row
//! maps a surface form to one scored concept. Surfaces are normalized with the
//! corpus tokenizer, so lookups are case-insensitive and punctuation-blind.
//! [`conceptualize`] matches document tokens against the lexicon — bigrams
//! before unigrams, left to right, non-overlapping — and keeps the top scoring
//! concepts for the document.
//!
//! The [`Fetcher`] trait is the seam where a live knowledge-graph client could
//! replace the file-backed lexicon without touching callers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{tokenize, Document};
use crate::error::{KeatError, Result};
use crate::tensor::Tensor;

/// Default cap on concepts kept per document.
pub const DEFAULT_MAX_CONCEPTS: usize = 10;

/// Anything that maps a normalized surface form to scored concept ids.
pub trait Fetcher {
    fn fetch(&self, surface: &str) -> &[ScoredConcept];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredConcept {
    pub concept_id: usize,
    pub score: f64,
}

/// Surface-form → scored-concept table with a dense concept vocabulary.
/// Concept ids follow first appearance in the file.
#[derive(Debug, Clone, Default)]
pub struct ConceptLexicon {
    by_surface: HashMap<String, Vec<ScoredConcept>>,
    concepts: Vec<String>,
    concept_index: HashMap<String, usize>,
}

impl ConceptLexicon {
    /// Parse a `surface\tconcept\tscore` TSV. Duplicate (surface, concept)
    /// rows merge by summing scores; per-surface lists sort by descending
    /// score, then concept id.
    pub fn load(path: &Path) -> Result<ConceptLexicon> {
        let content = fs::read_to_string(path)?;
        Self::parse(&content, &path.display().to_string())
    }

    pub fn parse(content: &str, origin: &str) -> Result<ConceptLexicon> {
        let mut lex = ConceptLexicon::default();
        for (i, line) in content.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (surface, concept, score) =
                match (fields.next(), fields.next(), fields.next()) {
                    (Some(s), Some(c), Some(v)) => (s, c, v),
                    _ => {
                        return Err(KeatError::parse(
                            origin,
                            i + 1,
                            "expected surface<TAB>concept<TAB>score",
                        ))
                    }
                };
            let score: f64 = score.trim().parse().map_err(|_| {
                KeatError::parse(origin, i + 1, format!("score {score:?} is not a number"))
            })?;
            if !score.is_finite() || score < 0.0 {
                return Err(KeatError::parse(
                    origin,
                    i + 1,
                    format!("score {score} must be finite and non-negative"),
                ));
            }
            let surface = tokenize(surface).join(" ");
            if surface.is_empty() {
                return Err(KeatError::parse(origin, i + 1, "surface has no tokens"));
            }
            let concept_id = lex.intern_concept(concept.trim());
            let list = lex.by_surface.entry(surface).or_default();
            match list.iter_mut().find(|sc| sc.concept_id == concept_id) {
                Some(sc) => sc.score += score,
                None => list.push(ScoredConcept { concept_id, score }),
            }
        }
        for list in lex.by_surface.values_mut() {
            list.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.concept_id.cmp(&b.concept_id))
            });
        }
        Ok(lex)
    }

    fn intern_concept(&mut self, name: &str) -> usize {
        if let Some(&id) = self.concept_index.get(name) {
            return id;
        }
        let id = self.concepts.len();
        self.concept_index.insert(name.to_string(), id);
        self.concepts.push(name.to_string());
        id
    }

    /// Scored concepts for a normalized surface form, best first.
    pub fn lookup(&self, surface: &str) -> &[ScoredConcept] {
        self.by_surface.get(surface).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn concept_name(&self, id: usize) -> &str {
        &self.concepts[id]
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concepts
    }

    /// Serialize back to the TSV format [`ConceptLexicon::parse`] accepts.
    /// Surfaces are emitted in sorted order so output is deterministic, and
    /// reparsing reproduces the same lookups and concept ids are reassigned
    /// consistently with row order.
    pub fn to_tsv(&self) -> String {
        let mut surfaces: Vec<&String> = self.by_surface.keys().collect();
        surfaces.sort();
        let mut out = String::new();
        for s in surfaces {
            for sc in &self.by_surface[s] {
                out.push_str(&format!("{s}\t{}\t{}\n", self.concepts[sc.concept_id], sc.score));
            }
        }
        out
    }

    /// Deterministic `(surface, concept_id, score)` rows: surfaces sorted,
    /// each surface's concepts in priority order. Unlike [`to_tsv`] this
    /// keeps numeric ids, so a rebuild preserves the interning order.
    ///
    /// [`to_tsv`]: ConceptLexicon::to_tsv
    pub fn rows(&self) -> Vec<(String, usize, f64)> {
        let mut surfaces: Vec<&String> = self.by_surface.keys().collect();
        surfaces.sort();
        let mut out = Vec::new();
        for s in surfaces {
            for sc in &self.by_surface[s] {
                out.push((s.clone(), sc.concept_id, sc.score));
            }
        }
        out
    }

    /// Rebuild from explicit concept names (position defines the id) and
    /// `(surface, concept_id, score)` rows, as produced by [`rows`].
    ///
    /// [`rows`]: ConceptLexicon::rows
    pub fn from_rows(
        concepts: Vec<String>,
        rows: Vec<(String, usize, f64)>,
    ) -> Result<ConceptLexicon> {
        let mut lex = ConceptLexicon::default();
        for (id, name) in concepts.iter().enumerate() {
            if lex.concept_index.insert(name.clone(), id).is_some() {
                return Err(KeatError::contract(format!("duplicate concept name '{name}'")));
            }
        }
        lex.concepts = concepts;
        for (surface, concept_id, score) in rows {
            if concept_id >= lex.concepts.len() {
                return Err(KeatError::contract(format!(
                    "lexicon row for '{surface}' references concept {concept_id} of {}",
                    lex.concepts.len()
                )));
            }
            if !score.is_finite() || score < 0.0 {
                return Err(KeatError::contract(format!(
                    "lexicon row for '{surface}' has invalid score {score}"
                )));
            }
            let surface = tokenize(&surface).join(" ");
            if surface.is_empty() {
                return Err(KeatError::contract("lexicon row surface has no tokens"));
            }
            let list = lex.by_surface.entry(surface).or_default();
            match list.iter_mut().find(|sc| sc.concept_id == concept_id) {
                Some(sc) => sc.score += score,
                None => list.push(ScoredConcept { concept_id, score }),
            }
        }
        for list in lex.by_surface.values_mut() {
            list.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.concept_id.cmp(&b.concept_id))
            });
        }
        Ok(lex)
    }
}

impl Fetcher for ConceptLexicon {
    fn fetch(&self, surface: &str) -> &[ScoredConcept] {
        self.lookup(surface)
    }
}

/// One retained concept with its first matching surface form and merged score.
#[derive(Debug, Clone)]
pub struct ConceptMatch {
    pub concept_id: usize,
    pub surface: String,
    pub score: f64,
}

/// Ranked concept ids for one document; at most `max_concepts`, no duplicates.
#[derive(Debug, Clone, Default)]
pub struct ConceptSet {
    pub items: Vec<ConceptMatch>,
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.items.iter().map(|m| m.concept_id).collect()
    }
}

/// Match a document against the lexicon. Bigrams win over unigrams (longest
/// match, left to right, non-overlapping); duplicate concepts merge by summing
/// scores; the survivors are the `max_concepts` best by merged score, ties
/// broken by earliest match position, then concept id.
pub fn conceptualize(
    doc: &Document,
    lex: &dyn Fetcher,
    max_concepts: usize,
) -> ConceptSet {
    struct Partial {
        surface: String,
        score: f64,
        first_pos: usize,
    }
    let mut merged: HashMap<usize, Partial> = HashMap::new();
    let toks = &doc.tokens;
    let mut i = 0;
    let mut pos = 0; // match counter, for stable tie-breaking
    while i < toks.len() {
        let (surface, hits, step) = if i + 1 < toks.len() {
            let bigram = format!("{} {}", toks[i], toks[i + 1]);
            let hits = lex.fetch(&bigram);
            if hits.is_empty() {
                (toks[i].clone(), lex.fetch(&toks[i]), 1)
            } else {
                (bigram, hits, 2)
            }
        } else {
            (toks[i].clone(), lex.fetch(&toks[i]), 1)
        };
        for sc in hits {
            merged
                .entry(sc.concept_id)
                .and_modify(|p| p.score += sc.score)
                .or_insert_with(|| Partial {
                    surface: surface.clone(),
                    score: sc.score,
                    first_pos: pos,
                });
        }
        if !hits.is_empty() {
            pos += 1;
        }
        i += step;
    }
    let mut ranked: Vec<(usize, ConceptMatch)> = merged
        .into_iter()
        .map(|(concept_id, p)| {
            (p.first_pos, ConceptMatch { concept_id, surface: p.surface, score: p.score })
        })
        .collect();
    ranked.sort_by(|(pa, a), (pb, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| pa.cmp(pb))
            .then_with(|| a.concept_id.cmp(&b.concept_id))
    });
    ranked.truncate(max_concepts);
    ConceptSet { items: ranked.into_iter().map(|(_, m)| m).collect() }
}

/// Stack the embedding rows for a concept set: row i is the table row of
/// concept i. Empty sets return `None`; the classifier then runs on the text
/// feature alone.
pub fn embed_concepts(cs: &ConceptSet, table: &Tensor) -> Result<Option<Tensor>> {
    if cs.is_empty() {
        return Ok(None);
    }
    let d = table.cols();
    let mut data = Vec::with_capacity(cs.len() * d);
    for m in &cs.items {
        if m.concept_id >= table.rows() {
            return Err(KeatError::contract(format!(
                "concept id {} out of range for embedding table with {} rows",
                m.concept_id,
                table.rows()
            )));
        }
        data.extend_from_slice(table.row_slice(m.concept_id));
    }
    Ok(Some(Tensor::new(vec![cs.len(), d], data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{char_ids, tokenize};

    fn doc(text: &str) -> Document {
        let tokens = tokenize(text);
        let char_ids = tokens.iter().map(|t| char_ids(t)).collect();
        Document { label: 0, word_ids: vec![0; tokens.len()], tokens, char_ids }
    }

    #[test]
    fn lexicon_parses_groups_and_sorts() {
        let lex = ConceptLexicon::parse(
            "apple\tfruit\t0.8\nbulls\tbasketball team\t0.9\nbulls\tanimal\t0.6\n",
            "mem",
        )
        .unwrap();
        let apple = lex.lookup("apple");
        assert_eq!(apple.len(), 1);
        assert_eq!(lex.concept_name(apple[0].concept_id), "fruit");
        assert_eq!(apple[0].score, 0.8);
        let bulls = lex.lookup("bulls");
        assert_eq!(bulls.len(), 2);
        assert_eq!(lex.concept_name(bulls[0].concept_id), "basketball team");
        assert_eq!(lex.concept_name(bulls[1].concept_id), "animal");
        // Empty lexicon: lookups return nothing.
        let empty = ConceptLexicon::parse("", "mem").unwrap();
        assert!(empty.lookup("apple").is_empty());
        assert_eq!(empty.num_concepts(), 0);
    }

    #[test]
    fn lexicon_normalizes_surfaces_and_merges_duplicates() {
        let lex = ConceptLexicon::parse(
            "Apple!\tfruit\t0.5\napple\tfruit\t0.25\nSteve Jobs\tentrepreneur\t0.9\n",
            "mem",
        )
        .unwrap();
        let apple = lex.lookup("apple");
        assert_eq!(apple.len(), 1);
        assert_eq!(apple[0].score, 0.75);
        assert_eq!(lex.lookup("steve jobs").len(), 1);
        assert!(lex.lookup("Steve Jobs").is_empty()); // callers pass normalized forms
    }

    #[test]
    fn lexicon_rejects_bad_rows_with_line_numbers() {
        match ConceptLexicon::parse("a\tb\t0.5\na\tb\tnot-a-number\n", "mem") {
            Err(KeatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(ConceptLexicon::parse("a\tb\t-1.0\n", "mem").is_err());
        assert!(ConceptLexicon::parse("only two\tfields\n", "mem").is_err());
        assert!(ConceptLexicon::parse("!!!\tconcept\t1.0\n", "mem").is_err());
    }

    #[test]
    fn lexicon_round_trips_through_tsv() {
        let src = "bulls\tbasketball team\t0.9\nbulls\tanimal\t0.6\napple\tfruit\t0.8\n";
        let lex = ConceptLexicon::parse(src, "mem").unwrap();
        let rt = ConceptLexicon::parse(&lex.to_tsv(), "rt").unwrap();
        for surface in ["bulls", "apple"] {
            let a: Vec<(String, f64)> = lex
                .lookup(surface)
                .iter()
                .map(|sc| (lex.concept_name(sc.concept_id).to_string(), sc.score))
                .collect();
            let b: Vec<(String, f64)> = rt
                .lookup(surface)
                .iter()
                .map(|sc| (rt.concept_name(sc.concept_id).to_string(), sc.score))
                .collect();
            assert_eq!(a, b);
        }
        assert_eq!(lex.to_tsv(), ConceptLexicon::parse(&lex.to_tsv(), "rt2").unwrap().to_tsv());
    }

    #[test]
    fn rows_round_trip_preserves_concept_ids() {
        // Intern order (zebra first) differs from surface sort order, so a
        // plain TSV reparse would renumber; the rows path must not.
        let lex =
            ConceptLexicon::parse("zebra\tanimal\t0.9\napple\tfruit\t0.8\n", "mem").unwrap();
        assert_eq!(lex.concept_name(0), "animal");
        let rebuilt =
            ConceptLexicon::from_rows(lex.concept_names().to_vec(), lex.rows()).unwrap();
        assert_eq!(rebuilt.concept_names(), lex.concept_names());
        for surface in ["zebra", "apple"] {
            assert_eq!(rebuilt.lookup(surface), lex.lookup(surface));
        }
        assert_eq!(rebuilt.rows(), lex.rows());
        // Bad references are refused.
        assert!(ConceptLexicon::from_rows(
            vec!["a".into()],
            vec![("x".into(), 3, 0.5)]
        )
        .is_err());
        assert!(ConceptLexicon::from_rows(vec!["a".into(), "a".into()], vec![]).is_err());
    }

    #[test]
    fn bigram_beats_unigram_and_consumes_its_tokens() {
        let lex = ConceptLexicon::parse(
            "steve jobs\tentrepreneur\t0.9\nsteve jobs\tperson\t0.7\n\
             jobs\temployment\t0.95\napple\tfruit\t0.8\napple\tcompany\t0.6\n",
            "mem",
        )
        .unwrap();
        let cs = conceptualize(&doc("Steve Jobs is one of the cofounders of Apple"), &lex, 10);
        let names: Vec<&str> = cs.ids().iter().map(|&id| lex.concept_name(id)).collect();
        assert!(names.contains(&"entrepreneur"));
        assert!(names.contains(&"person"));
        assert!(names.contains(&"fruit"));
        // "jobs" sat inside the matched bigram, so its unigram never fires.
        assert!(!names.contains(&"employment"));
        // Ranked by score: entrepreneur 0.9 > fruit 0.8 > person 0.7 > company 0.6.
        assert_eq!(names, ["entrepreneur", "fruit", "person", "company"]);
    }

    #[test]
    fn conceptualize_merges_scores_and_truncates() {
        // Two different surfaces feed the same concept; scores must sum.
        let lex = ConceptLexicon::parse(
            "dog\tanimal\t0.4\ncat\tanimal\t0.5\ncat\tpet\t0.45\n",
            "mem",
        )
        .unwrap();
        let cs = conceptualize(&doc("dog and cat"), &lex, 10);
        let animal = cs
            .items
            .iter()
            .find(|m| lex.concept_name(m.concept_id) == "animal")
            .unwrap();
        assert!((animal.score - 0.9).abs() < 1e-12);
        assert_eq!(animal.surface, "dog"); // first contributing surface wins
        // Brute-force re-scan: merged score equals the sum over all matches.
        let brute: f64 = ["dog", "cat"]
            .iter()
            .flat_map(|s| lex.lookup(s))
            .filter(|sc| lex.concept_name(sc.concept_id) == "animal")
            .map(|sc| sc.score)
            .sum();
        assert_eq!(animal.score, brute);

        // Truncation keeps the best-scoring concepts only.
        let cs1 = conceptualize(&doc("dog and cat"), &lex, 1);
        assert_eq!(cs1.len(), 1);
        assert_eq!(lex.concept_name(cs1.items[0].concept_id), "animal");

        // No hits → empty set; determinism across repeated runs.
        assert!(conceptualize(&doc("nothing matches here"), &lex, 10).is_empty());
        let a = conceptualize(&doc("dog and cat"), &lex, 10).ids();
        let b = conceptualize(&doc("dog and cat"), &lex, 10).ids();
        assert_eq!(a, b);
    }

    #[test]
    fn embed_concepts_stacks_rows_or_signals_empty() {
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cs = ConceptSet {
            items: vec![ConceptMatch { concept_id: 2, surface: "x".into(), score: 1.0 }],
        };
        let emb = embed_concepts(&cs, &table).unwrap().unwrap();
        assert_eq!(emb.shape(), &[1, 2]);
        assert_eq!(emb.data(), &[5.0, 6.0]);
        assert!(embed_concepts(&ConceptSet::default(), &table).unwrap().is_none());
        let bad = ConceptSet {
            items: vec![ConceptMatch { concept_id: 9, surface: "x".into(), score: 1.0 }],
        };
        assert!(matches!(embed_concepts(&bad, &table), Err(KeatError::Contract(_))));
    }
}
