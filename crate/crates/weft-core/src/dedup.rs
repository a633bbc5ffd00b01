//! Two-step deduplication: corpus-wide exact-line removal, then n-gram
//! paragraph/document deduplication in the one-instance-only style.
//!
//! Exact-line removal hashes normalized lines and keeps the first occurrence
//! corpus-wide. The n-gram step marks a paragraph duplicate when the
//! proportion of its word 5-grams already seen exceeds a threshold, and
//! drops the whole document when the duplicate-paragraph ratio exceeds a
//! second threshold. Results depend on processing order, which is fixed to
//! input file order.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{paragraph_blocks, words, Document};
use crate::error::{Error, Result};

/// 64-bit FNV-1a. A fixed non-cryptographic hash keeps dedup output stable
/// across builds; collisions are accepted as negligible at desk scale.
pub(crate) fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Lowercases and keeps only alphanumerics and spaces, collapsing runs of
/// spaces and trimming the ends.
pub fn normalize_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut pending_space = false;
    for c in line.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else if c == ' ' {
            pending_space = true;
        }
    }
    out
}

/// Set of normalized-line hashes seen so far, with optional occurrence
/// counts for reporting.
#[derive(Debug, Default)]
pub struct LineIndex {
    seen: HashSet<u64>,
    counts: Option<HashMap<u64, u64>>,
}

impl LineIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_counts() -> Self {
        LineIndex {
            seen: HashSet::new(),
            counts: Some(HashMap::new()),
        }
    }

    /// Records a normalized line; returns true when it was seen before.
    fn record(&mut self, normalized: &str) -> bool {
        let h = fnv1a_64(normalized.as_bytes());
        if let Some(counts) = &mut self.counts {
            *counts.entry(h).or_insert(0) += 1;
        }
        !self.seen.insert(h)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// What happened to a document in a dedup step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocAction {
    Kept,
    LineTrimmed,
    Dropped,
}

#[derive(Debug)]
pub struct LineDedupOutcome {
    /// `None` when the document text became empty and the document dropped.
    pub doc: Option<Document>,
    pub action: DocAction,
    pub removed_lines: usize,
}

/// Removes lines whose normalized form was seen earlier in the corpus; the
/// first occurrence stays. Lines that normalize to nothing (blank lines,
/// pure punctuation) are structural and exempt. Documents whose text becomes
/// empty are dropped.
pub fn exact_line_dedup_doc(doc: Document, index: &mut LineIndex) -> LineDedupOutcome {
    let mut kept = Vec::new();
    let mut removed = 0usize;
    for line in doc.text.split('\n') {
        let normalized = normalize_line(line);
        if normalized.is_empty() {
            kept.push(line);
            continue;
        }
        if index.record(&normalized) {
            removed += 1;
        } else {
            kept.push(line);
        }
    }
    if removed == 0 {
        return LineDedupOutcome {
            doc: Some(doc),
            action: DocAction::Kept,
            removed_lines: 0,
        };
    }
    let text = kept.join("\n");
    if text.trim().is_empty() {
        return LineDedupOutcome {
            doc: None,
            action: DocAction::Dropped,
            removed_lines: removed,
        };
    }
    let mut doc = doc;
    doc.text = text;
    LineDedupOutcome {
        doc: Some(doc),
        action: DocAction::LineTrimmed,
        removed_lines: removed,
    }
}

/// Accumulated n-gram hashes plus the thresholds of the n-gram step.
#[derive(Debug, Clone)]
pub struct NGramState {
    seen: HashSet<u64>,
    pub n: usize,
    pub dup_threshold: f64,
    pub doc_threshold: f64,
    /// Whether dropped documents' n-grams still seed the seen set.
    pub seed_dropped: bool,
}

impl Default for NGramState {
    fn default() -> Self {
        NGramState {
            seen: HashSet::new(),
            n: 5,
            dup_threshold: 0.5,
            doc_threshold: 0.5,
            seed_dropped: true,
        }
    }
}

impl NGramState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("ngram size must be >= 1".into()));
        }
        for (name, v) in [
            ("dup_threshold", self.dup_threshold),
            ("doc_threshold", self.doc_threshold),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn seen_len(&self) -> usize {
        self.seen.len()
    }
}

/// Distinct hashes of the word n-grams of one paragraph.
fn paragraph_ngrams(paragraph: &str, n: usize) -> HashSet<u64> {
    let tokens: Vec<String> = words(paragraph)
        .into_iter()
        .map(|w| w.to_lowercase())
        .collect();
    let mut grams = HashSet::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            grams.insert(fnv1a_64(window.join(" ").as_bytes()));
        }
    }
    grams
}

#[derive(Debug)]
pub struct OnionOutcome {
    pub doc: Option<Document>,
    pub action: DocAction,
    /// Duplicate paragraphs over total paragraphs.
    pub dup_ratio: f64,
    pub removed_paragraphs: usize,
}

/// Classifies every paragraph against the n-grams seen so far, then adds all
/// of this document's n-grams to the state. Paragraphs with fewer than `n`
/// words produce no n-grams and are never duplicates.
pub fn onion_dedup_doc(doc: Document, state: &mut NGramState) -> OnionOutcome {
    let blocks = paragraph_blocks(&doc.text);
    let total = blocks.len();
    if total == 0 {
        return OnionOutcome {
            doc: Some(doc),
            action: DocAction::Kept,
            dup_ratio: 0.0,
            removed_paragraphs: 0,
        };
    }
    let grams_per_block: Vec<HashSet<u64>> = blocks
        .iter()
        .map(|b| paragraph_ngrams(b, state.n))
        .collect();
    let duplicate: Vec<bool> = grams_per_block
        .iter()
        .map(|grams| {
            if grams.is_empty() {
                false
            } else {
                let seen = grams.iter().filter(|g| state.seen.contains(g)).count();
                seen as f64 / grams.len() as f64 > state.dup_threshold
            }
        })
        .collect();
    let dup_count = duplicate.iter().filter(|d| **d).count();
    let dup_ratio = dup_count as f64 / total as f64;
    let dropped = dup_ratio > state.doc_threshold;

    if !dropped || state.seed_dropped {
        for grams in &grams_per_block {
            state.seen.extend(grams.iter().copied());
        }
    }

    if dropped {
        return OnionOutcome {
            doc: None,
            action: DocAction::Dropped,
            dup_ratio,
            removed_paragraphs: total,
        };
    }
    if dup_count == 0 {
        return OnionOutcome {
            doc: Some(doc),
            action: DocAction::Kept,
            dup_ratio,
            removed_paragraphs: 0,
        };
    }
    let survivors: Vec<&str> = blocks
        .iter()
        .zip(&duplicate)
        .filter(|(_, dup)| !**dup)
        .map(|(b, _)| *b)
        .collect();
    let text = survivors.join("\n\n");
    if text.trim().is_empty() {
        return OnionOutcome {
            doc: None,
            action: DocAction::Dropped,
            dup_ratio,
            removed_paragraphs: dup_count,
        };
    }
    let mut doc = doc;
    doc.text = text;
    OnionOutcome {
        doc: Some(doc),
        action: DocAction::LineTrimmed,
        dup_ratio,
        removed_paragraphs: dup_count,
    }
}

/// Deduplication scope, selected per language in the pipeline config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupMode {
    /// One shared state across the whole corpus.
    WholeCorpus,
    /// Independent line index and n-gram state per `source` value.
    PerSource,
    /// Exact-line step only.
    LinesOnly,
}

impl std::str::FromStr for DedupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corpus" | "whole-corpus" => Ok(DedupMode::WholeCorpus),
            "source" | "per-source" => Ok(DedupMode::PerSource),
            "lines-only" | "skip-onion" => Ok(DedupMode::LinesOnly),
            other => Err(Error::Config(format!("unknown dedup mode: {other}"))),
        }
    }
}

/// One report line per input document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupReportEntry {
    pub id: String,
    pub action: DocAction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dup_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DedupParams {
    pub n: usize,
    pub dup_threshold: f64,
    pub doc_threshold: f64,
    pub seed_dropped: bool,
}

impl Default for DedupParams {
    fn default() -> Self {
        let s = NGramState::default();
        DedupParams {
            n: s.n,
            dup_threshold: s.dup_threshold,
            doc_threshold: s.doc_threshold,
            seed_dropped: s.seed_dropped,
        }
    }
}

impl DedupParams {
    fn state(&self) -> NGramState {
        NGramState {
            seen: HashSet::new(),
            n: self.n,
            dup_threshold: self.dup_threshold,
            doc_threshold: self.doc_threshold,
            seed_dropped: self.seed_dropped,
        }
    }
}

/// Runs exact-line removal followed by the n-gram step over an in-memory
/// corpus, in input order. `PerSource` keeps a fresh line index and n-gram
/// state per source so identical documents in different sources survive.
pub fn dedup_pipeline(
    docs: Vec<Document>,
    mode: DedupMode,
    params: &DedupParams,
) -> Result<(Vec<Document>, Vec<DedupReportEntry>)> {
    params.state().validate()?;

    let mut line_indexes: BTreeMap<String, LineIndex> = BTreeMap::new();
    let mut report: Vec<DedupReportEntry> = Vec::with_capacity(docs.len());
    // (doc, index into report) pairs that survived the line stage.
    let mut survivors: Vec<(Document, usize)> = Vec::new();

    for doc in docs {
        let key = match mode {
            DedupMode::PerSource => doc.source.clone(),
            _ => String::new(),
        };
        let index = line_indexes.entry(key).or_insert_with(LineIndex::new);
        let id = doc.id.clone();
        let outcome = exact_line_dedup_doc(doc, index);
        let entry_idx = report.len();
        report.push(DedupReportEntry {
            id,
            action: outcome.action,
            dup_ratio: None,
        });
        if let Some(doc) = outcome.doc {
            survivors.push((doc, entry_idx));
        }
    }

    if mode == DedupMode::LinesOnly {
        let out = survivors.into_iter().map(|(d, _)| d).collect();
        return Ok((out, report));
    }

    let mut states: BTreeMap<String, NGramState> = BTreeMap::new();
    let mut out = Vec::new();
    for (doc, entry_idx) in survivors {
        let key = match mode {
            DedupMode::PerSource => doc.source.clone(),
            _ => String::new(),
        };
        let state = states.entry(key).or_insert_with(|| params.state());
        let outcome = onion_dedup_doc(doc, state);
        let entry = &mut report[entry_idx];
        entry.dup_ratio = Some(outcome.dup_ratio);
        match outcome.action {
            DocAction::Dropped => entry.action = DocAction::Dropped,
            DocAction::LineTrimmed => entry.action = DocAction::LineTrimmed,
            DocAction::Kept => {}
        }
        if let Some(doc) = outcome.doc {
            out.push(doc);
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, source: &str, text: &str) -> Document {
        Document::new(id, "xx", source, text)
    }

    #[test]
    fn normalize_line_rules() {
        assert_eq!(normalize_line("Hello, World!"), "hello world");
        assert_eq!(normalize_line("A--B  c."), "ab c");
        assert_eq!(normalize_line("Žīme #1"), "žīme 1");
        assert_eq!(normalize_line("  !!  "), "");
    }

    #[test]
    fn boilerplate_line_removed_after_first_occurrence() {
        let tail = "subscribe to our newsletter";
        let docs = vec![
            doc("a", "s", &format!("article one\n{tail}")),
            doc("b", "s", &format!("article two\n{tail}")),
            doc("c", "s", &format!("article three\n{tail}")),
        ];
        let mut index = LineIndex::new();
        let outcomes: Vec<_> = docs
            .into_iter()
            .map(|d| exact_line_dedup_doc(d, &mut index))
            .collect();
        assert_eq!(outcomes[0].action, DocAction::Kept);
        assert!(outcomes[0].doc.as_ref().unwrap().text.contains(tail));
        for o in &outcomes[1..] {
            assert_eq!(o.action, DocAction::LineTrimmed);
            assert!(!o.doc.as_ref().unwrap().text.contains(tail));
        }
    }

    #[test]
    fn case_and_punctuation_variants_dedup() {
        let docs = vec![
            doc("a", "s", "Breaking News: something happened"),
            doc("b", "s", "breaking news -- something happened!!"),
        ];
        // Brute-force oracle: normalized-line frequency count over the corpus.
        let mut freq: HashMap<String, usize> = HashMap::new();
        for d in &docs {
            for line in d.text.split('\n') {
                *freq.entry(normalize_line(line)).or_insert(0) += 1;
            }
        }
        assert_eq!(freq["breaking news something happened"], 2);

        let mut index = LineIndex::new();
        let mut outcomes = docs.into_iter().map(|d| exact_line_dedup_doc(d, &mut index));
        assert_eq!(outcomes.next().unwrap().action, DocAction::Kept);
        // Second doc loses its only line and is dropped.
        let second = outcomes.next().unwrap();
        assert_eq!(second.action, DocAction::Dropped);
        assert!(second.doc.is_none());
    }

    #[test]
    fn unique_lines_unchanged() {
        let mut index = LineIndex::new();
        let d = doc("a", "s", "one unique line\nanother unique line");
        let out = exact_line_dedup_doc(d.clone(), &mut index);
        assert_eq!(out.doc.unwrap().text, d.text);
    }

    fn five_word_para(tag: &str) -> String {
        format!("{tag} alpha beta gamma delta epsilon zeta")
    }

    #[test]
    fn same_document_twice_second_dropped() {
        let text = format!("{}\n\n{}", five_word_para("one"), five_word_para("two"));
        let mut state = NGramState::new();
        let first = onion_dedup_doc(doc("a", "s", &text), &mut state);
        assert_eq!(first.dup_ratio, 0.0);
        assert_eq!(first.action, DocAction::Kept);
        let second = onion_dedup_doc(doc("b", "s", &text), &mut state);
        assert_eq!(second.dup_ratio, 1.0);
        assert_eq!(second.action, DocAction::Dropped);
        assert!(second.doc.is_none());
    }

    #[test]
    fn short_paragraphs_never_duplicates() {
        let mut state = NGramState::new();
        let heading = "short heading";
        let text = format!("{heading}\n\n{heading}");
        let first = onion_dedup_doc(doc("a", "s", &text), &mut state);
        assert_eq!(first.dup_ratio, 0.0);
        let second = onion_dedup_doc(doc("b", "s", &text), &mut state);
        assert_eq!(second.dup_ratio, 0.0);
        assert_eq!(second.action, DocAction::Kept);
    }

    #[test]
    fn per_source_mode_isolates_states() {
        let text = format!("{}\n\n{}", five_word_para("one"), five_word_para("two"));
        let docs = vec![doc("a", "src-a", &text), doc("b", "src-b", &text)];
        let (out, _) =
            dedup_pipeline(docs.clone(), DedupMode::PerSource, &DedupParams::default()).unwrap();
        assert_eq!(out.len(), 2);

        let (out, report) =
            dedup_pipeline(docs, DedupMode::WholeCorpus, &DedupParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(report[1].action, DocAction::Dropped);
    }

    #[test]
    fn lines_only_skips_ngram_step() {
        let text = format!("{}\n\n{}", five_word_para("one"), five_word_para("two"));
        let docs = vec![doc("a", "s", &text), doc("b", "s", "completely different line")];
        let (out, report) =
            dedup_pipeline(docs, DedupMode::LinesOnly, &DedupParams::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(report.iter().all(|e| e.dup_ratio.is_none()));
    }

    #[test]
    fn unknown_mode_string_rejected() {
        assert!("never-heard-of-it".parse::<DedupMode>().is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in ".{0,60}") {
            let once = normalize_line(&s);
            prop_assert_eq!(normalize_line(&once), once);
        }

        #[test]
        fn pipeline_is_idempotent(seed_texts in proptest::collection::vec("[a-f ]{0,40}", 1..6)) {
            let docs: Vec<Document> = seed_texts
                .iter()
                .enumerate()
                .map(|(i, t)| doc(&format!("d{i}"), "s", t))
                .collect();
            let params = DedupParams::default();
            let (first, _) = dedup_pipeline(docs, DedupMode::WholeCorpus, &params).unwrap();
            let (second, report) =
                dedup_pipeline(first.clone(), DedupMode::WholeCorpus, &params).unwrap();
            prop_assert_eq!(&second, &first);
            prop_assert!(report.iter().all(|e| e.action == DocAction::Kept));
        }
    }
}
