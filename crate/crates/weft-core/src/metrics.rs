//! Evaluation mathematics: per-character perplexity, Borda-count
//! aggregation, ChrF++, normalized word edit distance, and the memorization
//! audit harness.
//!
//! Log-probabilities are natural log throughout, summed over tokens.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{is_punctuation, Document};
use crate::error::{Error, Result};

/// A text with its model score: natural-log probability summed over tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub total_log_prob: f64,
    pub token_count: u64,
}

impl ScoredText {
    pub fn char_count(&self) -> usize {
        self.text.chars().count()
    }
}

/// exp(-total_log_prob / char_count): tokenizer-independent, so models with
/// different vocabularies become comparable.
pub fn per_char_perplexity(s: &ScoredText) -> Result<f64> {
    let chars = s.char_count();
    if chars == 0 {
        return Err(Error::Validation("empty text has no perplexity".into()));
    }
    if s.token_count == 0 {
        return Err(Error::Validation(
            "non-empty text must have token_count >= 1".into(),
        ));
    }
    Ok((-s.total_log_prob / chars as f64).exp())
}

/// (baseline - ours) / baseline, as a percentage. Positive when ours is
/// lower (better).
pub fn relative_improvement(ours: f64, baseline: f64) -> Result<f64> {
    if ours <= 0.0 || baseline <= 0.0 {
        return Err(Error::Validation("perplexities must be positive".into()));
    }
    Ok((baseline - ours) / baseline * 100.0)
}

/// Dense benchmark score table: every model scored on every task.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    /// model -> task -> score.
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
}

impl BenchmarkTable {
    pub fn new(models: &[&str], tasks: &[&str]) -> Self {
        BenchmarkTable {
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            models: models.iter().map(|s| s.to_string()).collect(),
            scores: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, model: &str, task: &str, score: f64) {
        self.scores
            .entry(model.to_string())
            .or_default()
            .insert(task.to_string(), score);
    }

    fn get(&self, model: &str, task: &str) -> Result<f64> {
        self.scores
            .get(model)
            .and_then(|row| row.get(task))
            .copied()
            .ok_or_else(|| {
                Error::Validation(format!("missing score for model {model} on task {task}"))
            })
    }
}

/// Average Borda score per model: per task the top three models receive
/// 3, 2 and 1 points; ties share the mean of the points of the positions
/// they span; the result is the mean over tasks.
pub fn borda(table: &BenchmarkTable) -> Result<BTreeMap<String, f64>> {
    if table.tasks.is_empty() {
        return Err(Error::Validation("borda needs at least one task".into()));
    }
    let mut totals: BTreeMap<String, f64> =
        table.models.iter().map(|m| (m.clone(), 0.0)).collect();
    let points_for_position = |pos: usize| -> f64 {
        match pos {
            0 => 3.0,
            1 => 2.0,
            2 => 1.0,
            _ => 0.0,
        }
    };
    for task in &table.tasks {
        let mut ranked: Vec<(&String, f64)> = Vec::with_capacity(table.models.len());
        for model in &table.models {
            ranked.push((model, table.get(model, task)?));
        }
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores must be comparable"));
        let mut i = 0;
        while i < ranked.len() {
            let mut j = i;
            while j + 1 < ranked.len() && ranked[j + 1].1 == ranked[i].1 {
                j += 1;
            }
            let group_points: f64 =
                (i..=j).map(points_for_position).sum::<f64>() / (j - i + 1) as f64;
            for (model, _) in &ranked[i..=j] {
                *totals.get_mut(*model).unwrap() += group_points;
            }
            i = j + 1;
        }
    }
    let n = table.tasks.len() as f64;
    Ok(totals.into_iter().map(|(m, t)| (m, t / n)).collect())
}

const CHRF_CHAR_ORDER: usize = 6;
const CHRF_WORD_ORDER: usize = 2;
const CHRF_BETA: f64 = 2.0;

fn ngram_counts<T: Clone + Eq + std::hash::Hash>(
    items: &[T],
    order: usize,
) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    if items.len() >= order {
        for window in items.windows(order) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order F-score with beta weighting recall. An order where neither
/// side has any n-grams is vacuously perfect; one-sided emptiness is zero.
fn order_f_score<T: Clone + Eq + std::hash::Hash>(hyp: &[T], reference: &[T], order: usize) -> f64 {
    let hyp_counts = ngram_counts(hyp, order);
    let ref_counts = ngram_counts(reference, order);
    let hyp_total: u64 = hyp_counts.values().sum();
    let ref_total: u64 = ref_counts.values().sum();
    match (hyp_total, ref_total) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let matching: u64 = ref_counts
        .iter()
        .map(|(gram, &rc)| rc.min(hyp_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let precision = matching as f64 / hyp_total as f64;
    let recall = matching as f64 / ref_total as f64;
    let beta2 = CHRF_BETA * CHRF_BETA;
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

/// Words for the ChrF++ word n-grams: whitespace-split tokens with
/// punctuation characters stripped (digits kept).
fn chrf_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !is_punctuation(*c)).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// ChrF++ on [0, 100]: character n-grams of order 1..6 (whitespace
/// excluded) plus word n-grams of order 1..2, F-scores with beta = 2
/// averaged uniformly over all eight orders.
pub fn chrf_pp(hypothesis: &str, reference: &str) -> f64 {
    match (hypothesis.is_empty(), reference.is_empty()) {
        (true, true) => return 100.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hyp_chars: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let ref_chars: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hyp_words = chrf_words(hypothesis);
    let ref_words = chrf_words(reference);

    let mut total = 0.0;
    for order in 1..=CHRF_CHAR_ORDER {
        total += order_f_score(&hyp_chars, &ref_chars, order);
    }
    for order in 1..=CHRF_WORD_ORDER {
        total += order_f_score(&hyp_words, &ref_words, order);
    }
    total / (CHRF_CHAR_ORDER + CHRF_WORD_ORDER) as f64 * 100.0
}

/// Levenshtein distance over whitespace-split word sequences, normalized by
/// the longer sequence; both empty gives 0.
pub fn word_edit_distance(hypothesis: &str, reference: &str) -> f64 {
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    let reference: Vec<&str> = reference.split_whitespace().collect();
    let (n, m) = (hyp.len(), reference.len());
    if n == 0 && m == 0 {
        return 0.0;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut curr = vec![0usize; m + 1];
    for i in 1..=n {
        curr[0] = i;
        for j in 1..=m {
            let cost = usize::from(hyp[i - 1] != reference[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m] as f64 / n.max(m) as f64
}

/// Token boundary provider for the audit's half-split. `boundaries` returns
/// the byte offset just past each token, in order.
pub trait AuditTokenizer: Sync {
    fn boundaries(&self, text: &str) -> Vec<usize>;

    fn count(&self, text: &str) -> u64 {
        self.boundaries(text).len() as u64
    }
}

/// Whitespace word tokenizer: one token per whitespace-delimited word.
pub struct WhitespaceTokenizer;

impl AuditTokenizer for WhitespaceTokenizer {
    fn boundaries(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut in_word = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if in_word {
                    out.push(i);
                    in_word = false;
                }
            } else {
                in_word = true;
            }
        }
        if in_word {
            out.push(text.len());
        }
        out
    }
}

/// Splits a document at the token midpoint, snapped to the nearest character
/// boundary at or before it. Returns `None` when there are fewer than two
/// tokens to split between.
pub fn split_document<'a>(
    text: &'a str,
    tokenizer: &dyn AuditTokenizer,
) -> Option<(&'a str, &'a str)> {
    let bounds = tokenizer.boundaries(text);
    if bounds.len() < 2 {
        return None;
    }
    let mid = bounds.len() / 2;
    let mut split = bounds[mid - 1];
    while split > 0 && !text.is_char_boundary(split) {
        split -= 1;
    }
    Some((&text[..split], &text[split..]))
}

/// Text continuation provider: the model under audit. Implementations must
/// be safe for concurrent calls or wrapped in a serializing adapter.
pub trait Generator: Sync {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String>;
}

/// Per-document audit result. `flagged` holds exactly when ChrF++ > 45.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub doc_id: String,
    pub lang: String,
    pub chrf: f64,
    pub edit_distance: f64,
    pub flagged: bool,
}

/// The ChrF++ level above which a continuation counts as substantially
/// overlapping its reference.
pub const MEMORIZATION_FLAG_THRESHOLD: f64 = 45.0;

/// Per-language aggregate row of the audit summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LangAuditRow {
    pub lang: String,
    pub docs: u64,
    pub avg_tokens: f64,
    pub chrf_avg: f64,
    pub chrf_max: f64,
    pub edit_avg: f64,
}

pub const AUDIT_TABLE_HEADER: &str = "Lang.\tDocs\tAvg. tok.\tChrF++ Avg.\tChrF++ Max.\tEdit dist.";

/// Renders the per-language summary as TSV in the canonical column order.
pub fn render_audit_table(rows: &[LangAuditRow]) -> String {
    let mut out = String::from(AUDIT_TABLE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.0}\t{:.1}\t{:.1}\t{:.2}\n",
            row.lang, row.docs, row.avg_tokens, row.chrf_avg, row.chrf_max, row.edit_avg
        ));
    }
    out
}

#[derive(Debug)]
pub struct AuditOutcome {
    pub records: Vec<AuditRecord>,
    /// Documents where the generator failed or the text was too short to
    /// split; excluded from the aggregates.
    pub failures: Vec<(String, String)>,
    pub table: Vec<LangAuditRow>,
}

/// Splits each document into halves, prompts the generator with the first
/// half capped at the reference's token length, and scores the continuation
/// against the second half.
pub fn memorization_audit(
    docs: &[Document],
    generator: &dyn Generator,
    tokenizer: &dyn AuditTokenizer,
) -> AuditOutcome {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut token_totals: BTreeMap<String, (u64, u64)> = BTreeMap::new();

    for doc in docs {
        let Some((prompt, reference)) = split_document(&doc.text, tokenizer) else {
            failures.push((doc.id.clone(), "too short to split".into()));
            continue;
        };
        let ref_tokens = tokenizer.count(reference) as usize;
        let generated = match generator.generate(prompt, ref_tokens) {
            Ok(g) => g,
            Err(e) => {
                failures.push((doc.id.clone(), e.to_string()));
                continue;
            }
        };
        let chrf = chrf_pp(&generated, reference);
        let edit = word_edit_distance(&generated, reference);
        let entry = token_totals.entry(doc.lang.clone()).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += tokenizer.count(&doc.text);
        records.push(AuditRecord {
            doc_id: doc.id.clone(),
            lang: doc.lang.clone(),
            chrf,
            edit_distance: edit,
            flagged: chrf > MEMORIZATION_FLAG_THRESHOLD,
        });
    }

    let mut table = Vec::new();
    for (lang, (docs_count, tokens)) in &token_totals {
        let lang_records: Vec<&AuditRecord> = records.iter().filter(|r| &r.lang == lang).collect();
        let n = lang_records.len() as f64;
        table.push(LangAuditRow {
            lang: lang.clone(),
            docs: *docs_count,
            avg_tokens: *tokens as f64 / n,
            chrf_avg: lang_records.iter().map(|r| r.chrf).sum::<f64>() / n,
            chrf_max: lang_records.iter().map(|r| r.chrf).fold(0.0, f64::max),
            edit_avg: lang_records.iter().map(|r| r.edit_distance).sum::<f64>() / n,
        });
    }
    AuditOutcome {
        records,
        failures,
        table,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn per_char_perplexity_unit_cases() {
        let s = ScoredText {
            text: "abcd".into(),
            total_log_prob: -4.0,
            token_count: 4,
        };
        assert!((per_char_perplexity(&s).unwrap() - std::f64::consts::E).abs() < 1e-12);

        // Uniform model over a 4-symbol alphabet, one token per char.
        let n = 32usize;
        let s = ScoredText {
            text: "abcd".repeat(n / 4),
            total_log_prob: -(n as f64) * 4f64.ln(),
            token_count: n as u64,
        };
        assert!((per_char_perplexity(&s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn per_char_perplexity_retokenization_invariant() {
        let coarse = ScoredText {
            text: "same text either way".into(),
            total_log_prob: -17.25,
            token_count: 4,
        };
        let fine = ScoredText {
            token_count: 19,
            ..coarse.clone()
        };
        assert_eq!(
            per_char_perplexity(&coarse).unwrap(),
            per_char_perplexity(&fine).unwrap()
        );
    }

    #[test]
    fn relative_improvement_cases() {
        assert!((relative_improvement(0.862, 1.0).unwrap() - 13.8).abs() < 1e-9);
        assert_eq!(relative_improvement(0.7, 0.7).unwrap(), 0.0);
        assert_eq!(relative_improvement(0.5, 1.0).unwrap(), 50.0);
        assert!(relative_improvement(0.0, 1.0).is_err());
    }

    #[test]
    fn borda_tie_handling() {
        let mut table = BenchmarkTable::new(&["a", "b", "c"], &["t1"]);
        table.set("a", "t1", 0.9);
        table.set("b", "t1", 0.9);
        table.set("c", "t1", 0.1);
        let scores = borda(&table).unwrap();
        assert_eq!(scores["a"], 2.5);
        assert_eq!(scores["b"], 2.5);
        assert_eq!(scores["c"], 1.0);
    }

    #[test]
    fn borda_single_model() {
        let mut table = BenchmarkTable::new(&["only"], &["t1", "t2"]);
        table.set("only", "t1", 0.5);
        table.set("only", "t2", 0.6);
        let scores = borda(&table).unwrap();
        assert_eq!(scores["only"], 3.0);
    }

    #[test]
    fn borda_rejects_sparse_tables() {
        let mut table = BenchmarkTable::new(&["a", "b"], &["t1"]);
        table.set("a", "t1", 0.9);
        assert!(borda(&table).is_err());
    }

    #[test]
    fn chrf_identity_and_disjoint() {
        assert_eq!(chrf_pp("the quick brown fox", "the quick brown fox"), 100.0);
        assert_eq!(chrf_pp("aaaa bbbb", "cccc dddd"), 0.0);
        assert_eq!(chrf_pp("", ""), 100.0);
        assert_eq!(chrf_pp("", "something"), 0.0);
        assert_eq!(chrf_pp("something", ""), 0.0);
    }

    #[test]
    fn chrf_is_asymmetric() {
        let a = chrf_pp("the cat", "the cat sat on the mat");
        let b = chrf_pp("the cat sat on the mat", "the cat");
        assert_ne!(a, b);
    }

    #[test]
    fn word_edit_distance_cases() {
        assert_eq!(word_edit_distance("a b c", "a b c"), 0.0);
        assert_eq!(word_edit_distance("x y z", "a b c"), 1.0);
        assert!((word_edit_distance("a b c", "a x c") - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(word_edit_distance("", ""), 0.0);
        assert_eq!(word_edit_distance("a", ""), 1.0);
    }

    #[test]
    fn split_document_halves_by_tokens() {
        let text = "one two three four";
        let (prompt, reference) = split_document(text, &WhitespaceTokenizer).unwrap();
        assert_eq!(prompt, "one two");
        assert_eq!(reference, " three four");
        assert!(split_document("single", &WhitespaceTokenizer).is_none());
    }

    struct FixedGenerator(String);

    impl Generator for FixedGenerator {
        fn generate(&self, _prompt: &str, _max_tokens: usize) -> crate::Result<String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn audit_with_unrelated_generator_flags_nothing() {
        let docs = vec![
            Document::new("a", "xx", "t", "uno dos tres cuatro cinco seis siete ocho"),
            Document::new("b", "yy", "t", "alpha beta gamma delta epsilon zeta eta theta"),
        ];
        let generator = FixedGenerator("qqq www rrr".into());
        let outcome = memorization_audit(&docs, &generator, &WhitespaceTokenizer);
        assert_eq!(outcome.records.len(), 2);
        assert!(outcome.records.iter().all(|r| !r.flagged));
        assert_eq!(outcome.table.len(), 2);
        let rendered = render_audit_table(&outcome.table);
        assert!(rendered.starts_with(AUDIT_TABLE_HEADER));
    }

    proptest! {
        #[test]
        fn chrf_self_is_perfect(s in "[a-zāž ]{1,40}") {
            prop_assume!(!s.trim().is_empty());
            prop_assert!((chrf_pp(&s, &s) - 100.0).abs() < 1e-9);
        }

        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec("[ab]", 0..6),
            b in proptest::collection::vec("[ab]", 0..6),
            c in proptest::collection::vec("[ab]", 0..6),
        ) {
            let (sa, sb, sc) = (a.join(" "), b.join(" "), c.join(" "));
            let dab = word_edit_distance(&sa, &sb);
            let dba = word_edit_distance(&sb, &sa);
            prop_assert!((dab - dba).abs() < 1e-12);
            prop_assert_eq!(word_edit_distance(&sa, &sa), 0.0);
            // Triangle inequality on raw (un-normalized) distances.
            let raw = |x: &str, y: &str| {
                let lx = x.split_whitespace().count();
                let ly = y.split_whitespace().count();
                word_edit_distance(x, y) * lx.max(ly) as f64
            };
            prop_assert!(raw(&sa, &sc) <= raw(&sa, &sb) + raw(&sb, &sc) + 1e-9);
        }

        #[test]
        fn borda_invariant_under_monotone_transform(
            scores in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let models = ["m1", "m2", "m3", "m4"];
            let mut base = BenchmarkTable::new(&models, &["t1", "t2"]);
            let mut transformed = BenchmarkTable::new(&models, &["t1", "t2"]);
            for (i, m) in models.iter().enumerate() {
                base.set(m, "t1", scores[i]);
                transformed.set(m, "t1", scores[i].exp() * 3.0 + 1.0);
                base.set(m, "t2", (i as f64) / 4.0);
                transformed.set(m, "t2", (i as f64) / 4.0);
            }
            prop_assert_eq!(borda(&base).unwrap(), borda(&transformed).unwrap());
        }
    }
}
