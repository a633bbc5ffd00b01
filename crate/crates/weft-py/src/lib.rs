//! Python bindings for the weft corpus toolkit: the tokenizer, the
//! evaluation metrics, PII anonymization, and the sampling math.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use weft_core::bpe::{BpeConfig, BpeVocab};
use weft_core::corpus::Document;
use weft_core::metrics::{BenchmarkTable, ScoredText};
use weft_core::pii::PiiRules;
use weft_core::quality::StopwordTable;

fn to_py_err(e: weft_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Lowercases and keeps only alphanumerics and spaces, collapsing runs.
#[pyfunction]
fn normalize_line(line: &str) -> String {
    weft_core::dedup::normalize_line(line)
}

/// ChrF++ on [0, 100]: character orders 1..6 plus word orders 1..2, beta 2.
#[pyfunction]
fn chrf_pp(hypothesis: &str, reference: &str) -> f64 {
    weft_core::metrics::chrf_pp(hypothesis, reference)
}

/// Word-level Levenshtein distance normalized by the longer sequence.
#[pyfunction]
fn word_edit_distance(hypothesis: &str, reference: &str) -> f64 {
    weft_core::metrics::word_edit_distance(hypothesis, reference)
}

/// exp(-total_log_prob / characters); natural-log inputs.
#[pyfunction]
fn per_char_perplexity(text: &str, total_log_prob: f64, token_count: u64) -> PyResult<f64> {
    weft_core::metrics::per_char_perplexity(&ScoredText {
        text: text.to_string(),
        total_log_prob,
        token_count,
    })
    .map_err(to_py_err)
}

/// (baseline - ours) / baseline as a percentage.
#[pyfunction]
fn relative_improvement(ours: f64, baseline: f64) -> PyResult<f64> {
    weft_core::metrics::relative_improvement(ours, baseline).map_err(to_py_err)
}

/// Average Borda score per model from a dense {model: {task: score}} table.
#[pyfunction]
fn borda(scores: BTreeMap<String, BTreeMap<String, f64>>) -> PyResult<BTreeMap<String, f64>> {
    let models: Vec<String> = scores.keys().cloned().collect();
    let tasks: Vec<String> = scores
        .values()
        .next()
        .map(|row| row.keys().cloned().collect())
        .unwrap_or_default();
    let table = BenchmarkTable {
        models,
        tasks,
        scores,
    };
    weft_core::metrics::borda(&table).map_err(to_py_err)
}

#[pyfunction]
fn luhn_valid(digits: &str) -> bool {
    weft_core::pii::luhn_valid(digits)
}

#[pyfunction]
fn iban_valid(iban: &str) -> bool {
    weft_core::pii::iban_valid(iban)
}

/// Replaces emails, phone numbers, IBANs and card numbers with synthetic
/// equivalents. Returns (text, [(kind, start, end)]).
#[pyfunction]
#[pyo3(signature = (text, seed = 0))]
fn anonymize_text(text: &str, seed: u64) -> (String, Vec<(String, usize, usize)>) {
    let rules = PiiRules::new(seed);
    let (out, replacements) = weft_core::pii::anonymize_text(text, &rules);
    let spans = replacements
        .into_iter()
        .map(|r| (format!("{:?}", r.kind), r.start, r.end))
        .collect();
    (out, spans)
}

/// The seven quality metrics of a text, using the bundled stop-word lists.
#[pyfunction]
#[pyo3(signature = (text, lang = "en"))]
fn score_document(py: Python<'_>, text: &str, lang: &str) -> PyResult<Py<PyAny>> {
    let doc = Document::new("py", lang, "py", text);
    let stops = StopwordTable::bundled();
    let m = weft_core::quality::score_document(&doc, &stops);
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("punct_ratio", m.punct_ratio)?;
    dict.set_item("upper_ratio", m.upper_ratio)?;
    dict.set_item("digit_ratio", m.digit_ratio)?;
    dict.set_item("one_letter_ratio", m.one_letter_ratio)?;
    dict.set_item("stopword_ratio", m.stopword_ratio)?;
    dict.set_item("word_count", m.word_count)?;
    dict.set_item("avg_word_len", m.avg_word_len)?;
    Ok(dict.into_any().unbind())
}

/// (host, registrable domain, subdomain count), or None when unparseable.
#[pyfunction]
fn parse_host(url: &str) -> Option<(String, String, usize)> {
    weft_core::urlfilter::parse_host(url).map(|h| (h.host, h.registrable, h.subdomain_count))
}

/// Upsampling budgets: min(cap x unique, target), never below unique.
/// Returns [(lang, unique, total, ratio)].
#[pyfunction]
#[pyo3(signature = (uniques, cap = 2.5, target = 26.1, overrides = None))]
fn compute_budgets(
    uniques: BTreeMap<String, f64>,
    cap: f64,
    target: f64,
    overrides: Option<BTreeMap<String, f64>>,
) -> PyResult<Vec<(String, f64, f64, f64)>> {
    let budgets = weft_core::sampler::compute_budgets(
        &uniques,
        cap,
        target,
        &overrides.unwrap_or_default(),
        0.0,
    )
    .map_err(to_py_err)?;
    Ok(budgets
        .into_iter()
        .map(|b| (b.lang, b.unique_tokens, b.total_tokens, b.ratio))
        .collect())
}

/// Three-phase curriculum budgets and distributions:
/// [(phase, token_budget, {lang: probability})].
#[pyfunction]
#[pyo3(signature = (uniques, total_budget, fractions = (0.075, 0.675, 0.25), cap = 2.5, target = 26.1, seed = 0))]
fn build_schedule(
    uniques: BTreeMap<String, f64>,
    total_budget: u64,
    fractions: (f64, f64, f64),
    cap: f64,
    target: f64,
    seed: u64,
) -> PyResult<Vec<(String, u64, BTreeMap<String, f64>)>> {
    let budgets =
        weft_core::sampler::compute_budgets(&uniques, cap, target, &BTreeMap::new(), 0.0)
            .map_err(to_py_err)?;
    let schedule = weft_core::sampler::build_schedule(&budgets, fractions, total_budget, seed)
        .map_err(to_py_err)?;
    Ok(schedule
        .phases
        .into_iter()
        .map(|p| (format!("{:?}", p.phase), p.token_budget, p.distribution))
        .collect())
}

/// A trained byte-pair vocabulary with byte fallback.
#[pyclass(name = "Tokenizer")]
struct PyTokenizer {
    vocab: BpeVocab,
}

#[pymethods]
impl PyTokenizer {
    /// Trains from {lang: text} samples truncated to {lang: bytes} budgets.
    #[staticmethod]
    #[pyo3(signature = (samples, budgets, vocab_size = 4096, coverage = 0.99995))]
    fn train(
        samples: BTreeMap<String, String>,
        budgets: BTreeMap<String, u64>,
        vocab_size: usize,
        coverage: f64,
    ) -> PyResult<Self> {
        let vocab = BpeVocab::train(
            &samples,
            &budgets,
            &BpeConfig {
                vocab_size,
                coverage,
            },
        )
        .map_err(to_py_err)?;
        Ok(PyTokenizer { vocab })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTokenizer {
            vocab: BpeVocab::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.vocab.save(&path).map_err(to_py_err)
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.tokenize(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.vocab.decode(&ids).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.vocab.len()
    }

    /// Per-language mean tokens per sentence and the max/min dispersion on
    /// a sentence-aligned parallel set.
    #[pyo3(signature = (parallel, focus = None))]
    fn measure_equity(
        &self,
        parallel: BTreeMap<String, Vec<String>>,
        focus: Option<Vec<String>>,
    ) -> PyResult<(BTreeMap<String, f64>, f64)> {
        let focus: BTreeSet<String> = focus.unwrap_or_default().into_iter().collect();
        let report =
            weft_core::bpe::measure_equity(&self.vocab, &parallel, &focus).map_err(to_py_err)?;
        let means = report
            .per_language
            .into_iter()
            .map(|(lang, e)| (lang, e.mean_tokens))
            .collect();
        Ok((means, report.dispersion))
    }
}

#[pymodule]
fn weft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_line, m)?)?;
    m.add_function(wrap_pyfunction!(chrf_pp, m)?)?;
    m.add_function(wrap_pyfunction!(word_edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(per_char_perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(borda, m)?)?;
    m.add_function(wrap_pyfunction!(luhn_valid, m)?)?;
    m.add_function(wrap_pyfunction!(iban_valid, m)?)?;
    m.add_function(wrap_pyfunction!(anonymize_text, m)?)?;
    m.add_function(wrap_pyfunction!(score_document, m)?)?;
    m.add_function(wrap_pyfunction!(parse_host, m)?)?;
    m.add_function(wrap_pyfunction!(compute_budgets, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_class::<PyTokenizer>()?;
    Ok(())
}
