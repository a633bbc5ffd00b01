//! Heuristic quality filtering: seven per-document thresholds applied after
//! deduplication. A document is dropped as soon as any criterion fires; the
//! verdict names the first firing criterion in the canonical listing order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_punctuation, words, Document};
use crate::error::{Error, Result};

/// The seven thresholds with their default values. All comparisons are
/// strict inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicThresholds {
    /// Drop when punctuation ratio < this.
    pub punct_min: f64,
    /// Drop when punctuation ratio > this.
    pub punct_max: f64,
    /// Drop when uppercase ratio > this.
    pub upper_max: f64,
    /// Drop when digit ratio > this.
    pub digit_max: f64,
    /// Drop when one-letter-word ratio > this.
    pub one_letter_max: f64,
    /// Drop when stop-word ratio < this.
    pub stopword_min: f64,
    /// Drop when word count < this.
    pub min_words: u64,
    /// Drop when average word length > this times the global average.
    pub word_len_factor: f64,
}

impl Default for HeuristicThresholds {
    fn default() -> Self {
        HeuristicThresholds {
            punct_min: 0.012,
            punct_max: 0.08,
            upper_max: 0.23,
            digit_max: 0.11,
            one_letter_max: 0.22,
            stopword_min: 0.08,
            min_words: 50,
            word_len_factor: 1.44,
        }
    }
}

impl HeuristicThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.punct_min >= self.punct_max {
            return Err(Error::Config("punct_min must be below punct_max".into()));
        }
        for (name, v) in [
            ("punct_min", self.punct_min),
            ("punct_max", self.punct_max),
            ("upper_max", self.upper_max),
            ("digit_max", self.digit_max),
            ("one_letter_max", self.one_letter_max),
            ("stopword_min", self.stopword_min),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1)")));
            }
        }
        if self.min_words < 1 {
            return Err(Error::Config("min_words must be >= 1".into()));
        }
        if self.word_len_factor <= 1.0 {
            return Err(Error::Config("word_len_factor must be > 1".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides from a plain-text file; `#` comments
    /// and blank lines are ignored.
    pub fn load_overrides(&mut self, path: &Path) -> Result<()> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Record {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected key=value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Record {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("bad number: {v}"),
                })
            };
            match key {
                "punct_min" => self.punct_min = parse(value)?,
                "punct_max" => self.punct_max = parse(value)?,
                "upper_max" => self.upper_max = parse(value)?,
                "digit_max" => self.digit_max = parse(value)?,
                "one_letter_max" => self.one_letter_max = parse(value)?,
                "stopword_min" => self.stopword_min = parse(value)?,
                "min_words" => {
                    self.min_words = value.parse().map_err(|_| Error::Record {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        msg: format!("bad integer: {value}"),
                    })?
                }
                "word_len_factor" => self.word_len_factor = parse(value)?,
                other => {
                    return Err(Error::Record {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        msg: format!("unknown threshold: {other}"),
                    })
                }
            }
        }
        self.validate()
    }
}

/// Per-language stop-word sets. Languages without a list are skipped by the
/// stop-word rule (with a warning) rather than dropped wholesale.
#[derive(Debug, Clone, Default)]
pub struct StopwordTable {
    per_language: BTreeMap<String, BTreeSet<String>>,
}

impl StopwordTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Small bundled defaults for a few languages; real runs load a
    /// directory of per-language lists over these.
    pub fn bundled() -> Self {
        let mut table = Self::new();
        for (lang, data) in [
            ("en", include_str!("assets/stopwords/en.txt")),
            ("lv", include_str!("assets/stopwords/lv.txt")),
            ("de", include_str!("assets/stopwords/de.txt")),
        ] {
            table.insert_list(lang, data.lines());
        }
        table
    }

    fn insert_list<'a>(&mut self, lang: &str, lines: impl Iterator<Item = &'a str>) {
        let set: BTreeSet<String> = lines
            .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        if !set.is_empty() {
            self.per_language.insert(lang.to_lowercase(), set);
        }
    }

    /// Loads `<lang>.txt` files from a directory, replacing any bundled list
    /// for the same language.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize> {
        let mut loaded = 0;
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(lang) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            self.insert_list(lang, content.lines());
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn get(&self, lang: &str) -> Option<&BTreeSet<String>> {
        self.per_language.get(lang)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.per_language.keys().map(|s| s.as_str())
    }
}

/// The seven metrics of one document. Character ratios are over all
/// characters of the text; word-based ratios are over words after removing
/// punctuation and digits. `stopword_ratio` is `None` when the language has
/// no stop-word list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub punct_ratio: f64,
    pub upper_ratio: f64,
    pub digit_ratio: f64,
    pub one_letter_ratio: f64,
    pub stopword_ratio: Option<f64>,
    pub word_count: u64,
    pub avg_word_len: f64,
}

/// Computes the metric vector for one document. Pure: same text and stop
/// words give the same metrics.
pub fn score_document(doc: &Document, stops: &StopwordTable) -> QualityMetrics {
    let mut chars = 0u64;
    let mut punct = 0u64;
    let mut upper = 0u64;
    let mut digit = 0u64;
    for c in doc.text.chars() {
        chars += 1;
        if is_punctuation(c) {
            punct += 1;
        }
        if c.is_uppercase() {
            upper += 1;
        }
        if c.is_numeric() {
            digit += 1;
        }
    }
    let ratio = |n: u64| if chars > 0 { n as f64 / chars as f64 } else { 0.0 };

    let word_list = words(&doc.text);
    let word_count = word_list.len() as u64;
    let mut one_letter = 0u64;
    let mut word_chars = 0u64;
    for w in &word_list {
        let len = w.chars().count() as u64;
        word_chars += len;
        if len == 1 {
            one_letter += 1;
        }
    }
    let stopword_ratio = stops.get(&doc.lang).map(|set| {
        if word_count == 0 {
            return 0.0;
        }
        let hits = word_list
            .iter()
            .filter(|w| set.contains(&w.to_lowercase()))
            .count();
        hits as f64 / word_count as f64
    });

    QualityMetrics {
        punct_ratio: ratio(punct),
        upper_ratio: ratio(upper),
        digit_ratio: ratio(digit),
        one_letter_ratio: if word_count > 0 {
            one_letter as f64 / word_count as f64
        } else {
            0.0
        },
        stopword_ratio,
        word_count,
        avg_word_len: if word_count > 0 {
            word_chars as f64 / word_count as f64
        } else {
            0.0
        },
    }
}

/// Reason codes in the canonical listing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityRule {
    PunctuationRatio,
    UppercaseRatio,
    DigitRatio,
    OneLetterRatio,
    StopwordRatio,
    WordCount,
    WordLength,
    Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub keep: bool,
    pub rule: QualityRule,
}

/// Applies the seven criteria to a metric vector. `lang_avg_word_len` is the
/// global per-language average from a prior stats pass; when `None` the
/// word-length rule is skipped, mirroring the stop-word rule's behavior for
/// missing lists.
pub fn apply_heuristics(
    m: &QualityMetrics,
    th: &HeuristicThresholds,
    lang_avg_word_len: Option<f64>,
) -> Verdict {
    let drop = |rule| Verdict { keep: false, rule };
    if m.punct_ratio < th.punct_min || m.punct_ratio > th.punct_max {
        return drop(QualityRule::PunctuationRatio);
    }
    if m.upper_ratio > th.upper_max {
        return drop(QualityRule::UppercaseRatio);
    }
    if m.digit_ratio > th.digit_max {
        return drop(QualityRule::DigitRatio);
    }
    if m.one_letter_ratio > th.one_letter_max {
        return drop(QualityRule::OneLetterRatio);
    }
    if let Some(ratio) = m.stopword_ratio {
        if ratio < th.stopword_min {
            return drop(QualityRule::StopwordRatio);
        }
    }
    if m.word_count < th.min_words {
        return drop(QualityRule::WordCount);
    }
    if let Some(global) = lang_avg_word_len {
        if global > 0.0 && m.avg_word_len > th.word_len_factor * global {
            return drop(QualityRule::WordLength);
        }
    }
    Verdict {
        keep: true,
        rule: QualityRule::Pass,
    }
}
