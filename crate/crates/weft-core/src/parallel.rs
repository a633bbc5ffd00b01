//! Parallel-data curation: quality-score threshold calibration, sentence
//! filtering, the once-as-source/once-as-target allocation constraint, and
//! synthetic XML document assembly with all source sentences in the first
//! half and their translations in the second.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::BpeVocab;
use crate::dedup::normalize_line;
use crate::error::{Error, Result};

/// One sentence pair from a parallel dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
    pub score: Option<f64>,
    pub origin: String,
}

impl SentencePair {
    pub fn lang_pair(&self) -> (String, String) {
        (self.src_lang.clone(), self.tgt_lang.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.src_lang == self.tgt_lang {
            return Err(Error::Validation(format!(
                "source and target language are both {}",
                self.src_lang
            )));
        }
        if self.src_text.is_empty() || self.tgt_text.is_empty() {
            return Err(Error::Validation("sentence pair with empty text".into()));
        }
        Ok(())
    }
}

/// Reads the TSV pair format: `src_lang, tgt_lang, origin, src_text,
/// tgt_text[, score]`. Malformed lines are collected as record errors.
pub fn read_pairs_tsv(path: &Path) -> Result<(Vec<SentencePair>, Vec<Error>)> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 || fields.len() > 6 {
            errors.push(bad(format!("expected 5-6 fields, got {}", fields.len())));
            continue;
        }
        let score = if fields.len() == 6 && !fields[5].is_empty() {
            match fields[5].parse::<f64>() {
                Ok(s) => Some(s),
                Err(_) => {
                    errors.push(bad(format!("bad score: {}", fields[5])));
                    continue;
                }
            }
        } else {
            None
        };
        let pair = SentencePair {
            src_lang: fields[0].to_lowercase(),
            tgt_lang: fields[1].to_lowercase(),
            origin: fields[2].to_string(),
            src_text: fields[3].to_string(),
            tgt_text: fields[4].to_string(),
            score,
        };
        match pair.validate() {
            Ok(()) => pairs.push(pair),
            Err(e) => errors.push(bad(e.to_string())),
        }
    }
    Ok((pairs, errors))
}

/// Pluggable quality-score provider. Scores depend only on the pair, so
/// calibration and filtering see identical values.
pub trait QualityScorer: Sync {
    fn score(&self, pair: &SentencePair) -> Result<f64>;

    fn score_batch(&self, pairs: &[SentencePair]) -> Result<Vec<f64>> {
        pairs.iter().map(|p| self.score(p)).collect()
    }
}

/// Deterministic offline stand-in for an external quality-estimation model:
/// length-ratio times lexical-overlap, on [0, 1].
pub struct StubScorer;

impl QualityScorer for StubScorer {
    fn score(&self, pair: &SentencePair) -> Result<f64> {
        let src_len = pair.src_text.chars().count() as f64;
        let tgt_len = pair.tgt_text.chars().count() as f64;
        if src_len == 0.0 || tgt_len == 0.0 {
            return Ok(0.0);
        }
        let length_ratio = (src_len.min(tgt_len) / src_len.max(tgt_len)).sqrt();
        let src_words: HashSet<String> = crate::corpus::words(&pair.src_text)
            .into_iter()
            .map(|w| w.to_lowercase())
            .collect();
        let tgt_words: HashSet<String> = crate::corpus::words(&pair.tgt_text)
            .into_iter()
            .map(|w| w.to_lowercase())
            .collect();
        let union = src_words.union(&tgt_words).count();
        let overlap = if union == 0 {
            0.0
        } else {
            src_words.intersection(&tgt_words).count() as f64 / union as f64
        };
        // Overlap is a weak signal between different languages; weight it
        // lightly against the length ratio.
        Ok((0.75 * length_ratio + 0.25 * overlap).clamp(0.0, 1.0))
    }
}

/// Scores via an external command: TSV pairs on stdin, one score per line
/// on stdout.
pub struct CommandScorer {
    pub command: String,
}

impl QualityScorer for CommandScorer {
    fn score(&self, pair: &SentencePair) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(pair))?[0])
    }

    fn score_batch(&self, pairs: &[SentencePair]) -> Result<Vec<f64>> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Command(format!("{}: {e}", self.command)))?;
        {
            let stdin = child.stdin.as_mut().expect("piped stdin");
            for pair in pairs {
                writeln!(
                    stdin,
                    "{}\t{}\t{}\t{}\t{}",
                    pair.src_lang, pair.tgt_lang, pair.origin, pair.src_text, pair.tgt_text
                )
                .map_err(|e| Error::Command(format!("{}: {e}", self.command)))?;
            }
        }
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Command(format!("{}: {e}", self.command)))?;
        if !output.status.success() {
            return Err(Error::Command(format!(
                "{}: exited with {}",
                self.command, output.status
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let scores: Vec<f64> = text
            .lines()
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Command(format!("{}: bad score output: {e}", self.command)))?;
        if scores.len() != pairs.len() {
            return Err(Error::Command(format!(
                "{}: {} scores for {} pairs",
                self.command,
                scores.len(),
                pairs.len()
            )));
        }
        Ok(scores)
    }
}

/// Per language pair acceptance threshold: 1.25 times the calibration mean.
/// Keyed src language -> tgt language.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub thresholds: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ThresholdTable {
    pub fn get(&self, src: &str, tgt: &str) -> Option<f64> {
        self.thresholds.get(src).and_then(|m| m.get(tgt)).copied()
    }

    pub fn set(&mut self, src: &str, tgt: &str, threshold: f64) {
        self.thresholds
            .entry(src.to_string())
            .or_default()
            .insert(tgt.to_string(), threshold);
    }
}

pub const THRESHOLD_CALIBRATION_FACTOR: f64 = 1.25;

/// Calibrates per-pair thresholds from a dev set of sentence pairs.
pub fn calibrate_thresholds(
    scorer: &dyn QualityScorer,
    dev_pairs: &[SentencePair],
) -> Result<ThresholdTable> {
    let mut grouped: BTreeMap<(String, String), Vec<&SentencePair>> = BTreeMap::new();
    for pair in dev_pairs {
        grouped.entry(pair.lang_pair()).or_default().push(pair);
    }
    if grouped.is_empty() {
        return Err(Error::Validation("empty calibration dev set".into()));
    }
    let mut table = ThresholdTable::default();
    for ((src, tgt), pairs) in grouped {
        let mut sum = 0.0;
        for pair in &pairs {
            sum += scorer.score(pair)?;
        }
        let mean = sum / pairs.len() as f64;
        table.set(&src, &tgt, THRESHOLD_CALIBRATION_FACTOR * mean);
    }
    Ok(table)
}

/// Keeps pairs whose score is at or above their language pair's threshold.
/// Pairs without a score are scored by the provider first.
pub fn filter_pairs(
    pairs: Vec<SentencePair>,
    table: &ThresholdTable,
    scorer: &dyn QualityScorer,
) -> Result<(Vec<SentencePair>, usize)> {
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for mut pair in pairs {
        let threshold = table.get(&pair.src_lang, &pair.tgt_lang).ok_or_else(|| {
            Error::MissingThreshold {
                src: pair.src_lang.clone(),
                tgt: pair.tgt_lang.clone(),
            }
        })?;
        let score = match pair.score {
            Some(s) => s,
            None => {
                let s = scorer.score(&pair)?;
                pair.score = Some(s);
                s
            }
        };
        if score >= threshold {
            kept.push(pair);
        } else {
            dropped += 1;
        }
    }
    Ok((kept, dropped))
}

/// Enforces the global usage constraint: each normalized sentence string is
/// used at most once as a source and at most once as a target. Pairs are
/// visited in priority order (unlisted language pairs rank last), with
/// seeded shuffling inside each priority class.
pub fn allocate_sentences(
    pairs: Vec<SentencePair>,
    priorities: &[(String, String)],
    seed: u64,
) -> Vec<SentencePair> {
    let rank_of = |pair: &SentencePair| -> usize {
        priorities
            .iter()
            .position(|(s, t)| *s == pair.src_lang && *t == pair.tgt_lang)
            .unwrap_or(priorities.len())
    };
    let mut classes: BTreeMap<usize, Vec<SentencePair>> = BTreeMap::new();
    for pair in pairs {
        let rank = rank_of(&pair);
        classes.entry(rank).or_default().push(pair);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_src: HashSet<String> = HashSet::new();
    let mut used_tgt: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for (_, mut class) in classes {
        class.shuffle(&mut rng);
        for pair in class {
            let src_key = normalize_line(&pair.src_text);
            let tgt_key = normalize_line(&pair.tgt_text);
            if used_src.contains(&src_key) || used_tgt.contains(&tgt_key) {
                continue;
            }
            used_src.insert(src_key);
            used_tgt.insert(tgt_key);
            out.push(pair);
        }
    }
    out
}

/// Token counting interface for document budgeting.
pub trait TokenCounter: Sync {
    fn count(&self, text: &str) -> u64;
}

/// Counts whitespace-delimited words.
pub struct WordCounter;

impl TokenCounter for WordCounter {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

impl TokenCounter for BpeVocab {
    fn count(&self, text: &str) -> u64 {
        self.tokenize(text).len() as u64
    }
}

fn xml_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// A synthetic bilingual document: sources in the first half, translations
/// in the second, aligned by the `i` attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParallelDocument {
    pub src_lang: String,
    pub tgt_lang: String,
    pub origin: String,
    pub xml: String,
    pub pair_count: usize,
    pub token_count: u64,
}

fn render_document(pairs: &[&SentencePair]) -> String {
    let first = pairs[0];
    let mut xml = format!(
        "<bitext src=\"{}\" tgt=\"{}\" origin=\"{}\">\n",
        xml_escape(&first.src_lang),
        xml_escape(&first.tgt_lang),
        xml_escape(&first.origin)
    );
    for (i, pair) in pairs.iter().enumerate() {
        xml.push_str(&format!(
            "<s i=\"{}\">{}</s>\n",
            i + 1,
            xml_escape(&pair.src_text)
        ));
    }
    for (i, pair) in pairs.iter().enumerate() {
        xml.push_str(&format!(
            "<t i=\"{}\">{}</t>\n",
            i + 1,
            xml_escape(&pair.tgt_text)
        ));
    }
    xml.push_str("</bitext>");
    xml
}

/// A pair too large to fit any document on its own.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedPair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub origin: String,
    pub token_count: u64,
}

pub const MIN_DOC_TOKENS: u64 = 256;
pub const MAX_DOC_TOKENS: u64 = 8192;

/// Builds documents for one (language pair, origin) bucket: pairs are packed
/// greedily until the seeded target length (drawn from [256, 8192], capped
/// at `max_tokens`) would be exceeded.
fn build_bucket(
    pairs: &[SentencePair],
    counter: &dyn TokenCounter,
    max_tokens: u64,
    rng: &mut ChaCha8Rng,
    docs: &mut Vec<ParallelDocument>,
    skipped: &mut Vec<SkippedPair>,
) {
    let mut queue: Vec<&SentencePair> = pairs.iter().collect();
    queue.reverse();
    let mut current: Vec<&SentencePair> = Vec::new();
    let mut target = rng.random_range(MIN_DOC_TOKENS..=MAX_DOC_TOKENS).min(max_tokens);

    let flush = |current: &mut Vec<&SentencePair>,
                 docs: &mut Vec<ParallelDocument>,
                 counter: &dyn TokenCounter,
                 max_tokens: u64| {
        while !current.is_empty() {
            let xml = render_document(current);
            let token_count = counter.count(&xml);
            if token_count <= max_tokens {
                let first = current[0];
                docs.push(ParallelDocument {
                    src_lang: first.src_lang.clone(),
                    tgt_lang: first.tgt_lang.clone(),
                    origin: first.origin.clone(),
                    xml,
                    pair_count: current.len(),
                    token_count,
                });
                current.clear();
            } else {
                // The additive estimate undershot; drop the tail pair back
                // into consideration never happens at desk scale, but the
                // cap is a hard invariant.
                current.pop();
                if current.is_empty() {
                    break;
                }
            }
        }
    };

    while let Some(pair) = queue.pop() {
        let pair_tokens =
            counter.count(&pair.src_text) + counter.count(&pair.tgt_text) + 2;
        if current.is_empty() && pair_tokens + 3 > max_tokens {
            skipped.push(SkippedPair {
                src_lang: pair.src_lang.clone(),
                tgt_lang: pair.tgt_lang.clone(),
                origin: pair.origin.clone(),
                token_count: pair_tokens,
            });
            continue;
        }
        let estimate: u64 = current
            .iter()
            .map(|p| counter.count(&p.src_text) + counter.count(&p.tgt_text) + 2)
            .sum::<u64>()
            + pair_tokens
            + 3;
        if !current.is_empty() && estimate > target {
            flush(&mut current, docs, counter, max_tokens);
            target = rng.random_range(MIN_DOC_TOKENS..=MAX_DOC_TOKENS).min(max_tokens);
        }
        current.push(pair);
    }
    flush(&mut current, docs, counter, max_tokens);
}

/// Builds all documents, bucketing pairs by (language pair, origin). Buckets
/// are processed in sorted key order; within a bucket the allocation order
/// is preserved.
pub fn build_documents(
    pairs: &[SentencePair],
    counter: &dyn TokenCounter,
    max_tokens: u64,
    seed: u64,
) -> (Vec<ParallelDocument>, Vec<SkippedPair>) {
    let mut buckets: BTreeMap<(String, String, String), Vec<SentencePair>> = BTreeMap::new();
    for pair in pairs {
        buckets
            .entry((
                pair.src_lang.clone(),
                pair.tgt_lang.clone(),
                pair.origin.clone(),
            ))
            .or_default()
            .push(pair.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut skipped = Vec::new();
    for bucket in buckets.values() {
        build_bucket(bucket, counter, max_tokens, &mut rng, &mut docs, &mut skipped);
    }
    (docs, skipped)
}

/// Parses an emitted document back into (source sentences, target
/// sentences); used by audits and tests to check the structural invariants.
pub fn parse_document_xml(xml: &str) -> Result<(Vec<String>, Vec<String>)> {
    fn unescape(s: &str) -> String {
        s.replace("&lt;", "<")
            .replace("&gt;", ">")
            .replace("&quot;", "\"")
            .replace("&apos;", "'")
            .replace("&amp;", "&")
    }
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for line in xml.lines() {
        let line = line.trim();
        for (open, bucket) in [("<s ", &mut sources), ("<t ", &mut targets)] {
            if let Some(rest) = line.strip_prefix(open) {
                let body = rest
                    .split_once('>')
                    .map(|(_, b)| b)
                    .and_then(|b| b.rsplit_once("</"))
                    .map(|(b, _)| b)
                    .ok_or_else(|| Error::Validation(format!("malformed element: {line}")))?;
                bucket.push(unescape(body));
            }
        }
    }
    Ok((sources, targets))
}
