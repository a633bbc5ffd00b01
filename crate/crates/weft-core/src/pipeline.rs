//! Pipeline orchestration: a TOML config drives the filter stages in their
//! canonical order (url -> lines -> onion -> quality -> pii -> topic, with
//! an optional sampling stage as terminal producer), with atomic stage
//! outputs, a run manifest, and hash-based resume.
//!
//! Whole-pipeline output is a pure function of (inputs, config, seeds):
//! rerunning with an unchanged config skips completed stages, and two fresh
//! runs produce byte-identical stage outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{compute_stats, read_corpus, write_corpus, Document};
use crate::dedup::{
    exact_line_dedup_doc, onion_dedup_doc, DedupMode, DedupParams, LineIndex, NGramState,
};
use crate::error::{Error, Result};
use crate::pii::PiiRules;
use crate::quality::{apply_heuristics, score_document, HeuristicThresholds, StopwordTable};
use crate::sampler::{build_schedule, compute_budgets, emit_manifest, read_budget_csv, DocTokens};
use crate::topic::{train_lda, ClusterFlagRule, LdaParams};
use crate::urlfilter::{apply_url_filter, UrlRuleSet};

pub const CANONICAL_STAGES: &[&str] = &["url", "lines", "onion", "quality", "pii", "topic", "sample"];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub input: PathBuf,
    pub workdir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub stages: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrlSection {
    #[serde(default)]
    pub blacklists: Vec<PathBuf>,
    #[serde(default)]
    pub keywords: Option<PathBuf>,
    #[serde(default)]
    pub max_subdomains: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupSection {
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    #[serde(default = "default_half")]
    pub dup_threshold: f64,
    #[serde(default = "default_half")]
    pub doc_threshold: f64,
    #[serde(default = "default_true")]
    pub seed_dropped: bool,
    #[serde(default = "default_mode")]
    pub default_mode: String,
    /// Per-language mode overrides.
    #[serde(default)]
    pub modes: BTreeMap<String, String>,
}

fn default_ngram() -> usize {
    5
}
fn default_half() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_mode() -> String {
    "corpus".into()
}

impl Default for DedupSection {
    fn default() -> Self {
        DedupSection {
            ngram: default_ngram(),
            dup_threshold: default_half(),
            doc_threshold: default_half(),
            seed_dropped: default_true(),
            default_mode: default_mode(),
            modes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualitySection {
    #[serde(default)]
    pub thresholds: Option<PathBuf>,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiiSection {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub national_ids: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicSection {
    /// Languages the topic filter runs on; others pass through.
    #[serde(default)]
    pub langs: Vec<String>,
    #[serde(default)]
    pub topics: Option<usize>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub min_df: Option<usize>,
    #[serde(default)]
    pub keywords: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub budgets: PathBuf,
    pub total_budget: u64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    pub target: f64,
    #[serde(default = "default_phases")]
    pub phases: Vec<f64>,
    #[serde(default = "default_shard_size")]
    pub shard_size: u64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_cap() -> f64 {
    2.5
}
fn default_phases() -> Vec<f64> {
    vec![0.075, 0.675, 0.25]
}
fn default_shard_size() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub url: UrlSection,
    #[serde(default)]
    pub dedup: DedupSection,
    #[serde(default)]
    pub quality: QualitySection,
    #[serde(default)]
    pub pii: PiiSection,
    #[serde(default)]
    pub topic: TopicSection,
    #[serde(default)]
    pub sample: Option<SampleSection>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let config = config.resolve_paths(base);
        config.validate()?;
        Ok((config, sha256_hex(&bytes)))
    }

    /// Interprets relative paths in the config as relative to the config
    /// file's directory.
    fn resolve_paths(mut self, base: &Path) -> Self {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.pipeline.input);
        resolve(&mut self.pipeline.workdir);
        for p in &mut self.url.blacklists {
            resolve(p);
        }
        if let Some(p) = &mut self.url.keywords {
            resolve(p);
        }
        if let Some(p) = &mut self.quality.thresholds {
            resolve(p);
        }
        if let Some(p) = &mut self.quality.stopwords {
            resolve(p);
        }
        if let Some(p) = &mut self.pii.national_ids {
            resolve(p);
        }
        if let Some(p) = &mut self.topic.keywords {
            resolve(p);
        }
        if let Some(s) = &mut self.sample {
            resolve(&mut s.budgets);
        }
        self
    }

    pub fn stages(&self) -> Vec<String> {
        match &self.pipeline.stages {
            Some(stages) => stages.clone(),
            None => {
                let mut all: Vec<String> =
                    CANONICAL_STAGES.iter().map(|s| s.to_string()).collect();
                if self.sample.is_none() {
                    all.retain(|s| s != "sample");
                }
                all
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pipeline.input.exists() {
            return Err(Error::Config(format!(
                "input {} does not exist",
                self.pipeline.input.display()
            )));
        }
        let stages = self.stages();
        let mut last_index = None;
        for stage in &stages {
            let index = CANONICAL_STAGES
                .iter()
                .position(|s| s == stage)
                .ok_or_else(|| Error::Config(format!("unknown stage: {stage}")))?;
            if let Some(last) = last_index {
                if index <= last {
                    return Err(Error::Config(format!(
                        "stage {stage} out of canonical order"
                    )));
                }
            }
            last_index = Some(index);
        }
        if stages.iter().any(|s| s == "sample") && self.sample.is_none() {
            return Err(Error::Config("sample stage listed but no [sample] section".into()));
        }
        for path in self
            .url
            .blacklists
            .iter()
            .chain(&self.url.keywords)
            .chain(&self.quality.thresholds)
            .chain(&self.quality.stopwords)
            .chain(&self.pii.national_ids)
            .chain(&self.topic.keywords)
            .chain(self.sample.as_ref().map(|s| &s.budgets))
        {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "referenced file {} does not exist",
                    path.display()
                )));
            }
        }
        self.dedup.default_mode.parse::<DedupMode>()?;
        for mode in self.dedup.modes.values() {
            mode.parse::<DedupMode>()?;
        }
        if let Some(sample) = &self.sample {
            if sample.phases.len() != 3 {
                return Err(Error::Config("sample.phases needs three fractions".into()));
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// One manifest entry per executed (or resumed) stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub input_docs: u64,
    pub output_docs: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_ms: u128,
    /// Hash of (config bytes, stage name, input file hash): the resume key.
    pub stage_hash: String,
    pub output_hash: String,
    pub resumed: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: Vec<StageReport>,
}

impl RunManifest {
    fn load_or_default(path: &Path, config_hash: &str) -> Self {
        let loaded: Option<RunManifest> = std::fs::read(path)
            .ok()
            .and_then(|bytes| serde_json::from_slice(&bytes).ok());
        match loaded {
            Some(m) if m.config_hash == config_hash => m,
            _ => RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: config_hash.to_string(),
                stages: Vec::new(),
            },
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(e.to_string()))?;
        atomic_write(path, json.as_bytes())
    }
}

/// Writes through a temp file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A document count plus token estimate for manifest accounting. Documents
/// without a token_count are estimated by whitespace word count.
fn corpus_measure(docs: &[Document]) -> (u64, u64) {
    let tokens: u64 = docs
        .iter()
        .map(|d| {
            d.token_count
                .unwrap_or_else(|| d.text.split_whitespace().count() as u64)
        })
        .sum();
    (docs.len() as u64, tokens)
}

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(workdir: &Path) -> Result<Self> {
        let path = workdir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(
                format!("{} exists: another run owns this workdir", path.display()),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub config_bytes_hash: String,
    pub manifest: RunManifest,
    manifest_path: PathBuf,
    _lock: LockGuard,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, config_bytes_hash: String) -> Result<Self> {
        std::fs::create_dir_all(&config.pipeline.workdir)
            .map_err(|e| Error::io(&config.pipeline.workdir, e))?;
        let lock = LockGuard::acquire(&config.pipeline.workdir)?;
        let manifest_path = config.pipeline.workdir.join("manifest.json");
        let manifest = RunManifest::load_or_default(&manifest_path, &config_bytes_hash);
        Ok(Pipeline {
            config,
            config_bytes_hash,
            manifest,
            manifest_path,
            _lock: lock,
        })
    }

    pub fn open(config_path: &Path) -> Result<Self> {
        let (config, hash) = PipelineConfig::load(config_path)?;
        Self::new(config, hash)
    }

    fn stage_dir(&self, index: usize, name: &str) -> PathBuf {
        self.config
            .pipeline
            .workdir
            .join(format!("{:02}_{name}", index + 1))
    }

    /// Collects the initial corpus: a single JSONL file, or every `*.jsonl`
    /// in a directory in name order. Record errors become a report file.
    fn ingest(&self) -> Result<(Vec<Document>, Vec<String>)> {
        let input = &self.config.pipeline.input;
        let mut files = Vec::new();
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|e| Error::io(input, e))?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("jsonl"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(input.clone());
        }
        let mut docs = Vec::new();
        let mut errors = Vec::new();
        for file in files {
            let (mut d, errs) = read_corpus(&file)?;
            docs.append(&mut d);
            errors.extend(errs.iter().map(|e| e.to_string()));
        }
        Ok((docs, errors))
    }

    /// Runs the configured stages in canonical order. A stage failure halts
    /// the run with the manifest reflecting completed stages.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in self.config.stages() {
            self.run_stage(&stage)?;
        }
        Ok(())
    }

    /// Runs one stage, resuming from the manifest when its inputs and
    /// config are unchanged.
    pub fn run_stage(&mut self, name: &str) -> Result<()> {
        let stages = self.config.stages();
        let index = stages
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Config(format!("stage {name} not in configured stages")))?;

        // Input: the previous stage's output, or the raw ingest.
        let (input_docs, ingest_errors, input_hash) = if index == 0 {
            let (docs, errors) = self.ingest()?;
            let hash = match self.config.pipeline.input.is_file() {
                true => sha256_file(&self.config.pipeline.input)?,
                false => {
                    let mut hasher = Sha256::new();
                    for doc in &docs {
                        hasher.update(doc.id.as_bytes());
                        hasher.update(doc.text.as_bytes());
                    }
                    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
                }
            };
            (docs, errors, hash)
        } else {
            let prev = self
                .stage_dir(index - 1, &stages[index - 1])
                .join("corpus.jsonl");
            if !prev.exists() {
                return Err(Error::Validation(format!(
                    "stage {name}: missing prerequisite output {}",
                    prev.display()
                )));
            }
            let hash = sha256_file(&prev)?;
            let (docs, errors) = read_corpus(&prev)?;
            (docs, errors.iter().map(|e| e.to_string()).collect(), hash)
        };

        let mut hasher = Sha256::new();
        hasher.update(self.config_bytes_hash.as_bytes());
        hasher.update(name.as_bytes());
        hasher.update(input_hash.as_bytes());
        let stage_hash: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();

        let dir = self.stage_dir(index, name);
        let corpus_path = dir.join("corpus.jsonl");
        if let Some(existing) = self.manifest.stages.iter().find(|s| s.name == name) {
            if existing.stage_hash == stage_hash && corpus_path.exists() {
                log::info!("stage {name}: unchanged, skipping");
                return Ok(());
            }
        }

        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let start = Instant::now();
        let (input_count, input_tokens) = corpus_measure(&input_docs);
        if !ingest_errors.is_empty() {
            atomic_write(
                &dir.join("record_errors.txt"),
                (ingest_errors.join("\n") + "\n").as_bytes(),
            )?;
        }

        let output_docs = self
            .execute(name, input_docs, &dir)
            .map_err(|e| Error::Stage {
                stage: name.to_string(),
                source: Box::new(e),
            })?;

        let tmp = dir.join("corpus.jsonl.tmp");
        write_corpus(output_docs.iter(), &tmp)?;
        std::fs::rename(&tmp, &corpus_path).map_err(|e| Error::io(&corpus_path, e))?;

        let (output_count, output_tokens) = corpus_measure(&output_docs);
        let report = StageReport {
            name: name.to_string(),
            input_docs: input_count,
            output_docs: output_count,
            input_tokens,
            output_tokens,
            wall_ms: start.elapsed().as_millis(),
            stage_hash,
            output_hash: sha256_file(&corpus_path)?,
            resumed: false,
        };
        self.manifest.stages.retain(|s| s.name != name);
        self.manifest.stages.push(report);
        self.manifest.save(&self.manifest_path)?;
        Ok(())
    }

    fn execute(&self, name: &str, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        match name {
            "url" => self.stage_url(docs, dir),
            "lines" => self.stage_lines(docs, dir),
            "onion" => self.stage_onion(docs, dir),
            "quality" => self.stage_quality(docs, dir),
            "pii" => self.stage_pii(docs, dir),
            "topic" => self.stage_topic(docs, dir),
            "sample" => self.stage_sample(docs, dir),
            other => Err(Error::Config(format!("unknown stage: {other}"))),
        }
    }

    fn stage_url(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        let mut rules = UrlRuleSet::new();
        if let Some(max) = self.config.url.max_subdomains {
            rules = rules.with_max_subdomains(max)?;
        }
        for path in &self.config.url.blacklists {
            rules.load_blacklist_file(path)?;
        }
        if let Some(path) = &self.config.url.keywords {
            rules.load_keyword_file(path)?;
        }
        use rayon::prelude::*;
        let verdicts: Vec<_> = docs
            .par_iter()
            .map(|doc| apply_url_filter(doc, &rules))
            .collect();
        let mut kept = Vec::new();
        let mut log_lines = String::new();
        for (doc, verdict) in docs.into_iter().zip(verdicts) {
            if verdict.keep {
                kept.push(doc);
            } else {
                log_lines.push_str(&format!(
                    "{}\n",
                    serde_json::json!({"id": doc.id, "rule": verdict.rule})
                ));
            }
        }
        atomic_write(&dir.join("dropped.jsonl"), log_lines.as_bytes())?;
        Ok(kept)
    }

    fn dedup_mode_for(&self, lang: &str) -> Result<DedupMode> {
        self.config
            .dedup
            .modes
            .get(lang)
            .unwrap_or(&self.config.dedup.default_mode)
            .parse()
    }

    /// Groups documents by language preserving relative order, applies `f`
    /// per group, and reassembles the survivors in original corpus order.
    fn per_language<F>(&self, docs: Vec<Document>, mut f: F) -> Result<Vec<Document>>
    where
        F: FnMut(&str, Vec<Document>) -> Result<Vec<Document>>,
    {
        let order: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
        let mut by_lang: BTreeMap<String, Vec<Document>> = BTreeMap::new();
        for doc in docs {
            by_lang.entry(doc.lang.clone()).or_default().push(doc);
        }
        let mut surviving: BTreeMap<String, Document> = BTreeMap::new();
        for (lang, group) in by_lang {
            for doc in f(&lang, group)? {
                surviving.insert(doc.id.clone(), doc);
            }
        }
        Ok(order
            .into_iter()
            .filter_map(|id| surviving.remove(&id))
            .collect())
    }

    fn stage_lines(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        let mut report = String::new();
        let out = self.per_language(docs, |lang, group| {
            let per_source = self.dedup_mode_for(lang)? == DedupMode::PerSource;
            let mut indexes: BTreeMap<String, LineIndex> = BTreeMap::new();
            let mut kept = Vec::new();
            for doc in group {
                let key = if per_source { doc.source.clone() } else { String::new() };
                let index = indexes.entry(key).or_insert_with(LineIndex::new);
                let id = doc.id.clone();
                let outcome = exact_line_dedup_doc(doc, index);
                report.push_str(&format!(
                    "{}\n",
                    serde_json::json!({"id": id, "action": outcome.action, "removed_lines": outcome.removed_lines})
                ));
                kept.extend(outcome.doc);
            }
            Ok(kept)
        })?;
        atomic_write(&dir.join("dedup.jsonl"), report.as_bytes())?;
        Ok(out)
    }

    fn stage_onion(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        let params = DedupParams {
            n: self.config.dedup.ngram,
            dup_threshold: self.config.dedup.dup_threshold,
            doc_threshold: self.config.dedup.doc_threshold,
            seed_dropped: self.config.dedup.seed_dropped,
        };
        let mut report = String::new();
        let out = self.per_language(docs, |lang, group| {
            let mode = self.dedup_mode_for(lang)?;
            if mode == DedupMode::LinesOnly {
                return Ok(group);
            }
            let per_source = mode == DedupMode::PerSource;
            let mut states: BTreeMap<String, NGramState> = BTreeMap::new();
            let mut kept = Vec::new();
            for doc in group {
                let key = if per_source { doc.source.clone() } else { String::new() };
                let state = states.entry(key).or_insert_with(|| {
                    let mut s = NGramState::new();
                    s.n = params.n;
                    s.dup_threshold = params.dup_threshold;
                    s.doc_threshold = params.doc_threshold;
                    s.seed_dropped = params.seed_dropped;
                    s
                });
                state.validate()?;
                let id = doc.id.clone();
                let outcome = onion_dedup_doc(doc, state);
                report.push_str(&format!(
                    "{}\n",
                    serde_json::json!({
                        "id": id,
                        "action": outcome.action,
                        "dup_ratio": outcome.dup_ratio,
                    })
                ));
                kept.extend(outcome.doc);
            }
            Ok(kept)
        })?;
        atomic_write(&dir.join("dedup.jsonl"), report.as_bytes())?;
        Ok(out)
    }

    fn stage_quality(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        let mut thresholds = HeuristicThresholds::default();
        if let Some(path) = &self.config.quality.thresholds {
            thresholds.load_overrides(path)?;
        }
        thresholds.validate()?;
        let mut stops = StopwordTable::bundled();
        if let Some(dir) = &self.config.quality.stopwords {
            stops.load_dir(dir)?;
        }
        let stats = compute_stats(docs.iter());
        use rayon::prelude::*;
        let verdicts: Vec<_> = docs
            .par_iter()
            .map(|doc| {
                let metrics = score_document(doc, &stops);
                if metrics.stopword_ratio.is_none() {
                    log::warn!("no stop-word list for language {}; rule skipped", doc.lang);
                }
                apply_heuristics(&metrics, &thresholds, stats.avg_word_length(&doc.lang))
            })
            .collect();
        let mut kept = Vec::new();
        let mut dropped = String::new();
        for (doc, verdict) in docs.into_iter().zip(verdicts) {
            if verdict.keep {
                kept.push(doc);
            } else {
                dropped.push_str(&format!(
                    "{}\n",
                    serde_json::json!({"id": doc.id, "rule": verdict.rule})
                ));
            }
        }
        atomic_write(&dir.join("dropped.jsonl"), dropped.as_bytes())?;
        Ok(kept)
    }

    fn stage_pii(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        let mut rules = PiiRules::new(self.config.pii.seed.unwrap_or(self.config.pipeline.seed));
        if let Some(path) = &self.config.pii.national_ids {
            rules.load_national_ids(path)?;
        }
        use rayon::prelude::*;
        let results: Vec<_> = docs
            .into_par_iter()
            .map(|doc| crate::pii::anonymize_pii(doc, &rules))
            .collect();
        let mut report = String::new();
        let mut out = Vec::with_capacity(results.len());
        for (doc, replacements) in results {
            for r in &replacements {
                report.push_str(&format!(
                    "{}\n",
                    serde_json::json!({"id": doc.id, "kind": r.kind, "span": [r.start, r.end]})
                ));
            }
            out.push(doc);
        }
        atomic_write(&dir.join("pii.jsonl"), report.as_bytes())?;
        Ok(out)
    }

    fn stage_topic(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        if self.config.topic.langs.is_empty() {
            return Ok(docs);
        }
        let rule = match &self.config.topic.keywords {
            Some(path) => ClusterFlagRule::from_keyword_file(path)?,
            None => ClusterFlagRule::default(),
        };
        let mut report = String::new();
        let out = self.per_language(docs, |lang, group| {
            if !self.config.topic.langs.iter().any(|l| l == lang) {
                return Ok(group);
            }
            let params = LdaParams {
                topics: self.config.topic.topics.unwrap_or(20),
                iterations: self.config.topic.iterations.unwrap_or(100),
                min_df: self.config.topic.min_df.unwrap_or(5),
                seed: self.config.topic.seed.unwrap_or(self.config.pipeline.seed),
                ..Default::default()
            };
            let model = train_lda(&group, &params)?;
            model.save(&dir.join(format!("lda_{lang}.bin")))?;
            let outcome = crate::topic::flag_and_filter(group, &model, &rule)?;
            report.push_str(&format!(
                "{}\n",
                serde_json::json!({
                    "lang": lang,
                    "flagged_topics": outcome.flagged,
                    "removed": outcome.removed.iter().map(|d| d.id.clone()).collect::<Vec<_>>(),
                    "removed_fraction": outcome.removed_fraction,
                })
            ));
            Ok(outcome.kept)
        })?;
        atomic_write(&dir.join("topic.jsonl"), report.as_bytes())?;
        Ok(out)
    }

    /// Terminal producer: documents pass through unchanged; the shard
    /// manifest is the stage's real output.
    fn stage_sample(&self, docs: Vec<Document>, dir: &Path) -> Result<Vec<Document>> {
        let Some(section) = &self.config.sample else {
            return Err(Error::Config("missing [sample] section".into()));
        };
        let (uniques, overrides) = read_budget_csv(&section.budgets)?;
        let budgets = compute_budgets(&uniques, section.cap, section.target, &overrides, 0.0)?;
        let fractions = (
            section.phases[0],
            section.phases[1],
            section.phases[2],
        );
        let seed = section.seed.unwrap_or(self.config.pipeline.seed);
        let schedule = build_schedule(&budgets, fractions, section.total_budget, seed)?;
        let doc_tokens: Vec<DocTokens> = docs
            .iter()
            .map(|d| DocTokens {
                id: d.id.clone(),
                lang: d.lang.clone(),
                tokens: d
                    .token_count
                    .unwrap_or_else(|| d.text.split_whitespace().count() as u64),
            })
            .collect();
        let manifest = emit_manifest(&schedule, &budgets, &doc_tokens, section.shard_size)?;
        manifest.save_jsonl(&dir.join("shards.jsonl"))?;
        let presentations = serde_json::to_string_pretty(&manifest.presentations)
            .map_err(|e| Error::Validation(e.to_string()))?;
        atomic_write(&dir.join("presentations.json"), presentations.as_bytes())?;
        let schedule_json = serde_json::to_string_pretty(&schedule)
            .map_err(|e| Error::Validation(e.to_string()))?;
        atomic_write(&dir.join("schedule.json"), schedule_json.as_bytes())?;
        Ok(docs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture_corpus(path: &Path) {
        let docs: Vec<Document> = (0..6)
            .map(|i| {
                let mut d = Document::new(
                    format!("d{i}"),
                    "en",
                    "fixture",
                    format!(
                        "the quick brown fox number {i} jumps over the lazy dog. \
                         it runs through the field and the forest for a long while, \
                         then it rests by the river and watches the water flow past \
                         the old stone bridge until the evening comes and the stars \
                         appear over the quiet valley floor."
                    ),
                );
                d = d.with_url(format!("https://site{i}.example.com/page"));
                d
            })
            .collect();
        write_corpus(docs.iter(), path).unwrap();
    }

    fn base_config(dir: &Path) -> PathBuf {
        let corpus = dir.join("input.jsonl");
        write_fixture_corpus(&corpus);
        let config_path = dir.join("pipeline.toml");
        std::fs::write(
            &config_path,
            format!(
                r#"
[pipeline]
input = "input.jsonl"
workdir = "out"
seed = 42
stages = ["url", "lines", "onion", "quality", "pii"]
"#,
            ),
        )
        .unwrap();
        config_path
    }

    #[test]
    fn full_run_produces_manifest_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = base_config(dir.path());
        let mut pipeline = Pipeline::open(&config_path).unwrap();
        pipeline.run_all().unwrap();
        assert_eq!(pipeline.manifest.stages.len(), 5);
        // Filters only remove documents.
        for pair in pipeline.manifest.stages.windows(2) {
            assert_eq!(pair[0].output_docs, pair[1].input_docs);
            assert!(pair[0].output_docs <= pair[0].input_docs);
        }
        assert!(dir.path().join("out/05_pii/corpus.jsonl").exists());
    }

    #[test]
    fn rerun_with_unchanged_config_skips_stages() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = base_config(dir.path());
        {
            let mut pipeline = Pipeline::open(&config_path).unwrap();
            pipeline.run_all().unwrap();
        }
        let before = std::fs::metadata(dir.path().join("out/01_url/corpus.jsonl"))
            .unwrap()
            .modified()
            .unwrap();
        {
            let mut pipeline = Pipeline::open(&config_path).unwrap();
            pipeline.run_all().unwrap();
        }
        let after = std::fs::metadata(dir.path().join("out/01_url/corpus.jsonl"))
            .unwrap()
            .modified()
            .unwrap();
        assert_eq!(before, after, "stage output rewritten despite unchanged config");
    }

    #[test]
    fn stage_order_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("input.jsonl");
        write_fixture_corpus(&corpus);
        let config_path = dir.path().join("pipeline.toml");
        std::fs::write(
            &config_path,
            r#"
[pipeline]
input = "input.jsonl"
workdir = "out"
seed = 1
stages = ["quality", "url"]
"#,
        )
        .unwrap();
        let err = PipelineConfig::load(&config_path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_referenced_file_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("input.jsonl");
        write_fixture_corpus(&corpus);
        let config_path = dir.path().join("pipeline.toml");
        std::fs::write(
            &config_path,
            r#"
[pipeline]
input = "input.jsonl"
workdir = "out"
seed = 1

[url]
blacklists = ["no-such-file.txt"]
"#,
        )
        .unwrap();
        assert!(PipelineConfig::load(&config_path).is_err());
    }

    #[test]
    fn empty_input_stage_produces_valid_empty_output() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("input.jsonl");
        std::fs::write(&corpus, "").unwrap();
        let config_path = dir.path().join("pipeline.toml");
        std::fs::write(
            &config_path,
            r#"
[pipeline]
input = "input.jsonl"
workdir = "out"
seed = 1
stages = ["url"]
"#,
        )
        .unwrap();
        let mut pipeline = Pipeline::open(&config_path).unwrap();
        pipeline.run_all().unwrap();
        let out = std::fs::read_to_string(dir.path().join("out/01_url/corpus.jsonl")).unwrap();
        assert!(out.is_empty());
        assert_eq!(pipeline.manifest.stages[0].output_docs, 0);
    }

    #[test]
    fn lock_prevents_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = base_config(dir.path());
        let first = Pipeline::open(&config_path).unwrap();
        assert!(Pipeline::open(&config_path).is_err());
        drop(first);
        assert!(Pipeline::open(&config_path).is_ok());
    }
}
