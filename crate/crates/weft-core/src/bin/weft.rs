//! `weft`: multilingual corpus curation pipeline and evaluation CLI.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use weft_core::bpe::{rebalance_loop, BpeVocab, RebalanceConfig};
use weft_core::corpus::{compute_stats, read_corpus, write_corpus, Document};
use weft_core::dedup::{dedup_pipeline, DedupMode, DedupParams};
use weft_core::error::{Error, Result};
use weft_core::metrics::{
    borda, memorization_audit, per_char_perplexity, relative_improvement, render_audit_table,
    AuditTokenizer, BenchmarkTable, Generator, ScoredText, WhitespaceTokenizer,
};
use weft_core::parallel::{
    allocate_sentences, build_documents, calibrate_thresholds, filter_pairs, read_pairs_tsv,
    CommandScorer, QualityScorer, StubScorer, ThresholdTable, TokenCounter, WordCounter,
};
use weft_core::pii::{anonymize_pii, PiiRules};
use weft_core::pipeline::{atomic_write, Pipeline};
use weft_core::quality::{
    apply_heuristics, score_document, HeuristicThresholds, StopwordTable,
};
use weft_core::sampler::{
    build_schedule, compute_budgets, emit_manifest, read_budget_csv, DocTokens,
};
use weft_core::topic::{flag_and_filter, train_lda, ClusterFlagRule, LdaModel, LdaParams};
use weft_core::urlfilter::{apply_url_filter, UrlRuleSet};

#[derive(Parser)]
#[command(
    name = "weft",
    version,
    about = "Multilingual corpus curation pipeline and evaluation toolkit"
)]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drop documents from disallowed or suspicious URLs
    FilterUrl(FilterUrlArgs),
    /// Exact-line and n-gram deduplication
    Dedup(DedupArgs),
    /// Heuristic quality thresholds
    FilterQuality(FilterQualityArgs),
    /// Replace PII with synthetic equivalents
    Pii(PiiArgs),
    /// LDA topic clustering and keyword-flagged removal
    TopicFilter(TopicFilterArgs),
    /// Upsampling budgets, curriculum schedule, and shard manifest
    Sample(SampleArgs),
    /// Tokenizer training and equity rebalancing
    Equity(EquityArgs),
    /// Quality-filter parallel pairs and build synthetic XML documents
    Parallel(ParallelArgs),
    /// Memorization audit against a generation command
    Audit(AuditArgs),
    /// Per-character perplexity and Borda aggregation
    Score(ScoreArgs),
    /// Run the configured pipeline stages
    Run(RunArgs),
}

#[derive(Args)]
struct FilterUrlArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Blacklist file of domains; repeatable
    #[arg(long = "blacklist")]
    blacklists: Vec<PathBuf>,
    /// File of lowercase URL keywords
    #[arg(long)]
    url_keywords: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_subdomains: usize,
    /// JSONL verdict log of dropped documents: {id, rule}
    #[arg(long)]
    verdict_log: Option<PathBuf>,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// corpus | source | lines-only
    #[arg(long, default_value = "corpus")]
    dedup_mode: String,
    #[arg(long, default_value_t = 5)]
    ngram: usize,
    #[arg(long, default_value_t = 0.5)]
    dup_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    doc_threshold: f64,
    /// Whether dropped documents' n-grams still seed the seen set
    #[arg(long, default_value_t = true)]
    seed_dropped: bool,
    /// JSONL report: {id, action, dup_ratio}
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FilterQualityArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// key=value overrides for the seven thresholds
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Directory of per-language stop-word lists (<lang>.txt)
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Precomputed corpus stats JSON; computed from the input when absent
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PiiArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pii_seed: u64,
    /// TOML file of national-id rules
    #[arg(long)]
    national_ids: Option<PathBuf>,
    /// JSONL report: {id, kind, span}
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TopicFilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keyword file flagging topics for removal
    #[arg(long)]
    flag_keywords: PathBuf,
    #[arg(long, default_value_t = 20)]
    topics: usize,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    min_df: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load a trained model instead of training
    #[arg(long)]
    model: Option<PathBuf>,
    /// Where to save the trained model
    #[arg(long)]
    save_model: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// CSV: lang,unique_tokens[,ratio_override]
    #[arg(long)]
    budgets: PathBuf,
    #[arg(long, default_value_t = 2.5)]
    cap: f64,
    /// Upsampling target in the budget unit
    #[arg(long)]
    target: f64,
    #[arg(long)]
    total_budget: u64,
    /// Three phase fractions
    #[arg(long, default_value = "0.075,0.675,0.25", value_delimiter = ',')]
    phases: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    shard_size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus to shard; omitting it emits budgets and schedule only
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EquityArgs {
    /// Directory of per-language sample files (<lang>.txt)
    #[arg(long)]
    samples: PathBuf,
    /// JSON file: {lang: [aligned sentences]}
    #[arg(long)]
    parallel: Option<PathBuf>,
    /// CSV of initial byte budgets: lang,bytes. Default: equal budgets
    #[arg(long)]
    budgets: Option<PathBuf>,
    /// Focus languages (comma separated); default all
    #[arg(long, value_delimiter = ',')]
    focus: Vec<String>,
    #[arg(long, default_value_t = 4096)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0.99995)]
    coverage: f64,
    #[arg(long, default_value_t = 1.10)]
    tolerance: f64,
    #[arg(long, default_value_t = 10)]
    max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long)]
    out_vocab: PathBuf,
    /// Equity report JSON (written when --parallel is given)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ParallelArgs {
    /// TSV: src_lang, tgt_lang, origin, src_text, tgt_text[, score]
    #[arg(long)]
    pairs: PathBuf,
    /// Calibration dev set in the same TSV format
    #[arg(long)]
    dev_pairs: Option<PathBuf>,
    /// stub | external-command
    #[arg(long, default_value = "stub")]
    scorer: String,
    /// Command reading TSV pairs on stdin, writing scores on stdout
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// Priority file: one "src tgt" pair per line, highest first
    #[arg(long)]
    priorities: Option<PathBuf>,
    #[arg(long, default_value_t = 8192)]
    max_doc_tokens: u64,
    /// Count tokens with a trained vocabulary instead of words
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL of documents
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    skipped_report: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    input: PathBuf,
    /// Command reading the prompt on stdin and writing the continuation on
    /// stdout; WEFT_MAX_TOKENS carries the generation cap
    #[arg(long)]
    gen_cmd: String,
    /// Tokenizer: "words" or a vocabulary file path
    #[arg(long, default_value = "words")]
    tokenizer: String,
    /// Output JSONL of per-document records
    #[arg(long)]
    records: PathBuf,
    /// Per-language summary TSV
    #[arg(long)]
    summary: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSONL of {text, total_log_prob, token_count}
    #[arg(long)]
    input: Option<PathBuf>,
    /// Baseline scored JSONL aligned line-by-line with --input
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Benchmark table JSON; prints average Borda scores
    #[arg(long)]
    borda: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::FilterUrl(args) => cmd_filter_url(args),
        Command::Dedup(args) => cmd_dedup(args),
        Command::FilterQuality(args) => cmd_filter_quality(args),
        Command::Pii(args) => cmd_pii(args),
        Command::TopicFilter(args) => cmd_topic_filter(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Equity(args) => cmd_equity(args),
        Command::Parallel(args) => cmd_parallel(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Score(args) => cmd_score(args),
        Command::Run(args) => cmd_run(args),
    }
}

fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let (docs, errors) = read_corpus(path)?;
    for e in &errors {
        log::warn!("{e}");
    }
    Ok(docs)
}

fn write_report(path: &Option<PathBuf>, lines: &str) -> Result<()> {
    if let Some(path) = path {
        atomic_write(path, lines.as_bytes())?;
    }
    Ok(())
}

fn cmd_filter_url(args: FilterUrlArgs) -> Result<()> {
    let mut rules = UrlRuleSet::new().with_max_subdomains(args.max_subdomains)?;
    for path in &args.blacklists {
        rules.load_blacklist_file(path)?;
    }
    if let Some(path) = &args.url_keywords {
        rules.load_keyword_file(path)?;
    }
    let docs = load_corpus(&args.input)?;
    let total = docs.len();
    let mut kept = Vec::new();
    let mut log_lines = String::new();
    for doc in docs {
        let verdict = apply_url_filter(&doc, &rules);
        if verdict.keep {
            kept.push(doc);
        } else {
            log_lines.push_str(&format!(
                "{}\n",
                serde_json::json!({"id": doc.id, "rule": verdict.rule})
            ));
        }
    }
    write_report(&args.verdict_log, &log_lines)?;
    let written = write_corpus(kept.iter(), &args.output)?;
    log::info!("url filter: kept {written} of {total}");
    Ok(())
}

fn cmd_dedup(args: DedupArgs) -> Result<()> {
    let mode: DedupMode = args.dedup_mode.parse()?;
    let params = DedupParams {
        n: args.ngram,
        dup_threshold: args.dup_threshold,
        doc_threshold: args.doc_threshold,
        seed_dropped: args.seed_dropped,
    };
    let docs = load_corpus(&args.input)?;
    let total = docs.len();
    let (kept, report) = dedup_pipeline(docs, mode, &params)?;
    let mut lines = String::new();
    for entry in &report {
        lines.push_str(&serde_json::to_string(entry).map_err(|e| Error::Validation(e.to_string()))?);
        lines.push('\n');
    }
    write_report(&args.report, &lines)?;
    let written = write_corpus(kept.iter(), &args.output)?;
    log::info!("dedup: kept {written} of {total}");
    Ok(())
}

fn cmd_filter_quality(args: FilterQualityArgs) -> Result<()> {
    let mut thresholds = HeuristicThresholds::default();
    if let Some(path) = &args.thresholds {
        thresholds.load_overrides(path)?;
    }
    thresholds.validate()?;
    let mut stops = StopwordTable::bundled();
    if let Some(dir) = &args.stopwords {
        stops.load_dir(dir)?;
    }
    let docs = load_corpus(&args.input)?;
    let stats = match &args.stats {
        Some(path) => weft_core::corpus::CorpusStats::load(path)?,
        None => compute_stats(docs.iter()),
    };
    let total = docs.len();
    let mut kept = Vec::new();
    let mut dropped = String::new();
    for doc in docs {
        let metrics = score_document(&doc, &stops);
        let verdict = apply_heuristics(&metrics, &thresholds, stats.avg_word_length(&doc.lang));
        if verdict.keep {
            kept.push(doc);
        } else {
            dropped.push_str(&format!(
                "{}\n",
                serde_json::json!({"id": doc.id, "rule": verdict.rule})
            ));
        }
    }
    write_report(&args.report, &dropped)?;
    let written = write_corpus(kept.iter(), &args.output)?;
    log::info!("quality filter: kept {written} of {total}");
    Ok(())
}

fn cmd_pii(args: PiiArgs) -> Result<()> {
    let mut rules = PiiRules::new(args.pii_seed);
    if let Some(path) = &args.national_ids {
        rules.load_national_ids(path)?;
    }
    let docs = load_corpus(&args.input)?;
    let mut out = Vec::with_capacity(docs.len());
    let mut report = String::new();
    let mut replaced = 0usize;
    for doc in docs {
        let (doc, replacements) = anonymize_pii(doc, &rules);
        replaced += replacements.len();
        for r in &replacements {
            report.push_str(&format!(
                "{}\n",
                serde_json::json!({"id": doc.id, "kind": r.kind, "span": [r.start, r.end]})
            ));
        }
        out.push(doc);
    }
    write_report(&args.report, &report)?;
    write_corpus(out.iter(), &args.output)?;
    log::info!("pii: {replaced} replacements");
    Ok(())
}

fn cmd_topic_filter(args: TopicFilterArgs) -> Result<()> {
    let rule = ClusterFlagRule::from_keyword_file(&args.flag_keywords)?;
    let docs = load_corpus(&args.input)?;
    let total = docs.len();
    let model = match &args.model {
        Some(path) => LdaModel::load(path)?,
        None => {
            let params = LdaParams {
                topics: args.topics,
                iterations: args.iterations,
                min_df: args.min_df,
                seed: args.seed,
                ..Default::default()
            };
            train_lda(&docs, &params)?
        }
    };
    if let Some(path) = &args.save_model {
        model.save(path)?;
    }
    let outcome = flag_and_filter(docs, &model, &rule)?;
    let mut report = String::new();
    for doc in &outcome.removed {
        report.push_str(&format!("{}\n", serde_json::json!({"id": doc.id})));
    }
    write_report(&args.report, &report)?;
    write_corpus(outcome.kept.iter(), &args.output)?;
    log::info!(
        "topic filter: removed {} of {total} ({:.1}%), flagged topics {:?}",
        outcome.removed.len(),
        outcome.removed_fraction * 100.0,
        outcome.flagged
    );
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    if args.phases.len() != 3 {
        return Err(Error::Config("--phases needs three fractions".into()));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let (uniques, overrides) = read_budget_csv(&args.budgets)?;
    let budgets = compute_budgets(&uniques, args.cap, args.target, &overrides, 0.0)?;
    let budgets_json = serde_json::to_string_pretty(&budgets)
        .map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(&args.out_dir.join("budgets.json"), budgets_json.as_bytes())?;
    let schedule = build_schedule(
        &budgets,
        (args.phases[0], args.phases[1], args.phases[2]),
        args.total_budget,
        args.seed,
    )?;
    let schedule_json = serde_json::to_string_pretty(&schedule)
        .map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(&args.out_dir.join("schedule.json"), schedule_json.as_bytes())?;
    if let Some(corpus) = &args.corpus {
        let docs = load_corpus(corpus)?;
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
        let manifest = emit_manifest(&schedule, &budgets, &doc_tokens, args.shard_size)?;
        manifest.save_jsonl(&args.out_dir.join("shards.jsonl"))?;
        let presentations = serde_json::to_string_pretty(&manifest.presentations)
            .map_err(|e| Error::Validation(e.to_string()))?;
        atomic_write(
            &args.out_dir.join("presentations.json"),
            presentations.as_bytes(),
        )?;
        log::info!("sample: {} shards", manifest.shards.len());
    }
    Ok(())
}

fn read_samples_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut samples = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
        .collect();
    entries.sort();
    for path in entries {
        let Some(lang) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        samples.insert(lang.to_lowercase(), text);
    }
    if samples.is_empty() {
        return Err(Error::Validation(format!(
            "no .txt sample files in {}",
            dir.display()
        )));
    }
    Ok(samples)
}

fn cmd_equity(args: EquityArgs) -> Result<()> {
    let samples = read_samples_dir(&args.samples)?;
    let budgets: BTreeMap<String, u64> = match &args.budgets {
        Some(path) => {
            let (raw, _) = read_budget_csv(path)?;
            raw.into_iter().map(|(l, b)| (l, b as u64)).collect()
        }
        None => {
            let min = samples.values().map(|s| s.len() as u64).min().unwrap_or(0);
            samples.keys().map(|l| (l.clone(), min)).collect()
        }
    };
    let config = RebalanceConfig {
        vocab_size: args.vocab_size,
        coverage: args.coverage,
        tolerance: args.tolerance,
        max_iters: args.max_iters,
        gamma: args.gamma,
    };
    match &args.parallel {
        None => {
            // No evaluation set: train once with the given budgets.
            let vocab = BpeVocab::train(
                &samples,
                &budgets,
                &weft_core::bpe::BpeConfig {
                    vocab_size: config.vocab_size,
                    coverage: config.coverage,
                },
            )?;
            vocab.save(&args.out_vocab)?;
            log::info!("trained vocabulary of {} entries", vocab.len());
        }
        Some(parallel_path) => {
            let bytes = std::fs::read(parallel_path).map_err(|e| Error::io(parallel_path, e))?;
            let parallel: BTreeMap<String, Vec<String>> = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Validation(format!("{}: {e}", parallel_path.display())))?;
            let focus: BTreeSet<String> = args.focus.iter().map(|s| s.to_lowercase()).collect();
            let outcome = rebalance_loop(&samples, &budgets, &parallel, &focus, &config)?;
            outcome.vocab.save(&args.out_vocab)?;
            if let Some(report_path) = &args.report {
                #[derive(Serialize)]
                struct EquityRun<'a> {
                    converged: bool,
                    iterations: usize,
                    final_budgets: &'a BTreeMap<String, u64>,
                    trace: &'a [weft_core::bpe::EquityReport],
                }
                let json = serde_json::to_string_pretty(&EquityRun {
                    converged: outcome.converged,
                    iterations: outcome.iterations,
                    final_budgets: &outcome.budgets,
                    trace: &outcome.trace,
                })
                .map_err(|e| Error::Validation(e.to_string()))?;
                atomic_write(report_path, json.as_bytes())?;
            }
            let last = outcome.trace.last().expect("at least one iteration");
            log::info!(
                "equity loop: {} iterations, dispersion {:.4}, converged={}",
                outcome.iterations,
                last.dispersion,
                outcome.converged
            );
            if !outcome.converged {
                log::warn!("dispersion target not reached within --max-iters");
            }
        }
    }
    Ok(())
}

fn read_priorities(path: &Path) -> Result<Vec<(String, String)>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split([' ', ',', '\t']).filter(|p| !p.is_empty()).collect();
        if parts.len() != 2 {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected `src tgt`".into(),
            });
        }
        out.push((parts[0].to_lowercase(), parts[1].to_lowercase()));
    }
    Ok(out)
}

fn cmd_parallel(args: ParallelArgs) -> Result<()> {
    let scorer: Box<dyn QualityScorer> = match args.scorer.as_str() {
        "stub" => Box::new(StubScorer),
        "external-command" => Box::new(CommandScorer {
            command: args.scorer_cmd.clone().ok_or_else(|| {
                Error::Config("--scorer external-command requires --scorer-cmd".into())
            })?,
        }),
        other => return Err(Error::Config(format!("unknown scorer: {other}"))),
    };
    let (pairs, errors) = read_pairs_tsv(&args.pairs)?;
    for e in &errors {
        log::warn!("{e}");
    }
    let table: ThresholdTable = match &args.dev_pairs {
        Some(path) => {
            let (dev, errors) = read_pairs_tsv(path)?;
            for e in &errors {
                log::warn!("{e}");
            }
            calibrate_thresholds(scorer.as_ref(), &dev)?
        }
        None => {
            // Without a dev set every observed pair gets threshold 0:
            // filtering passes everything through.
            let mut table = ThresholdTable::default();
            for pair in &pairs {
                table.set(&pair.src_lang, &pair.tgt_lang, 0.0);
            }
            table
        }
    };
    let total = pairs.len();
    let (kept, dropped) = filter_pairs(pairs, &table, scorer.as_ref())?;
    log::info!("parallel: {dropped} of {total} pairs below threshold");
    let priorities = match &args.priorities {
        Some(path) => read_priorities(path)?,
        None => Vec::new(),
    };
    let allocated = allocate_sentences(kept, &priorities, args.seed);
    let counter: Box<dyn TokenCounter> = match &args.vocab {
        Some(path) => Box::new(BpeVocab::load(path)?),
        None => Box::new(WordCounter),
    };
    let (docs, skipped) =
        build_documents(&allocated, counter.as_ref(), args.max_doc_tokens, args.seed);
    let mut out = String::new();
    for doc in &docs {
        out.push_str(&serde_json::to_string(doc).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    atomic_write(&args.out, out.as_bytes())?;
    if let Some(path) = &args.skipped_report {
        let mut lines = String::new();
        for s in &skipped {
            lines.push_str(&serde_json::to_string(s).map_err(|e| Error::Validation(e.to_string()))?);
            lines.push('\n');
        }
        atomic_write(path, lines.as_bytes())?;
    }
    log::info!(
        "parallel: {} documents from {} pairs ({} oversized skipped)",
        docs.len(),
        allocated.len(),
        skipped.len()
    );
    Ok(())
}

/// Generator backed by an external command. The prompt arrives on stdin;
/// WEFT_MAX_TOKENS carries the cap.
struct CommandGenerator {
    command: String,
}

impl Generator for CommandGenerator {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<String> {
        use std::io::Write as _;
        use std::process::{Command as Process, Stdio};
        let mut child = Process::new("sh")
            .arg("-c")
            .arg(&self.command)
            .env("WEFT_MAX_TOKENS", max_tokens.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Command(format!("{}: {e}", self.command)))?;
        child
            .stdin
            .as_mut()
            .expect("piped stdin")
            .write_all(prompt.as_bytes())
            .map_err(|e| Error::Command(format!("{}: {e}", self.command)))?;
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Command(format!("{}: {e}", self.command)))?;
        if !output.status.success() {
            return Err(Error::Command(format!(
                "{}: exited with {}",
                self.command, output.status
            )));
        }
        String::from_utf8(output.stdout)
            .map_err(|_| Error::Command(format!("{}: output is not UTF-8", self.command)))
    }
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let docs = load_corpus(&args.input)?;
    let generator = CommandGenerator {
        command: args.gen_cmd.clone(),
    };
    let vocab;
    let tokenizer: &dyn AuditTokenizer = match args.tokenizer.as_str() {
        "words" => &WhitespaceTokenizer,
        path => {
            vocab = BpeVocab::load(Path::new(path))?;
            &vocab
        }
    };
    let outcome = memorization_audit(&docs, &generator, tokenizer);
    let mut lines = String::new();
    for record in &outcome.records {
        lines.push_str(&serde_json::to_string(record).map_err(|e| Error::Validation(e.to_string()))?);
        lines.push('\n');
    }
    atomic_write(&args.records, lines.as_bytes())?;
    atomic_write(&args.summary, render_audit_table(&outcome.table).as_bytes())?;
    for (id, msg) in &outcome.failures {
        log::warn!("audit failure for {id}: {msg}");
    }
    let flagged = outcome.records.iter().filter(|r| r.flagged).count();
    log::info!(
        "audit: {} documents, {} flagged, {} failures",
        outcome.records.len(),
        flagged,
        outcome.failures.len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoredRecord {
    text: String,
    total_log_prob: f64,
    token_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_char_ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    improvement_pct: Option<f64>,
}

fn read_scored(path: &Path) -> Result<Vec<ScoredRecord>> {
    let mut content = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut content))
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoredRecord = serde_json::from_str(line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    if let Some(path) = &args.borda {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let table: BenchmarkTable = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let scores = borda(&table)?;
        for (model, score) in &scores {
            println!("{model}\t{score}");
        }
        return Ok(());
    }
    let input = args
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("--input or --borda required".into()))?;
    let mut records = read_scored(input)?;
    let baselines = match &args.baseline {
        Some(path) => Some(read_scored(path)?),
        None => None,
    };
    if let Some(baselines) = &baselines {
        if baselines.len() != records.len() {
            return Err(Error::Validation(format!(
                "baseline has {} records, input has {}",
                baselines.len(),
                records.len()
            )));
        }
    }
    let mut out = String::new();
    for (i, record) in records.iter_mut().enumerate() {
        let scored = ScoredText {
            text: record.text.clone(),
            total_log_prob: record.total_log_prob,
            token_count: record.token_count,
        };
        let ppl = per_char_perplexity(&scored)?;
        record.per_char_ppl = Some(ppl);
        if let Some(baselines) = &baselines {
            let b = &baselines[i];
            let base_ppl = per_char_perplexity(&ScoredText {
                text: b.text.clone(),
                total_log_prob: b.total_log_prob,
                token_count: b.token_count,
            })?;
            record.improvement_pct = Some(relative_improvement(ppl, base_ppl)?);
        }
        out.push_str(&serde_json::to_string(record).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    match &args.output {
        Some(path) => atomic_write(path, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut pipeline = Pipeline::open(&args.config)?;
    pipeline.run_all()?;
    for stage in &pipeline.manifest.stages {
        log::info!(
            "stage {}: {} -> {} docs ({} ms)",
            stage.name,
            stage.input_docs,
            stage.output_docs,
            stage.wall_ms
        );
    }
    Ok(())
}
