//! Byte-pair tokenizer training, tokenization equity measurement, and the
//! iterative byte-budget rebalancing loop.
//!
//! The trainer consumes per-language byte budgets, applies a character
//! coverage cutoff (rare characters fall back to byte tokens), and merges
//! the most frequent adjacent pair greedily with lexicographic tie-breaks.
//! No merge crosses a space, a digit, or a Unicode script change; byte
//! fallback guarantees that decode(tokenize(text)) is the identity on any
//! UTF-8 input.
//!
//! Token id space: 0..256 are the byte-fallback tokens, then the covered
//! base alphabet in character order, then one id per merge in merge order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::AuditTokenizer;

const BYTE_TOKENS: u32 = 256;

/// Coarse Unicode script class used for the script-change split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScriptClass {
    Latin,
    Greek,
    Cyrillic,
    Armenian,
    Hebrew,
    Arabic,
    Devanagari,
    Georgian,
    Han,
    Hiragana,
    Katakana,
    Hangul,
    Thai,
    /// Punctuation, symbols, marks: attaches to any segment.
    Common,
}

fn script_class(c: char) -> ScriptClass {
    use ScriptClass::*;
    match c as u32 {
        0x0041..=0x005A | 0x0061..=0x007A | 0x00C0..=0x024F | 0x1E00..=0x1EFF
        | 0x2C60..=0x2C7F | 0xA720..=0xA7FF => Latin,
        0x0370..=0x03FF | 0x1F00..=0x1FFF => Greek,
        0x0400..=0x052F | 0x2DE0..=0x2DFF | 0xA640..=0xA69F => Cyrillic,
        0x0530..=0x058F => Armenian,
        0x0590..=0x05FF => Hebrew,
        0x0600..=0x06FF | 0x0750..=0x077F => Arabic,
        0x0900..=0x097F => Devanagari,
        0x10A0..=0x10FF => Georgian,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF => Han,
        0x3040..=0x309F => Hiragana,
        0x30A0..=0x30FF => Katakana,
        0x1100..=0x11FF | 0xAC00..=0xD7AF => Hangul,
        0x0E00..=0x0E7F => Thai,
        _ => Common,
    }
}

/// Splits text into merge-atomic segments: each whitespace character and
/// each digit stands alone, and a segment never spans a script change.
fn pretokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut script: Option<ScriptClass> = None;
    for (i, c) in text.char_indices() {
        let isolated = c.is_whitespace() || c.is_numeric();
        let cls = script_class(c);
        let boundary = if i == start {
            false
        } else if isolated {
            true
        } else {
            // The previous segment continues unless it was an isolated char
            // or the script changes.
            let prev_isolated = {
                let prev = text[start..i].chars().next_back().unwrap();
                prev.is_whitespace() || prev.is_numeric()
            };
            prev_isolated
                || (cls != ScriptClass::Common
                    && script.is_some_and(|s| s != cls))
        };
        if boundary {
            out.push(&text[start..i]);
            start = i;
            script = None;
        }
        if cls != ScriptClass::Common && !isolated {
            script.get_or_insert(cls);
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// A trained byte-pair vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    pub vocab_size: usize,
    pub coverage: f64,
    /// Covered base-alphabet characters, in character order.
    alphabet: Vec<char>,
    /// Merge rules in training order, as (left, right) token strings.
    merges: Vec<(String, String)>,
    // Derived lookups.
    char_ids: HashMap<char, u32>,
    token_text: Vec<String>,
    merge_ranks: HashMap<(u32, u32), (u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct BpeConfig {
    pub vocab_size: usize,
    pub coverage: f64,
}

impl Default for BpeConfig {
    fn default() -> Self {
        BpeConfig {
            vocab_size: 4096,
            coverage: 0.99995,
        }
    }
}

struct TrainWord {
    syms: Vec<u32>,
    freq: u64,
}

impl BpeVocab {
    /// Trains a vocabulary from per-language samples truncated to their byte
    /// budgets. Languages are concatenated in code order so training is
    /// deterministic.
    pub fn train(
        samples: &BTreeMap<String, String>,
        budget: &BTreeMap<String, u64>,
        config: &BpeConfig,
    ) -> Result<Self> {
        let mut corpus = String::new();
        for (lang, want) in budget {
            let sample = samples.get(lang).ok_or_else(|| {
                Error::Validation(format!("no tokenizer sample for language {lang}"))
            })?;
            let have = sample.len() as u64;
            if have < *want {
                return Err(Error::InsufficientBytes {
                    lang: lang.clone(),
                    have,
                    want: *want,
                });
            }
            let mut cut = *want as usize;
            while cut > 0 && !sample.is_char_boundary(cut) {
                cut -= 1;
            }
            corpus.push_str(&sample[..cut]);
            corpus.push('\n');
        }
        Self::train_corpus(&corpus, config)
    }

    /// Trains on an already-assembled corpus string.
    pub fn train_corpus(corpus: &str, config: &BpeConfig) -> Result<Self> {
        // Character coverage: most frequent characters covering the quantile
        // form the base alphabet, everything else byte-falls-back.
        let mut char_freq: HashMap<char, u64> = HashMap::new();
        for c in corpus.chars() {
            *char_freq.entry(c).or_insert(0) += 1;
        }
        let total: u64 = char_freq.values().sum();
        let mut by_freq: Vec<(char, u64)> = char_freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut alphabet: Vec<char> = Vec::new();
        let mut covered = 0u64;
        for (c, count) in &by_freq {
            if total > 0 && (covered as f64) < config.coverage * total as f64 {
                alphabet.push(*c);
                covered += count;
            } else {
                break;
            }
        }
        alphabet.sort_unstable();

        let base = BYTE_TOKENS as usize + alphabet.len();
        if config.vocab_size < base {
            return Err(Error::VocabTooSmall {
                requested: config.vocab_size,
                base,
            });
        }

        let mut vocab = BpeVocab {
            vocab_size: config.vocab_size,
            coverage: config.coverage,
            alphabet,
            merges: Vec::new(),
            char_ids: HashMap::new(),
            token_text: Vec::new(),
            merge_ranks: HashMap::new(),
        };
        vocab.rebuild_lookups();

        // Unique pretokens with frequencies, in first-seen order.
        let mut word_index: HashMap<&str, usize> = HashMap::new();
        let mut words: Vec<TrainWord> = Vec::new();
        for pre in pretokens(corpus) {
            if let Some(&i) = word_index.get(pre) {
                words[i].freq += 1;
            } else {
                word_index.insert(pre, words.len());
                words.push(TrainWord {
                    syms: vocab.initial_syms(pre),
                    freq: 1,
                });
            }
        }

        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (i, word) in words.iter().enumerate() {
            Self::account_word(word, i, &mut pair_counts, &mut pair_words, true);
        }

        let target_merges = config.vocab_size - base;
        while vocab.merges.len() < target_merges {
            let Some((&best, _)) = pair_counts
                .iter()
                .filter(|(_, &count)| count > 0)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb)
                        .then_with(|| vocab.pair_text(**pb).cmp(&vocab.pair_text(**pa)))
                })
            else {
                break;
            };
            let new_id = vocab.push_merge(best);
            let affected: Vec<usize> = pair_words
                .get(&best)
                .map(|s| {
                    let mut v: Vec<usize> = s.iter().copied().collect();
                    v.sort_unstable();
                    v
                })
                .unwrap_or_default();
            for wi in affected {
                let word = &words[wi];
                if !word.syms.windows(2).any(|w| (w[0], w[1]) == best) {
                    continue;
                }
                Self::account_word(&words[wi], wi, &mut pair_counts, &mut pair_words, false);
                let merged = Self::apply_merge(&words[wi].syms, best, new_id);
                words[wi].syms = merged;
                Self::account_word(&words[wi], wi, &mut pair_counts, &mut pair_words, true);
            }
            pair_counts.remove(&best);
        }
        Ok(vocab)
    }

    fn pair_text(&self, pair: (u32, u32)) -> (String, String) {
        (self.text_of(pair.0), self.text_of(pair.1))
    }

    fn text_of(&self, id: u32) -> String {
        self.token_text[(id - BYTE_TOKENS) as usize].clone()
    }

    fn account_word(
        word: &TrainWord,
        index: usize,
        pair_counts: &mut HashMap<(u32, u32), u64>,
        pair_words: &mut HashMap<(u32, u32), HashSet<usize>>,
        add: bool,
    ) {
        for w in word.syms.windows(2) {
            // Byte-fallback symbols never participate in merges.
            if w[0] < BYTE_TOKENS || w[1] < BYTE_TOKENS {
                continue;
            }
            let pair = (w[0], w[1]);
            if add {
                *pair_counts.entry(pair).or_insert(0) += word.freq;
                pair_words.entry(pair).or_default().insert(index);
            } else if let Some(c) = pair_counts.get_mut(&pair) {
                *c = c.saturating_sub(word.freq);
            }
        }
    }

    fn apply_merge(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(syms.len());
        let mut i = 0;
        while i < syms.len() {
            if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                out.push(new_id);
                i += 2;
            } else {
                out.push(syms[i]);
                i += 1;
            }
        }
        out
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let text = format!("{}{}", self.text_of(pair.0), self.text_of(pair.1));
        self.merges.push(self.pair_text(pair));
        self.token_text.push(text);
        let new_id = BYTE_TOKENS + self.token_text.len() as u32 - 1;
        self.merge_ranks
            .insert(pair, (self.merges.len() as u32 - 1, new_id));
        new_id
    }

    fn rebuild_lookups(&mut self) {
        self.char_ids.clear();
        self.token_text.clear();
        self.merge_ranks.clear();
        for (i, c) in self.alphabet.iter().enumerate() {
            self.char_ids.insert(*c, BYTE_TOKENS + i as u32);
            self.token_text.push(c.to_string());
        }
        let merges = std::mem::take(&mut self.merges);
        let mut text_ids: HashMap<String, u32> = self
            .token_text
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), BYTE_TOKENS + i as u32))
            .collect();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let (Some(&l), Some(&r)) = (text_ids.get(left), text_ids.get(right)) else {
                continue;
            };
            let text = format!("{left}{right}");
            self.token_text.push(text.clone());
            let id = BYTE_TOKENS + self.token_text.len() as u32 - 1;
            text_ids.insert(text, id);
            self.merge_ranks.insert((l, r), (rank as u32, id));
        }
        self.merges = merges;
    }

    fn initial_syms(&self, segment: &str) -> Vec<u32> {
        let mut syms = Vec::new();
        for c in segment.chars() {
            match self.char_ids.get(&c) {
                Some(&id) => syms.push(id),
                None => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        syms.push(b as u32);
                    }
                }
            }
        }
        syms
    }

    fn encode_segment(&self, segment: &str) -> Vec<u32> {
        let mut syms = self.initial_syms(segment);
        loop {
            let mut best: Option<(u32, (u32, u32), u32)> = None;
            for w in syms.windows(2) {
                if w[0] < BYTE_TOKENS || w[1] < BYTE_TOKENS {
                    continue;
                }
                if let Some(&(rank, id)) = self.merge_ranks.get(&(w[0], w[1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, (w[0], w[1]), id));
                    }
                }
            }
            match best {
                Some((_, pair, id)) => syms = Self::apply_merge(&syms, pair, id),
                None => break,
            }
        }
        syms
    }

    /// Tokenizes text to ids; deterministic, and decode inverts it exactly.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for segment in pretokens(text) {
            out.extend(self.encode_segment(segment));
        }
        out
    }

    /// Tokenizes and returns the byte offset past each token.
    pub fn tokenize_with_offsets(&self, text: &str) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut pos = 0usize;
        for segment in pretokens(text) {
            for id in self.encode_segment(segment) {
                pos += self.token_byte_len(id);
                ids.push(id);
                offsets.push(pos);
            }
        }
        (ids, offsets)
    }

    fn token_byte_len(&self, id: u32) -> usize {
        if id < BYTE_TOKENS {
            1
        } else {
            self.token_text[(id - BYTE_TOKENS) as usize].len()
        }
    }

    /// Decodes ids back to text. Errors when the byte-fallback tokens do not
    /// assemble into valid UTF-8.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id < BYTE_TOKENS {
                bytes.push(id as u8);
            } else {
                let idx = (id - BYTE_TOKENS) as usize;
                let text = self.token_text.get(idx).ok_or_else(|| {
                    Error::Validation(format!("token id {id} out of range"))
                })?;
                bytes.extend_from_slice(text.as_bytes());
            }
        }
        String::from_utf8(bytes)
            .map_err(|_| Error::Validation("decoded byte sequence is not UTF-8".into()))
    }

    pub fn alphabet_len(&self) -> usize {
        self.alphabet.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Actual vocabulary size: byte tokens + alphabet + merges. Lower than
    /// the requested size only when the corpus ran out of pairs.
    pub fn len(&self) -> usize {
        BYTE_TOKENS as usize + self.token_text.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes the versioned text format: a header line, the alphabet, then
    /// one merge per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(
            out,
            "weft-bpe v1 vocab_size={} coverage={} alphabet={} merges={}",
            self.vocab_size,
            self.coverage,
            self.alphabet.len(),
            self.merges.len()
        )
        .unwrap();
        for c in &self.alphabet {
            writeln!(out, "c {}", escape_sym(&c.to_string())).unwrap();
        }
        for (l, r) in &self.merges {
            writeln!(out, "m {} {}", escape_sym(l), escape_sym(r)).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Validation(format!("{}: empty vocab file", path.display())))?;
        let bad = |line: usize, msg: &str| Error::Record {
            path: path.to_path_buf(),
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut fields = header.split_whitespace();
        if fields.next() != Some("weft-bpe") || fields.next() != Some("v1") {
            return Err(bad(0, "expected `weft-bpe v1` header"));
        }
        let mut vocab_size = None;
        let mut coverage = None;
        for field in fields {
            match field.split_once('=') {
                Some(("vocab_size", v)) => vocab_size = v.parse().ok(),
                Some(("coverage", v)) => coverage = v.parse().ok(),
                _ => {}
            }
        }
        let mut vocab = BpeVocab {
            vocab_size: vocab_size.ok_or_else(|| bad(0, "missing vocab_size"))?,
            coverage: coverage.ok_or_else(|| bad(0, "missing coverage"))?,
            alphabet: Vec::new(),
            merges: Vec::new(),
            char_ids: HashMap::new(),
            token_text: Vec::new(),
            merge_ranks: HashMap::new(),
        };
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (tag, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(lineno, "expected `c` or `m` line"))?;
            match tag {
                "c" => {
                    let s = unescape_sym(rest).ok_or_else(|| bad(lineno, "bad escape"))?;
                    let mut chars = s.chars();
                    let (Some(c), None) = (chars.next(), chars.next()) else {
                        return Err(bad(lineno, "alphabet entry must be one character"));
                    };
                    vocab.alphabet.push(c);
                }
                "m" => {
                    let (l, r) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(lineno, "merge needs two fields"))?;
                    let l = unescape_sym(l).ok_or_else(|| bad(lineno, "bad escape"))?;
                    let r = unescape_sym(r).ok_or_else(|| bad(lineno, "bad escape"))?;
                    vocab.merges.push((l, r));
                }
                _ => return Err(bad(lineno, "unknown line tag")),
            }
        }
        vocab.rebuild_lookups();
        Ok(vocab)
    }
}

impl AuditTokenizer for BpeVocab {
    fn boundaries(&self, text: &str) -> Vec<usize> {
        self.tokenize_with_offsets(text).1
    }
}

fn escape_sym(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() || (c.is_whitespace() && c != ' ') => {
                out.push_str(&format!("\\u{{{:x}}}", c as u32));
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape_sym(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            's' => out.push(' '),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            't' => out.push('\t'),
            'u' => {
                if chars.next()? != '{' {
                    return None;
                }
                let mut hex = String::new();
                loop {
                    match chars.next()? {
                        '}' => break,
                        d => hex.push(d),
                    }
                }
                out.push(char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?);
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Per-language tokenization statistics over a sentence-aligned parallel set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LangEquity {
    pub sentences: usize,
    pub token_count: u64,
    pub mean_tokens: f64,
    /// (q1, median, q3) of tokens per sentence.
    pub quartiles: (f64, f64, f64),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EquityReport {
    pub per_language: BTreeMap<String, LangEquity>,
    /// max/min of mean tokens per sentence across the focus subset.
    pub dispersion: f64,
}

fn quantile(sorted: &[u64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo] as f64
    } else {
        let frac = pos - lo as f64;
        sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
    }
}

/// Measures tokenization equity on a sentence-aligned parallel set. The
/// dispersion statistic covers the `focus` subset; an empty focus set means
/// all languages count.
pub fn measure_equity(
    vocab: &BpeVocab,
    parallel: &BTreeMap<String, Vec<String>>,
    focus: &BTreeSet<String>,
) -> Result<EquityReport> {
    let mut expected_len: Option<usize> = None;
    let mut per_language = BTreeMap::new();
    for (lang, sentences) in parallel {
        match expected_len {
            None => expected_len = Some(sentences.len()),
            Some(n) if n != sentences.len() => {
                return Err(Error::Validation(format!(
                    "parallel set misaligned: {lang} has {} sentences, expected {n}",
                    sentences.len()
                )));
            }
            _ => {}
        }
        let mut counts: Vec<u64> = sentences
            .iter()
            .map(|s| vocab.tokenize(s).len() as u64)
            .collect();
        counts.sort_unstable();
        let total: u64 = counts.iter().sum();
        per_language.insert(
            lang.clone(),
            LangEquity {
                sentences: sentences.len(),
                token_count: total,
                mean_tokens: if counts.is_empty() {
                    0.0
                } else {
                    total as f64 / counts.len() as f64
                },
                quartiles: (
                    quantile(&counts, 0.25),
                    quantile(&counts, 0.5),
                    quantile(&counts, 0.75),
                ),
            },
        );
    }
    let focus_means: Vec<f64> = per_language
        .iter()
        .filter(|(lang, _)| focus.is_empty() || focus.contains(*lang))
        .map(|(_, e)| e.mean_tokens)
        .filter(|m| *m > 0.0)
        .collect();
    let dispersion = match (
        focus_means.iter().cloned().fold(f64::INFINITY, f64::min),
        focus_means.iter().cloned().fold(0.0, f64::max),
    ) {
        (min, max) if min.is_finite() && min > 0.0 => max / min,
        _ => 1.0,
    };
    Ok(EquityReport {
        per_language,
        dispersion,
    })
}

#[derive(Debug, Clone)]
pub struct RebalanceConfig {
    pub vocab_size: usize,
    pub coverage: f64,
    /// Dispersion at or below this counts as converged.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Exponent on the per-language fertility correction.
    pub gamma: f64,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        RebalanceConfig {
            vocab_size: 4096,
            coverage: 0.99995,
            tolerance: 1.10,
            max_iters: 10,
            gamma: 1.0,
        }
    }
}

#[derive(Debug)]
pub struct RebalanceOutcome {
    pub budgets: BTreeMap<String, u64>,
    pub trace: Vec<EquityReport>,
    pub converged: bool,
    pub iterations: usize,
    pub vocab: BpeVocab,
}

/// Iteratively retrains the vocabulary, measuring equity each round and
/// shifting focus-language byte budgets toward languages that tokenize into
/// more tokens. Non-focus budgets stay fixed; the focus byte total is
/// conserved up to rounding.
pub fn rebalance_loop(
    samples: &BTreeMap<String, String>,
    initial: &BTreeMap<String, u64>,
    parallel: &BTreeMap<String, Vec<String>>,
    focus: &BTreeSet<String>,
    config: &RebalanceConfig,
) -> Result<RebalanceOutcome> {
    if config.tolerance < 1.0 {
        return Err(Error::Config("tolerance must be >= 1.0".into()));
    }
    if config.max_iters < 1 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    let bpe = BpeConfig {
        vocab_size: config.vocab_size,
        coverage: config.coverage,
    };
    let focus_langs: Vec<String> = initial
        .keys()
        .filter(|l| focus.is_empty() || focus.contains(*l))
        .cloned()
        .collect();
    let focus_total: f64 = focus_langs
        .iter()
        .map(|l| initial[l] as f64)
        .sum();

    let mut budgets_f: BTreeMap<String, f64> =
        initial.iter().map(|(l, b)| (l.clone(), *b as f64)).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let round = |m: &BTreeMap<String, f64>| -> BTreeMap<String, u64> {
        m.iter().map(|(l, b)| (l.clone(), b.round() as u64)).collect()
    };

    let mut vocab = None;
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        iterations += 1;
        let current = round(&budgets_f);
        let v = BpeVocab::train(samples, &current, &bpe)?;
        let report = measure_equity(&v, parallel, focus)?;
        let dispersion = report.dispersion;
        trace.push(report);
        vocab = Some(v);
        if dispersion <= config.tolerance {
            converged = true;
            break;
        }
        // Fertility-proportional update: verbose languages get more bytes.
        let report = trace.last().unwrap();
        let means: BTreeMap<&String, f64> = focus_langs
            .iter()
            .filter_map(|l| report.per_language.get(l).map(|e| (l, e.mean_tokens)))
            .collect();
        if means.is_empty() {
            break;
        }
        let focus_mean: f64 = means.values().sum::<f64>() / means.len() as f64;
        if focus_mean <= 0.0 {
            break;
        }
        for (lang, mean) in &means {
            if let Some(b) = budgets_f.get_mut(*lang) {
                *b *= (mean / focus_mean).powf(config.gamma);
            }
        }
        let new_total: f64 = focus_langs.iter().map(|l| budgets_f[l]).sum();
        if new_total > 0.0 {
            let scale = focus_total / new_total;
            for lang in &focus_langs {
                let available = samples.get(lang).map(|s| s.len() as f64).unwrap_or(0.0);
                let b = budgets_f.get_mut(lang).unwrap();
                *b = (*b * scale).min(available);
            }
        }
    }
    Ok(RebalanceOutcome {
        budgets: round(&budgets_f),
        trace,
        converged,
        iterations,
        vocab: vocab.expect("at least one iteration ran"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn train_on(corpus: &str, vocab_size: usize) -> BpeVocab {
        BpeVocab::train_corpus(
            corpus,
            &BpeConfig {
                vocab_size,
                coverage: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn forced_single_merge() {
        let vocab = train_on("ababab", 256 + 2 + 1);
        assert_eq!(vocab.merges(), &[("a".to_string(), "b".to_string())]);
        assert_eq!(vocab.tokenize("ababab").len(), 3);
    }

    #[test]
    fn digits_are_single_tokens() {
        let vocab = train_on("2024 2024 2024 and text", 600);
        let ids = vocab.tokenize("2024");
        assert_eq!(ids.len(), 4);
        // No merge ever involves a digit.
        for (l, r) in vocab.merges() {
            assert!(!l.chars().any(|c| c.is_numeric()));
            assert!(!r.chars().any(|c| c.is_numeric()));
        }
    }

    #[test]
    fn no_merge_crosses_scripts_or_spaces() {
        let corpus = "abcжуж abcжуж abcжуж abcжуж";
        let vocab = train_on(corpus, 600);
        for (l, r) in vocab.merges() {
            let joined = format!("{l}{r}");
            assert!(!joined.contains(' '));
            let classes: BTreeSet<String> = joined
                .chars()
                .map(|c| format!("{:?}", script_class(c)))
                .filter(|s| s != "Common")
                .collect();
            assert!(classes.len() <= 1, "cross-script token {joined:?}");
        }
        // The mixed word splits at the script change.
        let pre = pretokens("abcжуж");
        assert_eq!(pre, vec!["abc", "жуж"]);
    }

    #[test]
    fn empty_string_is_empty_sequence() {
        let vocab = train_on("some text", 300);
        assert!(vocab.tokenize("").is_empty());
    }

    #[test]
    fn unseen_script_round_trips_via_bytes() {
        let vocab = train_on("only latin text here", 300);
        let exotic = "日本語テキスト";
        let ids = vocab.tokenize(exotic);
        assert_eq!(vocab.decode(&ids).unwrap(), exotic);
        // All fallback tokens are byte tokens.
        assert!(ids.iter().all(|&id| id < 256));
    }

    #[test]
    fn merges_compress_training_corpus() {
        let corpus = "the quick brown fox jumps over the lazy dog ".repeat(20);
        let vocab = train_on(&corpus, 256 + 40 + 30);
        let tokens = vocab.tokenize(&corpus).len();
        let chars = corpus.chars().count();
        assert!(tokens < chars);
    }

    #[test]
    fn train_determinism() {
        let mut samples = BTreeMap::new();
        samples.insert("aa".to_string(), "hello world hello world again".repeat(10));
        samples.insert("bb".to_string(), "labdien pasaule labdien atkal".repeat(10));
        let mut budget = BTreeMap::new();
        budget.insert("aa".to_string(), 100u64);
        budget.insert("bb".to_string(), 100u64);
        let cfg = BpeConfig {
            vocab_size: 400,
            coverage: 1.0,
        };
        let a = BpeVocab::train(&samples, &budget, &cfg).unwrap();
        let b = BpeVocab::train(&samples, &budget, &cfg).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.alphabet, b.alphabet);
    }

    #[test]
    fn insufficient_budget_errors() {
        let mut samples = BTreeMap::new();
        samples.insert("aa".to_string(), "short".to_string());
        let mut budget = BTreeMap::new();
        budget.insert("aa".to_string(), 1000u64);
        let err = BpeVocab::train(&samples, &budget, &BpeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientBytes { .. }));
    }

    #[test]
    fn coverage_excludes_rare_chars() {
        // 'ß' appears once in 100k characters: outside 0.9999 coverage.
        let mut corpus = "common text ".repeat(9000);
        corpus.push('ß');
        let vocab = BpeVocab::train_corpus(
            &corpus,
            &BpeConfig {
                vocab_size: 400,
                coverage: 0.9999,
            },
        )
        .unwrap();
        assert!(!vocab.alphabet.contains(&'ß'));
        let ids = vocab.tokenize("ß");
        assert_eq!(ids.len(), 2); // two UTF-8 bytes
        assert_eq!(vocab.decode(&ids).unwrap(), "ß");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let corpus = "tokenize this text with spaces\nand newlines ".repeat(5);
        let vocab = train_on(&corpus, 330);
        vocab.save(&path).unwrap();
        let loaded = BpeVocab::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        let sample = "tokenize newlines\nplease";
        assert_eq!(vocab.tokenize(sample), loaded.tokenize(sample));
    }

    #[test]
    fn equity_on_identical_languages_is_one() {
        let vocab = train_on("shared training text for both", 300);
        let sentences = vec!["one sentence".to_string(), "another one".to_string()];
        let mut parallel = BTreeMap::new();
        parallel.insert("aa".to_string(), sentences.clone());
        parallel.insert("bb".to_string(), sentences);
        let report = measure_equity(&vocab, &parallel, &BTreeSet::new()).unwrap();
        assert_eq!(report.dispersion, 1.0);
    }

    #[test]
    fn equity_misaligned_lists_error() {
        let vocab = train_on("text", 280);
        let mut parallel = BTreeMap::new();
        parallel.insert("aa".to_string(), vec!["one".to_string()]);
        parallel.insert("bb".to_string(), vec!["one".to_string(), "two".to_string()]);
        assert!(measure_equity(&vocab, &parallel, &BTreeSet::new()).is_err());
    }

    #[test]
    fn equity_mean_invariant_under_sentence_permutation() {
        let vocab = train_on("permutation invariance test corpus", 300);
        let sents = vec![
            "alpha beta".to_string(),
            "gamma delta epsilon".to_string(),
            "zeta".to_string(),
        ];
        let mut forward = BTreeMap::new();
        forward.insert("aa".to_string(), sents.clone());
        let mut reversed = BTreeMap::new();
        reversed.insert("aa".to_string(), sents.iter().rev().cloned().collect());
        let a = measure_equity(&vocab, &forward, &BTreeSet::new()).unwrap();
        let b = measure_equity(&vocab, &reversed, &BTreeSet::new()).unwrap();
        assert_eq!(
            a.per_language["aa"].mean_tokens,
            b.per_language["aa"].mean_tokens
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_arbitrary_unicode(s in "\\PC{0,60}") {
            let vocab = train_on("a small training corpus with words", 300);
            let ids = vocab.tokenize(&s);
            prop_assert_eq!(vocab.decode(&ids).unwrap(), s);
        }
    }
}
