//! Document data model, language registry, and streaming JSONL corpus I/O.
//!
//! Every pipeline stage consumes and produces [`Document`] values. The wire
//! format is JSON Lines with keys `id` (optional), `url` (optional), `lang`,
//! `source`, `text` and `token_count` (optional), UTF-8 with LF line endings.
//!
//! This module also owns the word definition used by all statistics: a word
//! is a maximal run of non-whitespace after removing punctuation and digit
//! characters; empty residues are not words.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language category used by the registry and the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LangCategory {
    Focus,
    Other,
    Code,
    Math,
    Parallel,
}

/// A registered language: lowercase ISO-639-style code plus its category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTag {
    pub code: String,
    pub category: LangCategory,
}

impl LanguageTag {
    pub fn new(code: impl Into<String>, category: LangCategory) -> Self {
        LanguageTag {
            code: code.into().to_lowercase(),
            category,
        }
    }
}

/// Registry of known languages. Codes are unique and stored lowercase.
#[derive(Debug, Clone, Default)]
pub struct LanguageRegistry {
    tags: BTreeMap<String, LangCategory>,
}

impl LanguageRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tag: LanguageTag) -> Result<()> {
        if tag.code.is_empty() {
            return Err(Error::Validation("language code must be non-empty".into()));
        }
        if self.tags.contains_key(&tag.code) {
            return Err(Error::Validation(format!(
                "language {} registered twice",
                tag.code
            )));
        }
        self.tags.insert(tag.code, tag.category);
        Ok(())
    }

    pub fn category(&self, code: &str) -> Option<LangCategory> {
        self.tags.get(code).copied()
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.tags.keys().map(|s| s.as_str())
    }

    /// Codes of all focus languages, in sorted order.
    pub fn focus_codes(&self) -> Vec<String> {
        self.tags
            .iter()
            .filter(|(_, c)| **c == LangCategory::Focus)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// One document: the unit every pipeline stage operates on.
///
/// Documents are immutable values; stages produce new documents rather than
/// mutating shared state, so they are safe to hand between workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub lang: String,
    pub source: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<u64>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        lang: impl Into<String>,
        source: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Document {
            id: id.into(),
            url: None,
            lang: lang.into(),
            source: source.into(),
            text: text.into(),
            token_count: None,
        }
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.url = Some(url.into());
        self
    }
}

/// A paragraph of a document: ordered lines plus position metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub parent_id: String,
    pub index: usize,
    pub lines: Vec<String>,
}

/// Splits text into paragraph blocks on runs of two or more newlines.
/// Single newlines delimit lines within a paragraph. Blocks that are empty
/// after splitting are dropped.
pub fn paragraph_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut start = 0usize;
    let bytes = text.as_bytes();
    let mut i = 0usize;
    while i < bytes.len() {
        if bytes[i] == b'\n' && i + 1 < bytes.len() && bytes[i + 1] == b'\n' {
            if start < i {
                blocks.push(&text[start..i]);
            }
            while i < bytes.len() && bytes[i] == b'\n' {
                i += 1;
            }
            start = i;
        } else {
            i += 1;
        }
    }
    if start < bytes.len() {
        let tail = text[start..].trim_end_matches('\n');
        if !tail.is_empty() {
            blocks.push(tail);
        }
    }
    blocks
}

/// Splits a document into [`Paragraph`]s.
pub fn split_paragraphs(doc: &Document) -> Vec<Paragraph> {
    paragraph_blocks(&doc.text)
        .into_iter()
        .enumerate()
        .map(|(index, block)| Paragraph {
            parent_id: doc.id.clone(),
            index,
            lines: block.split('\n').map(|s| s.to_string()).collect(),
        })
        .collect()
}

/// Reassembles paragraphs (assumed sorted by index) into text, joining lines
/// with a single newline and paragraphs with the two-newline delimiter.
pub fn join_paragraphs(paragraphs: &[Paragraph]) -> String {
    paragraphs
        .iter()
        .map(|p| p.lines.join("\n"))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Fixed punctuation table used everywhere a "punctuation character" is
/// counted or stripped: ASCII punctuation and symbols, the Latin-1
/// punctuation marks, and the Unicode general-punctuation block.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}'
                | '\u{00BF}'
        )
        || ('\u{2010}'..='\u{2027}').contains(&c)
        || ('\u{2030}'..='\u{205E}').contains(&c)
}

/// The word definition shared by all statistics and filters: punctuation and
/// digit characters are removed first, then maximal runs of non-whitespace
/// are words. Empty residues are not words.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if !is_punctuation(c) && !c.is_numeric() {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Per-language aggregate counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LangStats {
    pub doc_count: u64,
    pub token_count: u64,
    pub byte_count: u64,
    pub word_count: u64,
    pub word_char_count: u64,
    pub avg_word_length: f64,
}

impl LangStats {
    fn recompute(&mut self) {
        self.avg_word_length = if self.word_count > 0 {
            self.word_char_count as f64 / self.word_count as f64
        } else {
            0.0
        };
    }
}

/// Corpus statistics keyed by language code. Merging partial stats and
/// computing them in one pass yield identical results; averages are derived
/// from totals so the aggregation is order-independent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_language: BTreeMap<String, LangStats>,
}

impl CorpusStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_doc(&mut self, doc: &Document) {
        let entry = self.per_language.entry(doc.lang.clone()).or_default();
        entry.doc_count += 1;
        entry.token_count += doc.token_count.unwrap_or(0);
        entry.byte_count += doc.text.len() as u64;
        for w in words(&doc.text) {
            entry.word_count += 1;
            entry.word_char_count += w.chars().count() as u64;
        }
        entry.recompute();
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        for (lang, stats) in &other.per_language {
            let entry = self.per_language.entry(lang.clone()).or_default();
            entry.doc_count += stats.doc_count;
            entry.token_count += stats.token_count;
            entry.byte_count += stats.byte_count;
            entry.word_count += stats.word_count;
            entry.word_char_count += stats.word_char_count;
            entry.recompute();
        }
    }

    pub fn avg_word_length(&self, lang: &str) -> Option<f64> {
        self.per_language
            .get(lang)
            .filter(|s| s.word_count > 0)
            .map(|s| s.avg_word_length)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.per_language)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let per_language = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Ok(CorpusStats { per_language })
    }
}

/// Computes [`CorpusStats`] over a document stream.
pub fn compute_stats<'a>(docs: impl IntoIterator<Item = &'a Document>) -> CorpusStats {
    let mut stats = CorpusStats::new();
    for doc in docs {
        stats.add_doc(doc);
    }
    stats
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    lang: Option<String>,
    source: String,
    text: Option<String>,
    #[serde(default)]
    token_count: Option<u64>,
}

/// Streaming JSONL corpus reader.
///
/// Yields documents in file order. Malformed records are yielded as errors
/// carrying their line number so callers can report them; iteration
/// continues with the next line. Records without an `id` get a stable one
/// assigned from the source name and the file ordinal.
pub struct CorpusReader {
    path: PathBuf,
    reader: BufReader<File>,
    line: usize,
    default_lang: Option<String>,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(CorpusReader {
            path,
            reader: BufReader::new(file),
            line: 0,
            default_lang: None,
        })
    }

    /// Language filled into records that carry no `lang` key themselves.
    pub fn with_default_lang(mut self, lang: impl Into<String>) -> Self {
        self.default_lang = Some(lang.into());
        self
    }

    fn parse(&self, raw: &[u8]) -> std::result::Result<Document, String> {
        let line = std::str::from_utf8(raw).map_err(|_| "malformed UTF-8".to_string())?;
        let record: RawRecord =
            serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
        let text = record.text.ok_or("missing \"text\" field")?;
        let lang = record
            .lang
            .or_else(|| self.default_lang.clone())
            .ok_or("missing \"lang\" field")?;
        let id = record
            .id
            .unwrap_or_else(|| format!("{}-{}", record.source, self.line));
        Ok(Document {
            id,
            url: record.url,
            lang,
            source: record.source,
            text,
            token_count: record.token_count,
        })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match self.reader.read_until(b'\n', &mut buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
            self.line += 1;
            if buf.last() == Some(&b'\n') {
                buf.pop();
            }
            if buf.last() == Some(&b'\r') {
                buf.pop();
            }
            if buf.is_empty() {
                continue;
            }
            return Some(self.parse(&buf).map_err(|msg| Error::Record {
                path: self.path.clone(),
                line: self.line,
                msg,
            }));
        }
    }
}

/// Reads a whole corpus into memory, collecting record errors separately.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<(Vec<Document>, Vec<Error>)> {
    let reader = CorpusReader::open(path)?;
    let mut docs = Vec::new();
    let mut errors = Vec::new();
    for item in reader {
        match item {
            Ok(doc) => docs.push(doc),
            Err(e @ Error::Record { .. }) => errors.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((docs, errors))
}

/// Writes documents as JSONL. Returns the number of records written.
/// Round-trips losslessly with [`CorpusReader`] for all fields.
pub fn write_corpus<'a>(
    docs: impl IntoIterator<Item = &'a Document>,
    path: impl AsRef<Path>,
) -> Result<u64> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut count = 0u64;
    for doc in docs {
        serde_json::to_writer(&mut w, doc).map_err(|e| {
            Error::Validation(format!("{}: record {count}: {e}", path.display()))
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        count += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn words_strip_punctuation_and_digits() {
        assert_eq!(words("Hello, world!"), vec!["Hello", "world"]);
        assert_eq!(words("a1b 2c3"), vec!["ab", "c"]);
        assert_eq!(words("--- 123 ..."), Vec::<String>::new());
    }

    #[test]
    fn avg_word_length_direct() {
        let doc = Document::new("d1", "xx", "test", "aa bb");
        let stats = compute_stats([&doc]);
        assert_eq!(stats.avg_word_length("xx"), Some(2.0));

        let doc = Document::new("d2", "xx", "test", "aaaa bb");
        let stats = compute_stats([&doc]);
        assert_eq!(stats.avg_word_length("xx"), Some(3.0));
    }

    #[test]
    fn stats_partition_by_language() {
        let a = Document::new("a", "aa", "test", "one two");
        let b = Document::new("b", "bb", "test", "three");
        let stats = compute_stats([&a, &b]);
        assert_eq!(stats.per_language.len(), 2);
        assert_eq!(stats.per_language["aa"].doc_count, 1);
        assert_eq!(stats.per_language["bb"].word_count, 1);
    }

    #[test]
    fn paragraph_roundtrip() {
        let doc = Document::new("p", "xx", "test", "line a\nline b\n\npara two\n\n\npara three");
        let paras = split_paragraphs(&doc);
        assert_eq!(paras.len(), 3);
        assert_eq!(paras[0].lines, vec!["line a", "line b"]);
        assert_eq!(
            join_paragraphs(&paras),
            "line a\nline b\n\npara two\n\npara three"
        );
    }

    #[test]
    fn reader_reports_bad_records_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"lang\":\"lv\",\"source\":\"s\",\"text\":\"labdien\"}\n",
                "{\"lang\":\"lv\",\"source\":\"s\"}\n",
                "{\"id\":\"x\",\"lang\":\"lv\",\"source\":\"s\",\"text\":\"sveiki\"}\n"
            ),
        )
        .unwrap();
        let (docs, errors) = read_corpus(&path).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "s-1");
        assert_eq!(docs[1].id, "x");
        assert_eq!(errors.len(), 1);
        assert!(errors[0].to_string().contains(":2:"));
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let (docs, errors) = read_corpus(&path).unwrap();
        assert!(docs.is_empty());
        assert!(errors.is_empty());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(CorpusReader::open("/nonexistent/corpus.jsonl").is_err());
    }

    #[test]
    fn registry_rejects_duplicates() {
        let mut reg = LanguageRegistry::new();
        reg.register(LanguageTag::new("lv", LangCategory::Focus)).unwrap();
        assert!(reg
            .register(LanguageTag::new("LV", LangCategory::Other))
            .is_err());
        assert_eq!(reg.category("lv"), Some(LangCategory::Focus));
    }

    proptest! {
        #[test]
        fn write_read_roundtrip(texts in proptest::collection::vec(".*", 0..8)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            let docs: Vec<Document> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut d = Document::new(format!("d{i}"), "xx", "prop", t.clone());
                    if i % 2 == 0 {
                        d = d.with_url(format!("https://example.com/{i}"));
                    }
                    d.token_count = Some(i as u64);
                    d
                })
                .collect();
            let written = write_corpus(docs.iter(), &path).unwrap();
            prop_assert_eq!(written as usize, docs.len());
            let (back, errors) = read_corpus(&path).unwrap();
            prop_assert!(errors.is_empty());
            prop_assert_eq!(back, docs);
        }

        #[test]
        fn stats_order_independent(texts in proptest::collection::vec("[a-z ]{0,30}", 1..6)) {
            let docs: Vec<Document> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), "xx", "prop", t.clone()))
                .collect();
            let forward = compute_stats(docs.iter());
            let reversed = compute_stats(docs.iter().rev());
            prop_assert_eq!(forward, reversed);
        }
    }
}
