//! Topic-based content filtering: clusters documents with Latent Dirichlet
//! Allocation (collapsed Gibbs sampling) and removes documents whose
//! dominant topic matches a keyword flag list.
//!
//! Training is single-threaded and fully determined by (corpus order, seed).
//! Model files are binary with a versioned header plus a JSON sidecar
//! listing the top words per topic.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{words, Document};
use crate::dedup::fnv1a_64;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LdaParams {
    pub topics: usize,
    /// Symmetric document-topic prior; defaults to 50/K.
    pub alpha: Option<f64>,
    /// Symmetric topic-word prior.
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Words in fewer documents are pruned.
    pub min_df: usize,
    /// Words in more than this fraction of documents are pruned.
    pub max_df_frac: f64,
    /// Gibbs sweeps when folding in a held-out document.
    pub fold_in_sweeps: usize,
}

impl Default for LdaParams {
    fn default() -> Self {
        LdaParams {
            topics: 20,
            alpha: None,
            beta: 0.01,
            iterations: 200,
            seed: 0,
            min_df: 5,
            max_df_frac: 0.5,
            fold_in_sweeps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    vocab_index: HashMap<String, usize>,
    /// K x V counts of tokens assigned to (topic, word).
    topic_word: Vec<Vec<u32>>,
    topic_totals: Vec<u64>,
    pub fold_in_sweeps: usize,
}

fn doc_tokens(text: &str) -> Vec<String> {
    words(text).into_iter().map(|w| w.to_lowercase()).collect()
}

impl LdaModel {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn total_assigned(&self) -> u64 {
        self.topic_totals.iter().sum()
    }

    /// The smoothed word distribution of one topic; sums to 1.
    pub fn topic_distribution(&self, topic: usize) -> Vec<f64> {
        let v = self.vocab_size() as f64;
        let denom = self.topic_totals[topic] as f64 + v * self.beta;
        self.topic_word[topic]
            .iter()
            .map(|&c| (c as f64 + self.beta) / denom)
            .collect()
    }

    /// Top `m` words of a topic by count, ties broken by word order.
    pub fn top_words(&self, topic: usize, m: usize) -> Vec<(String, u32)> {
        let mut ranked: Vec<(usize, u32)> = self.topic_word[topic]
            .iter()
            .copied()
            .enumerate()
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
            .into_iter()
            .take(m)
            .map(|(i, c)| (self.vocabulary[i].clone(), c))
            .collect()
    }

    fn token_ids(&self, text: &str) -> Vec<usize> {
        doc_tokens(text)
            .iter()
            .filter_map(|t| self.vocab_index.get(t).copied())
            .collect()
    }

    /// Dominant topic of a document after folding it in with a fixed number
    /// of Gibbs sweeps against the frozen model counts. Deterministic per
    /// document; ties break toward the lowest topic index. `None` when the
    /// document has no in-vocabulary words.
    pub fn dominant_topic(&self, doc: &Document) -> Option<(usize, f64)> {
        let ids = self.token_ids(&doc.text);
        if ids.is_empty() {
            return None;
        }
        let mut key = doc.id.as_bytes().to_vec();
        key.push(0);
        key.extend_from_slice(doc.text.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a_64(&key));

        let k = self.topics;
        let v = self.vocab_size() as f64;
        let mut assignment: Vec<usize> = (0..ids.len()).map(|_| rng.random_range(0..k)).collect();
        let mut doc_topic = vec![0u32; k];
        for &z in &assignment {
            doc_topic[z] += 1;
        }
        let mut weights = vec![0.0f64; k];
        for _ in 0..self.fold_in_sweeps {
            for (i, &w) in ids.iter().enumerate() {
                let old = assignment[i];
                doc_topic[old] -= 1;
                for (t, weight) in weights.iter_mut().enumerate() {
                    let phi = (self.topic_word[t][w] as f64 + self.beta)
                        / (self.topic_totals[t] as f64 + v * self.beta);
                    *weight = (doc_topic[t] as f64 + self.alpha) * phi;
                }
                let new = sample_index(&weights, &mut rng);
                assignment[i] = new;
                doc_topic[new] += 1;
            }
        }
        let n = ids.len() as f64;
        let theta: Vec<f64> = doc_topic
            .iter()
            .map(|&c| (c as f64 + self.alpha) / (n + k as f64 * self.alpha))
            .collect();
        let mut best = 0usize;
        for (t, &p) in theta.iter().enumerate() {
            if p > theta[best] {
                best = t;
            }
        }
        Some((best, theta[best]))
    }

    /// Binary model file plus a `.topics.json` sidecar with the top 30 words
    /// per topic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"WLDA");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.topics as u32).to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size() as u32).to_le_bytes());
        buf.extend_from_slice(&self.alpha.to_le_bytes());
        buf.extend_from_slice(&self.beta.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.fold_in_sweeps as u32).to_le_bytes());
        for word in &self.vocabulary {
            buf.extend_from_slice(&(word.len() as u32).to_le_bytes());
            buf.extend_from_slice(word.as_bytes());
        }
        for row in &self.topic_word {
            for &c in row {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        for &t in &self.topic_totals {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;

        #[derive(Serialize)]
        struct TopicSidecar {
            topic: usize,
            top_words: Vec<(String, u32)>,
        }
        let sidecar: Vec<TopicSidecar> = (0..self.topics)
            .map(|t| TopicSidecar {
                topic: t,
                top_words: self.top_words(t, 30),
            })
            .collect();
        let sidecar_path = path.with_extension("topics.json");
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::Validation(format!("{}: corrupt model file", path.display()));

        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize, bad: impl Fn() -> Error) -> Result<&'a [u8]> {
                let slice = self.bytes.get(self.pos..self.pos + n).ok_or_else(bad)?;
                self.pos += n;
                Ok(slice)
            }
        }
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let mut take = |n: usize| cursor.take(n, bad);
        if take(4)? != b"WLDA" {
            return Err(Error::Validation(format!(
                "{}: not a model file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Validation(format!(
                "{}: unsupported model version {version}",
                path.display()
            )));
        }
        let topics = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let vocab_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let alpha = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let beta = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let fold_in_sweeps = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut vocabulary = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let word = std::str::from_utf8(take(len)?).map_err(|_| bad())?.to_string();
            vocabulary.push(word);
        }
        let mut topic_word = Vec::with_capacity(topics);
        for _ in 0..topics {
            let mut row = Vec::with_capacity(vocab_len);
            for _ in 0..vocab_len {
                row.push(u32::from_le_bytes(take(4)?.try_into().unwrap()));
            }
            topic_word.push(row);
        }
        let mut topic_totals = Vec::with_capacity(topics);
        for _ in 0..topics {
            topic_totals.push(u64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let vocab_index = vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(LdaModel {
            topics,
            alpha,
            beta,
            seed,
            vocabulary,
            vocab_index,
            topic_word,
            topic_totals,
            fold_in_sweeps,
        })
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Trains an LDA model with collapsed Gibbs sampling. Reproducible from
/// (corpus order, seed).
pub fn train_lda(docs: &[Document], params: &LdaParams) -> Result<LdaModel> {
    if docs.is_empty() {
        return Err(Error::Validation(
            "cannot train LDA on an empty corpus".into(),
        ));
    }
    let k = params.topics;
    if k < 2 {
        return Err(Error::Config("topic count must be >= 2".into()));
    }
    if k > docs.len() {
        log::warn!("{k} topics requested for only {} documents", docs.len());
    }
    let alpha = params.alpha.unwrap_or(50.0 / k as f64);

    // Vocabulary with document-frequency pruning.
    let mut df: HashMap<String, usize> = HashMap::new();
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| doc_tokens(&d.text)).collect();
    for tokens in &tokenized {
        let unique: BTreeSet<&String> = tokens.iter().collect();
        for t in unique {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    let max_df = ((params.max_df_frac * docs.len() as f64).floor() as usize).max(1);
    let mut vocabulary: Vec<String> = df
        .iter()
        .filter(|(_, &c)| c >= params.min_df && c <= max_df)
        .map(|(w, _)| w.clone())
        .collect();
    vocabulary.sort_unstable();
    if vocabulary.is_empty() {
        return Err(Error::Validation(
            "vocabulary is empty after document-frequency pruning".into(),
        ));
    }
    let vocab_index: HashMap<String, usize> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();

    let token_ids: Vec<Vec<usize>> = tokenized
        .iter()
        .map(|tokens| {
            tokens
                .iter()
                .filter_map(|t| vocab_index.get(t).copied())
                .collect()
        })
        .collect();

    let v = vocabulary.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut topic_word = vec![vec![0u32; v]; k];
    let mut topic_totals = vec![0u64; k];
    let mut doc_topic: Vec<Vec<u32>> = token_ids.iter().map(|_| vec![0u32; k]).collect();
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, ids) in token_ids.iter().enumerate() {
        let mut z = Vec::with_capacity(ids.len());
        for &w in ids {
            let t = rng.random_range(0..k);
            z.push(t);
            doc_topic[d][t] += 1;
            topic_word[t][w] += 1;
            topic_totals[t] += 1;
        }
        assignments.push(z);
    }

    let vb = v as f64 * params.beta;
    let mut weights = vec![0.0f64; k];
    for _ in 0..params.iterations {
        for (d, ids) in token_ids.iter().enumerate() {
            for (i, &w) in ids.iter().enumerate() {
                let old = assignments[d][i];
                doc_topic[d][old] -= 1;
                topic_word[old][w] -= 1;
                topic_totals[old] -= 1;
                for (t, weight) in weights.iter_mut().enumerate() {
                    *weight = (doc_topic[d][t] as f64 + alpha)
                        * (topic_word[t][w] as f64 + params.beta)
                        / (topic_totals[t] as f64 + vb);
                }
                let new = sample_index(&weights, &mut rng);
                assignments[d][i] = new;
                doc_topic[d][new] += 1;
                topic_word[new][w] += 1;
                topic_totals[new] += 1;
            }
        }
    }

    Ok(LdaModel {
        topics: k,
        alpha,
        beta: params.beta,
        seed: params.seed,
        vocabulary,
        vocab_index,
        topic_word,
        topic_totals,
        fold_in_sweeps: params.fold_in_sweeps,
    })
}

/// Keyword rule deciding which topics are flagged for removal.
#[derive(Debug, Clone)]
pub struct ClusterFlagRule {
    pub keywords: BTreeSet<String>,
    /// How many top topic words are scanned.
    pub top_m: usize,
    /// Minimum matching top words for a topic to be flagged.
    pub min_hits: usize,
}

impl Default for ClusterFlagRule {
    fn default() -> Self {
        ClusterFlagRule {
            keywords: BTreeSet::new(),
            top_m: 30,
            min_hits: 1,
        }
    }
}

impl ClusterFlagRule {
    pub fn from_keyword_file(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let keywords = content
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Ok(ClusterFlagRule {
            keywords,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_m < 1 || self.min_hits < 1 {
            return Err(Error::Config("top_m and min_hits must be >= 1".into()));
        }
        Ok(())
    }
}

/// Topics whose top words contain at least `min_hits` keyword matches
/// (lowercase substring match).
pub fn flagged_topics(model: &LdaModel, rule: &ClusterFlagRule) -> BTreeSet<usize> {
    let mut flagged = BTreeSet::new();
    if rule.keywords.is_empty() {
        return flagged;
    }
    for topic in 0..model.topics {
        let hits = model
            .top_words(topic, rule.top_m)
            .iter()
            .filter(|(word, count)| {
                *count > 0 && rule.keywords.iter().any(|k| word.contains(k.as_str()))
            })
            .count();
        if hits >= rule.min_hits {
            flagged.insert(topic);
        }
    }
    flagged
}

#[derive(Debug)]
pub struct TopicFilterOutcome {
    pub kept: Vec<Document>,
    pub removed: Vec<Document>,
    pub removed_fraction: f64,
    pub flagged: BTreeSet<usize>,
}

/// Removes documents whose dominant topic is flagged. Documents with no
/// in-vocabulary words are never removed. Kept and removed partition the
/// input.
pub fn flag_and_filter(
    docs: Vec<Document>,
    model: &LdaModel,
    rule: &ClusterFlagRule,
) -> Result<TopicFilterOutcome> {
    rule.validate()?;
    let flagged = flagged_topics(model, rule);
    let total = docs.len();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for doc in docs {
        let dominant = model.dominant_topic(&doc);
        match dominant {
            Some((topic, _)) if flagged.contains(&topic) => removed.push(doc),
            _ => kept.push(doc),
        }
    }
    let removed_fraction = if total > 0 {
        removed.len() as f64 / total as f64
    } else {
        0.0
    };
    Ok(TopicFilterOutcome {
        kept,
        removed,
        removed_fraction,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three disjoint planted vocabularies; each doc draws from one of them.
    fn planted_corpus(docs_per_topic: usize, words_per_doc: usize, seed: u64) -> Vec<Document> {
        let suffix = |i: u8| (b'a' + i) as char;
        let vocabs: [Vec<String>; 3] = [
            (0..20).map(|i| format!("apple{}", suffix(i))).collect(),
            (0..20).map(|i| format!("brick{}", suffix(i))).collect(),
            (0..20).map(|i| format!("cloud{}", suffix(i))).collect(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::new();
        for (topic, vocab) in vocabs.iter().enumerate() {
            for d in 0..docs_per_topic {
                let text: Vec<String> = (0..words_per_doc)
                    .map(|_| vocab[rng.random_range(0..vocab.len())].clone())
                    .collect();
                docs.push(Document::new(
                    format!("t{topic}-d{d}"),
                    "xx",
                    "planted",
                    text.join(" "),
                ));
            }
        }
        docs
    }

    fn quick_params() -> LdaParams {
        LdaParams {
            topics: 3,
            iterations: 60,
            seed: 7,
            min_df: 2,
            ..Default::default()
        }
    }

    #[test]
    fn planted_topics_recovered() {
        let docs = planted_corpus(40, 30, 11);
        let model = train_lda(&docs, &quick_params()).unwrap();
        // Each trained topic's top-10 words come from one planted vocabulary.
        for topic in 0..3 {
            let top = model.top_words(topic, 10);
            let prefixes: BTreeSet<&str> = top.iter().map(|(w, _)| &w[..5]).collect();
            assert_eq!(prefixes.len(), 1, "topic {topic} mixes vocabularies: {top:?}");
        }
    }

    #[test]
    fn token_count_conserved() {
        let docs = planted_corpus(20, 25, 3);
        let model = train_lda(&docs, &quick_params()).unwrap();
        let assigned = model.total_assigned();
        let expected: u64 = docs
            .iter()
            .map(|d| {
                doc_tokens(&d.text)
                    .iter()
                    .filter(|t| model.vocab_index.contains_key(*t))
                    .count() as u64
            })
            .sum();
        assert_eq!(assigned, expected);
        let per_word: u64 = model
            .topic_word
            .iter()
            .map(|row| row.iter().map(|&c| c as u64).sum::<u64>())
            .sum();
        assert_eq!(per_word, assigned);
    }

    #[test]
    fn topic_distributions_are_proper() {
        let docs = planted_corpus(15, 20, 5);
        let model = train_lda(&docs, &quick_params()).unwrap();
        for t in 0..model.topics {
            let sum: f64 = model.topic_distribution(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let docs = planted_corpus(10, 15, 2);
        let a = train_lda(&docs, &quick_params()).unwrap();
        let b = train_lda(&docs, &quick_params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_document_corpus_trains() {
        let docs = vec![Document::new(
            "d",
            "xx",
            "t",
            "word word other other more more word other more word",
        )];
        let params = LdaParams {
            topics: 2,
            iterations: 10,
            seed: 1,
            min_df: 1,
            max_df_frac: 1.0,
            ..Default::default()
        };
        let model = train_lda(&docs, &params).unwrap();
        assert!(model.total_assigned() > 0);
    }

    #[test]
    fn empty_document_has_no_topic() {
        let docs = planted_corpus(10, 15, 2);
        let model = train_lda(&docs, &quick_params()).unwrap();
        let empty = Document::new("e", "xx", "t", "");
        assert!(model.dominant_topic(&empty).is_none());
        let oov = Document::new("o", "xx", "t", "zzz yyy xxx");
        assert!(model.dominant_topic(&oov).is_none());
    }

    #[test]
    fn dominant_topic_matches_planted() {
        let docs = planted_corpus(40, 30, 11);
        let model = train_lda(&docs, &quick_params()).unwrap();
        let probe = Document::new("p", "xx", "t", docs[0].text.clone());
        let (topic, weight) = model.dominant_topic(&probe).unwrap();
        let top = model.top_words(topic, 5);
        assert!(top.iter().all(|(w, _)| w.starts_with("apple")));
        assert!(weight > 0.5);
    }

    #[test]
    fn keyword_filter_removes_planted_topic() {
        let docs = planted_corpus(40, 30, 11);
        let model = train_lda(&docs, &quick_params()).unwrap();
        let rule = ClusterFlagRule {
            keywords: ["brick".to_string()].into_iter().collect(),
            ..Default::default()
        };
        let total = docs.len();
        let outcome = flag_and_filter(docs, &model, &rule).unwrap();
        assert_eq!(outcome.kept.len() + outcome.removed.len(), total);
        // Removal is concentrated on the planted topic: about a third.
        assert!((outcome.removed_fraction - 1.0 / 3.0).abs() < 0.05);
        assert!(outcome.removed.iter().all(|d| d.id.starts_with("t1-")));
    }

    #[test]
    fn empty_keywords_remove_nothing() {
        let docs = planted_corpus(10, 15, 2);
        let model = train_lda(&docs, &quick_params()).unwrap();
        let outcome = flag_and_filter(docs, &model, &ClusterFlagRule::default()).unwrap();
        assert!(outcome.removed.is_empty());
        let rule = ClusterFlagRule {
            keywords: ["nomatchanywhere".to_string()].into_iter().collect(),
            ..Default::default()
        };
        let outcome = flag_and_filter(outcome.kept, &model, &rule).unwrap();
        assert!(outcome.removed.is_empty());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let docs = planted_corpus(10, 15, 2);
        let model = train_lda(&docs, &quick_params()).unwrap();
        model.save(&path).unwrap();
        let loaded = LdaModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        assert!(path.with_extension("topics.json").exists());
    }
}
