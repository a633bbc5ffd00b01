//! Multilingual corpus curation pipeline and evaluation toolkit.
//!
//! The crate covers the data machinery around multilingual LLM pre-training
//! at desk scale: URL filtering, two-step deduplication, heuristic quality
//! filters, PII anonymization, LDA topic filtering, curriculum-based
//! language sampling, byte-pair tokenizer training with an equity
//! rebalancing loop, parallel-document synthesis, and the evaluation math
//! (per-character perplexity, Borda aggregation, ChrF++, word edit
//! distance, memorization auditing).
//!
//! Modules mirror the pipeline stages; [`pipeline`] wires them together
//! behind a TOML config, and the `weft` binary exposes each stage as a
//! subcommand.

pub mod bpe;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod metrics;
pub mod parallel;
pub mod pii;
pub mod pipeline;
pub mod quality;
pub mod sampler;
pub mod topic;
pub mod urlfilter;

pub use error::{Error, Result};
