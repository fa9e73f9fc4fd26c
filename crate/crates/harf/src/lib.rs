//! # harf
//!
//! A research toolkit for machine transliteration between Urdu script and
//! Roman Urdu, built around a leakage-free corpus-splitting methodology,
//! character-level tokenization with language conditioning, masked-language-model
//! pretraining with selective layer freezing, two-phase supervised fine-tuning
//! of a compact encoder–decoder transformer, and character-level evaluation
//! (BLEU-4, Char-BLEU, CHRF).
//!
//! The library is organized along the pipeline:
//!
//! - [`corpus`] — ingest, normalize, and group parallel data; synthetic corpora
//!   with controlled spelling-variation structure.
//! - [`splitter`] — variation-aware train/validation/test splits with an
//!   auditable integrity report.
//! - [`tokenizer`] — character-level vocabulary with special and per-language
//!   conditioning tokens.
//! - [`model`] — a small encoder–decoder transformer with per-parameter freeze
//!   masks, portable checkpoints, and greedy/beam decoding.
//! - [`mlm`] — masked-token pretraining over monolingual text.
//! - [`finetune`] — two-phase supervised fine-tuning with warmup/decay
//!   scheduling and gradient accumulation.
//! - [`metrics`] — corpus BLEU, character-level BLEU, and CHRF.
//! - [`llm`] — a zero-shot chat-completion baseline with an offline mock
//!   transport.
//! - [`report`] — score-table rendering (Markdown and CSV).

pub mod corpus;
pub mod finetune;
pub mod llm;
pub mod metrics;
pub mod mlm;
pub mod model;
pub mod report;
pub mod splitter;
pub mod tensor;
pub mod tokenizer;

pub use corpus::{Origin, ParallelGroup, SentencePair, SynthConfig};
pub use splitter::{AuditReport, CorpusSplit, SplitConfig, SubsetTag};
pub use tokenizer::{EncodedSequence, LangTag, Vocabulary};
