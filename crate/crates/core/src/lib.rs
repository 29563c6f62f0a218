//! Cross-lingual late-interaction retrieval with a query encoder distilled
//! from a monolingual teacher through optimal transport.
//!
//! Module map:
//!
//! - [`data`]: corpus, query, bitext, triple and passage file formats
//! - [`ot`]: cost matrices, the IPOT solver and an exact assignment oracle
//! - [`text`]: vocabulary, tokenizer, query/document preparation
//! - [`encoder`]: per-token encoder with an analytic backward pass
//! - [`distill`]: transport-cost distillation of a student query encoder
//! - [`late_interaction`]: maxsim scoring, teacher training, reranking
//! - [`lexical`]: BM25 first-stage retrieval
//! - [`eval`]: MAP / P@10 / Recall@100 and the paired t-test
//! - [`synth`], [`pipeline`]: synthetic bundles and the end-to-end commands

pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod late_interaction;
pub mod lexical;
pub mod ot;
pub mod pipeline;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
