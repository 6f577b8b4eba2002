//! Two-stage neural-style reranking toolkit at desk scale: BM25 retrieval, a
//! distilled pointwise student, sliding-window listwise reranking through a
//! chat backend, synthetic ranking data and TREC-style evaluation.
//!
//! Data-parallel work goes through [`parallel::Execution`]; building without
//! the `parallel` feature runs everything sequentially with identical results.

pub mod corpus;
pub mod distiller;
pub mod error;
pub mod http;
pub mod listwise;
pub mod losses;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod scorers;
pub mod synthetic;
pub mod synthgen;
pub mod trec;

pub use corpus::{Corpus, Document, Query};
pub use error::{Error, Result};
pub use parallel::Execution;
pub use trec::{Qrels, RunList};
