//! Auditing LLM query expansion for knowledge leakage in fact verification:
//! retrieval with and without generated pseudo-documents, entailment-based
//! detection of leaked gold evidence, and stratified reporting.

pub mod analysis;
pub mod config;
pub mod dense;
pub mod error;
pub mod expansion;
pub mod lexical;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod providers;
pub mod ranking;
pub mod text;
pub mod verdict;

pub use error::{DataError, Error, ProviderError};
