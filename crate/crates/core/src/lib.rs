//! Visual in-context learning engine.
//!
//! Retrieves demonstration images for a query, reranks them against a
//! caption of the query, replaces them with intent-oriented summaries,
//! composes task prompts and scores the answers. All model calls go through
//! [`client::InferenceClient`], which has a deterministic mock and an HTTP
//! implementation. [`flow`] computes attention-saliency flow scores from
//! exported traces.

pub mod client;
pub mod composer;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod flow;
pub mod par;
pub mod retrieval;
pub mod rng;
pub mod store;
pub mod summarizer;
pub mod synthetic;
pub mod types;

pub use error::{Error, ErrorKind, Result};
