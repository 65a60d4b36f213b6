//! Engine for open-domain multi-answer question answering.
//!
//! Two pipelines are implemented over pluggable model backends: a
//! recall-then-verify pipeline (per-passage answer recall, per-candidate
//! evidence aggregation, independent verification against a threshold) and a
//! rerank-then-read baseline (oracle passage reranking followed by a single
//! reading pass). The crate ships exact brute-force dense retrieval, the
//! evaluation metrics for multi-answer QA, ablation attack harnesses, an
//! inference cost model, synthetic corpus generation, and an HTTP client plus
//! stub server for model services.

pub mod analysis;
pub mod backend;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod service;
pub mod stub;
pub mod synth;
pub mod types;

pub use error::{MaqaError, Result};
