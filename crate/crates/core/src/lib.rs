//! Tooling for multi-hop question answering under knowledge edits.
//!
//! The crate turns MQuAKE-T-style benchmark files into single-hop (direct
//! answer) and multi-hop (decomposed, with intermediate QA history)
//! instruction datasets, checks them against a knowledge-graph chain walk,
//! runs direct and decomposed inference through a pluggable backend, and
//! scores predictions with alias-aware exact match.
//!
//! Module map:
//!
//! - [`model`]: shared value types and record validation
//! - [`ingest`]: source parsing, cleaning, deduplication
//! - [`oracle`]: editable triple store and chain walking
//! - [`datasetgen`]: Alpaca conversion, synchronized splits, trainer configs
//! - [`backend`]: HTTP chat-completions client and deterministic mock
//! - [`runner`]: direct, scripted-decomposition and model-driven loops
//! - [`scoring`]: normalization, correctness, accuracy and reports
//! - [`synth`]: seeded synthetic corpora for desk-scale checks

pub mod backend;
pub mod datasetgen;
pub mod ingest;
pub mod model;
pub mod oracle;
pub mod runner;
pub mod scoring;
pub mod synth;

#[cfg(test)]
pub(crate) mod fixtures;

pub use model::{
    AlpacaRecord, EditSpec, EvalMode, EvalOutcome, Exchange, FactTriple, Gold, HopStep, RunConfig,
    SourceRecord, TrainConfigSpec,
};

/// Errors that cut across modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
