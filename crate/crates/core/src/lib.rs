//! Training and evaluation stack for generative construction of Natural
//! Language Inference datasets.
//!
//! The crate trains sequence models that produce a hypothesis from a
//! (premise, label) pair, regenerates a dataset with them, filters the result
//! with a reference classifier, and scores dataset quality chiefly by the
//! accuracy of a classifier retrained on the generated data.
//!
//! Module map:
//! - [`numerics`]: tensors, parameter store, Adam, gradient checking
//! - [`layers`]: LSTM, attention-based match LSTM, hierarchical softmax
//! - [`data`]: corpus loading, tokenization, vocabulary, embeddings
//! - [`models`]: classifier, four generators, discriminator
//! - [`generation`]: latent sampling, greedy and beam decoding
//! - [`metrics`]: dataset accuracy, Jaccard, ROUGE-L, METEOR-lite, NLL,
//!   discriminator error rate
//! - [`pipeline`]: end-to-end train/generate/filter/retrain orchestration
//! - [`checkpoint`]: bit-exact model persistence
//! - [`synth`]: rule-generated toy corpus for desk-scale runs

pub mod checkpoint;
pub mod data;
pub mod generation;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod synth;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape { op: String, expected: String, got: String },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus {path}, line {line}: {msg}")]
    Corpus { path: PathBuf, line: usize, msg: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("embedding file {path}, word {word:?}: expected {expected} values, got {got}")]
    EmbeddingWidth { path: PathBuf, word: String, expected: usize, got: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    NotACheckpoint,
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },
    #[error("checkpoint truncated at byte offset {offset}")]
    CheckpointTruncated { offset: u64 },
    #[error("vocab hash mismatch: checkpoint has {expected}, supplied vocab hashes to {found}")]
    VocabHashMismatch { expected: String, found: String },
    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("cannot balance dataset to {target} examples: label counts are {counts:?}")]
    Insufficient { target: usize, counts: [usize; 3] },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}
