use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("encoding error: token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("language spec error: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("lexicon error: token {0:?} has no category")]
    Lexicon(String),
    #[error("missing artifact {path}: run `driftlab {producer}` first")]
    MissingArtifact { path: String, producer: String },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Usage(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Divergence { .. } | Error::NumericDomain(_) => 4,
            _ => 1,
        }
    }
}
