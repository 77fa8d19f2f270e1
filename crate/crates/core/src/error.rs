use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage names used to tag propagated errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Encode,
    Retrieve,
    Select,
    Compose,
    Candidates,
    Verify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Encode => "encode",
            Stage::Retrieve => "retrieve",
            Stage::Select => "select",
            Stage::Compose => "compose",
            Stage::Candidates => "candidates",
            Stage::Verify => "verify",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("duplicate exemplar id `{0}`")]
    DuplicateId(String),

    #[error("embedding dimension mismatch for `{id}`: expected {expected}, got {got}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown exemplar id `{0}`")]
    UnknownId(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("format version mismatch: file has v{found}, reader expects v{expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss is not smooth at the evaluation point ({0})")]
    NonSmooth(String),

    #[error("combinatorial guard exceeded: C({pool}, {k}) > {limit}")]
    CombinatorialGuard { pool: usize, k: usize, limit: u64 },

    #[error("prompt composition failed: {0}")]
    Composition(String),

    #[error("no candidate labels to score")]
    NoCandidates,

    #[error("verifier transport failure (retryable): {0}")]
    Transport(String),

    #[error("verifier protocol error: {0}")]
    Protocol(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(stage: Stage) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Transport failures can be retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Transport(_) => true,
            Error::Stage { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}
