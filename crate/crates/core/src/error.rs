use std::path::PathBuf;

/// Errors produced anywhere in the training laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sequence has {len} items, at least {min} required")]
    SequenceTooShort { len: usize, min: usize },
    #[error("user {user} has only {available} unobserved catalog items, {needed} needed")]
    CatalogExhausted {
        user: String,
        available: usize,
        needed: usize,
    },
    #[error("bad split ratios: {0}")]
    BadRatios(String),
    #[error("bad synthetic config: {0}")]
    BadSynthConfig(String),
    #[error("history is empty")]
    HistoryEmpty,
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("K = {k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("item `{0}` is not in the candidate set")]
    TargetNotInCandidates(String),
    #[error("non-positive input: {0}")]
    NonpositiveInput(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    DivergenceDetected {
        epoch: usize,
        step: usize,
        loss: f64,
        /// Last checkpoint whose loss was finite and under the threshold.
        last_good: Box<crate::trainer::Checkpoint>,
    },
    #[error("pair {index} has no hardness value but variant `{variant}` needs one")]
    MissingLambda { index: usize, variant: String },
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("AUC needs at least one positive and one negative instance")]
    DegenerateLabels,
    #[error("missing run artifact: {}", .0.display())]
    MissingRunArtifacts(PathBuf),
    #[error("state is frozen and cannot be updated")]
    FrozenState,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::DivergenceDetected { .. } | Error::NonFiniteGradient(_) | Error::Io { .. }
        )
    }
}
