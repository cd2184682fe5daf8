use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // charset
    #[error("label too long: {len} chars exceeds max {max}")]
    LabelTooLong { len: usize, max: usize },
    #[error("character {0:?} is outside the recognition alphabet")]
    UnknownChar(char),
    #[error("empty label")]
    EmptyLabel,

    // teacher
    #[error("positional grid {rows}x{cols} does not match the teacher variant")]
    GridMismatch { rows: usize, cols: usize },
    #[error("expected image of shape {expected}, got {got}")]
    BadImageShape { expected: String, got: String },
    #[error("character {0:?} expands to more than one vocabulary token")]
    TokenizerExpansion(char),
    #[error("no cached features for sample {0:?}")]
    CacheMiss(String),
    #[error("corrupt cache record for sample {id:?}: {reason}")]
    CorruptRecord { id: String, reason: String },

    // student / align / losses
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("missing stage {0} in distillation inputs")]
    MissingStage(usize),
    #[error("bad target length: expected {expected}, got {got}")]
    BadTargetLength { expected: usize, got: usize },

    // data
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("no usable fonts: {0}")]
    NoFonts(String),
    #[error("dataset is empty: {0}")]
    DatasetEmpty(String),

    // trainer / eval
    #[error("non-finite loss at step {step}: {term} = {value}")]
    NonFiniteLoss {
        step: usize,
        term: String,
        value: f64,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("dataset root not found: {0}")]
    MissingDataset(PathBuf),
    #[error("prediction/ground-truth length mismatch: {preds} vs {gts}")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("nothing to evaluate")]
    EmptyEval,

    // config / plumbing
    #[error("config error ({key}): {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category for the CLI.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config { .. } | GridMismatch { .. } | NonPositiveTau(_) => 2,
            MissingManifest(_) | UnreadableImage { .. } | NoFonts(_) | DatasetEmpty(_)
            | MissingDataset(_) | EmptyEval | LabelTooLong { .. } | UnknownChar(_)
            | EmptyLabel | TokenizerExpansion(_) => 3,
            NonFiniteLoss { .. } => 4,
            _ => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
