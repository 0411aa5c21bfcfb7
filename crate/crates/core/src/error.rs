use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bladder not found in frame {frame}")]
    BladderNotFound { frame: String },

    #[error("clip too short: {frames} frames, need at least {required}")]
    ClipTooShort { frames: usize, required: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("infeasible subsample: cannot keep {keep} of {total} frames with at most {max_gap} omitted per gap")]
    InfeasibleSubsample {
        total: usize,
        keep: usize,
        max_gap: usize,
    },

    #[error("checksum mismatch in chunk {chunk}")]
    Checksum { chunk: u64 },

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("stale cache for layer {layer}: {reason}")]
    StaleCache { layer: usize, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (first non-finite layer: {layer})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        layer: String,
    },

    #[error("SVM solver did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid tail trace: {0}")]
    InvalidTrace(String),

    #[error("flow failed for {provenance}: {message}")]
    Flow { provenance: String, message: String },

    #[error("missing dependency for stage {stage}: {artifact}")]
    MissingDependency { stage: String, artifact: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
