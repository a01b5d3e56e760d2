use std::path::PathBuf;

use crate::cost::OpSignature;
use crate::space::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Violation>),

    #[error("invalid operation: {0}")]
    InvalidOperation(String),

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("cannot sample {count} operations from a layer with {available} candidates")]
    SampleCount { count: usize, available: usize },

    #[error("parameters are not bound to this super network: {0}")]
    Unbound(String),

    #[error("outgoing probabilities of block {block} sum to {sum}, expected 1")]
    NotNormalized { block: usize, sum: f64 },

    #[error("block {0} has zero outgoing probability mass")]
    ZeroMass(usize),

    #[error("missing cost table entr{}: {}", if .0.len() == 1 { "y" } else { "ies" }, list_sigs(.0))]
    MissingCost(Vec<OpSignature>),

    #[error("{0} must be positive (got {1})")]
    NonPositive(&'static str, f64),

    #[error("logarithm base tau must exceed 1 (got {0})")]
    InvalidTau(f64),

    #[error("path enumeration over {0} blocks exceeds the brute-force limit of {1}")]
    TooLarge(usize, usize),

    #[error("evaluator returned a non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),

    #[error("accepted only {accepted} of {wanted} samples after {attempts} attempts (target {target}, tolerance {tolerance})")]
    AttemptCap {
        accepted: usize,
        wanted: usize,
        attempts: usize,
        target: f64,
        tolerance: f64,
    },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Json { .. } | Error::Parse { .. } => 2,
            Error::MissingCost(_) => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

fn summarize(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

fn list_sigs(sigs: &[OpSignature]) -> String {
    sigs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
}
