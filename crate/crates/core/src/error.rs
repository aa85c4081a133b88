use std::path::PathBuf;

use crate::trainer::TrainTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("length mismatch: {what}")]
    LengthMismatch { what: String },

    #[error("neuron {neuron} has a zero weight row")]
    DegenerateNeuron { neuron: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("label {0} is not -1 or +1")]
    InvalidLabel(f64),

    #[error("multiplier {index} is negative ({value})")]
    InvalidMultiplier { index: usize, value: f64 },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize, trace: Box<TrainTrace> },

    #[error("merge requires equal labels (got {0} and {1})")]
    MergeLabel(f64, f64),

    #[error("merge requires a shared activation pattern; neuron {neuron} differs")]
    MergePattern { neuron: usize },

    #[error("merge requires positive multipliers (got {0} and {1})")]
    MergeMultiplier(f64, f64),

    #[error("split child leaves the activation pattern at neuron {neuron}")]
    SplitPattern { neuron: usize },

    #[error("split child changes the classification of the point")]
    SplitClassification,

    #[error("split requires a positive multiplier (got {0})")]
    SplitMultiplier(f64),

    #[error("point lies exactly on the hyperplane of neuron {neuron}")]
    BoundaryPosition { neuron: usize },

    #[error("data spans the whole input space; no orthogonal direction exists")]
    NoOrthogonalDirection,

    #[error("all {restarts} attack restarts diverged")]
    AttackDiverged { restarts: usize, losses: Vec<f64> },

    #[error("bias-shift equivalence probe failed: relative error {0:e}")]
    DefenseTransform(f64),

    #[error("sample count {0} must be even")]
    OddSampleCount(usize),

    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch { what: &'static str, expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

impl Error {
    /// Numeric failures (divergence, failed equivalence probes) as opposed to
    /// malformed input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::TrainingDiverged { .. }
            | Error::AttackDiverged { .. }
            | Error::DefenseTransform(_) => true,
            Error::Context { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { what: format!("{what}: expected {expected}, got {got}") });
    }
    Ok(())
}
