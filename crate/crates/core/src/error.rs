use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every gradient-tracked leaf")]
    DetachedLoss,

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("operands were recorded on different tapes")]
    TapeMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unresolvable tap address {0}")]
    UnresolvedTap(String),

    #[error("cannot parse tap address {0:?}")]
    TapSyntax(String),

    #[error("attention maps are capture-only and cannot be overridden ({0})")]
    MapOverride(String),

    #[error("timestep error: {0}")]
    Timestep(String),

    #[error("patch size {patch} does not divide {height}x{width}")]
    PatchSize {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("box {0:?} is empty after mapping to the feature grid")]
    EmptyBox([usize; 4]),

    #[error("image format: {0}")]
    Image(String),

    #[error("tensor dump format: {0}")]
    Dump(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("at sampling step {step} (t={timestep}): {source}")]
    AtStep {
        step: usize,
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a numeric divergence (NaN/Inf).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::AtStep { source, .. } | Error::Context { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
