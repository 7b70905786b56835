use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeoError>;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid manifold spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point is off the manifold (residual {residual:e})")]
    OffManifold { residual: f64 },

    #[error("vector is not tangent at the base point (residual {residual:e})")]
    InvalidTangent { residual: f64 },

    #[error("logarithm undefined: points are antipodal")]
    UndefinedLog,

    #[error("point outside the Poincare ball (norm {norm}, radius {radius})")]
    OutOfDomain { norm: f64, radius: f64 },

    #[error("degenerate direction: cannot normalize a vector of norm {norm:e}")]
    DegenerateDirection { norm: f64 },

    #[error("modality `{modality}` has zero norm and cannot be L2-normalized")]
    Normalization { modality: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}, offset {offset}: {msg}")]
    Parse { line: usize, offset: usize, msg: String },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("undefined variance: targets are constant")]
    UndefinedVariance,

    #[error("missing upstream artifact: {}", path.display())]
    Dependency { path: PathBuf },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<GeoError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GeoError {
    pub fn context(self, context: impl Into<String>) -> Self {
        GeoError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &GeoError {
        match self {
            GeoError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
