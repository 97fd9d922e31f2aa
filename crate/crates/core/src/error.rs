use std::path::PathBuf;

/// Errors produced by the segmentation and scoring pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cluster {cluster} has only {size} rows; cannot stratify")]
    Stratification { cluster: usize, size: usize },

    #[error("non-finite gradient in layer {layer}")]
    Divergence { layer: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("resample error: {0}")]
    Resample(String),

    #[error("feature `{feature}`: unseen category code {value}")]
    UnseenCategory { feature: String, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {}: run the stage that produces it first", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures of numerical work (as opposed to bad input or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::Numeric(_)
                | Error::Training { .. }
                | Error::DegenerateSplit(_)
        )
    }

    /// True for failures detected while validating input or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema(_)
                | Error::Config(_)
                | Error::MissingArtifact(_)
                | Error::DimensionMismatch { .. }
                | Error::UnseenCategory { .. }
        )
    }
}
