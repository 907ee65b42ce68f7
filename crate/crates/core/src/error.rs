//! Crate-wide error type.
//!
//! Variants are grouped by the pipeline's exit-code classes: configuration
//! problems, data problems and training problems (see [`ErrorClass`]).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GicError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("optimizer error in layer {layer}: {message}")]
    Optimizer { layer: usize, message: String },

    #[error("format error at byte/line {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("construction error: {0}")]
    Construction(String),

    #[error("balancing error: empty groups {0:?}")]
    Balancing(Vec<usize>),

    #[error("readjustment error: {0}")]
    Readjustment(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GicError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
}

impl GicError {
    pub fn class(&self) -> ErrorClass {
        match self {
            GicError::Config(_) | GicError::Spec(_) | GicError::Study(_) => ErrorClass::Config,
            GicError::Optimizer { .. }
            | GicError::Training { .. }
            | GicError::Numeric(_)
            | GicError::State(_) => ErrorClass::Training,
            GicError::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> GicError {
        GicError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, GicError>;
