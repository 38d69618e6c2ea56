use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the deformation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("face {face} has {corners} corners; only triangles are supported")]
    NonTriangleFace { face: usize, corners: usize },

    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },

    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },

    #[error("deformed face {face} is degenerate")]
    DegenerateDeformedFace { face: usize },

    #[error("size mismatch for {what}: expected {expected}, got {actual}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("anchored Poisson system is singular: mesh has {} connected components (size, first vertex): {:?}", .components.len(), .components)]
    Disconnected { components: Vec<(usize, usize)> },

    #[error("system matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("anchor vertex {vertex} does not match the factorized anchor {factorized}")]
    AnchorMismatch { vertex: usize, factorized: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token class '{0}'")]
    UnknownClass(String),

    #[error("unknown adapter id '{0}'")]
    UnknownAdapter(String),

    #[error("token has an empty exemplar set")]
    EmptyExemplarSet,

    #[error("exemplar shape mismatch in class '{class}': expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        class: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("stabilization triggered (1 - max weight = {gap:.3} < 0.2) but no adapter token is available; run finetune_adapter on the current mesh renders first")]
    MissingAdapter { gap: f64 },

    #[error("optimization diverged at iteration {iteration}: gradient norm {norm:e}")]
    Diverged { iteration: usize, norm: f64 },

    #[error("localization mask is empty after thresholding (V_R min {min:e}, max {max:e}, mean {mean:e})")]
    EmptyMask { min: f64, max: f64, mean: f64 },

    #[error("bank checkpoint: {0}")]
    Checkpoint(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable short identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::NonTriangleFace { .. } => "non_triangle_face",
            Error::DegenerateFace { .. } => "degenerate_face",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DegenerateDeformedFace { .. } => "degenerate_deformed_face",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Disconnected { .. } => "disconnected_mesh",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::AnchorMismatch { .. } => "anchor_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownClass(_) => "unknown_class",
            Error::UnknownAdapter(_) => "unknown_adapter",
            Error::EmptyExemplarSet => "empty_exemplar_set",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::MissingAdapter { .. } => "missing_adapter",
            Error::Diverged { .. } => "diverged",
            Error::EmptyMask { .. } => "empty_mask",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config { .. } => "config",
            Error::Png(_) => "png",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::SizeMismatch {
            what,
            expected,
            actual,
        })
    }
}
