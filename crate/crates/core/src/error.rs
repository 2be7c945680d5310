//! Crate-wide error type.
//!
//! Variants are grouped by how callers are expected to react: `Parse`,
//! `UnknownClass` and the format-specific wrappers signal bad input files;
//! `InvalidBox`/`DegenerateBox`/`InvalidArgument` signal violated numeric
//! preconditions; `Strict` is the escalation of a would-be warning under
//! [`crate::Strictness::Strict`]; `Empty` marks operations whose result set
//! came out empty (zero support, no detections above a cutoff).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A box failed a structural requirement (ordering, finiteness).
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// A box was structurally fine but has zero/negative extent where a
    /// positive area is required.
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    /// A class label that is not one of the six known categories.
    #[error("unknown class name {name:?}; valid names are {valid}")]
    UnknownClass { name: String, valid: String },

    /// Malformed input that could not be mapped onto the data model.
    #[error("parse error: {0}")]
    Parse(String),

    /// A recoverable defect encountered while running in strict mode.
    #[error("strict mode: {0}")]
    Strict(String),

    /// A numeric or structural precondition on an API call was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested computation has an empty result set.
    #[error("empty result: {0}")]
    Empty(String),

    /// A detection references an image that the ground-truth set does not contain.
    #[error("unknown image id {0:?}: not present in the ground-truth manifest")]
    UnknownImage(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("XML error: {0}")]
    Xml(#[from] roxmltree::Error),
}
