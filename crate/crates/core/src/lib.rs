//! Core library of the pressure ulcer detection workbench.
//!
//! The crate collects the deterministic, side-effect-free machinery that the
//! rest of the workspace builds on:
//!
//! * [`geometry`] — axis-aligned boxes, IoU, box-delta coding and NMS
//! * [`anchors`] — anchor grids, training-target assignment and RoI pooling
//! * [`trainmath`] — loss kernels, their gradients and the Adam optimizer
//! * [`dataset`] — annotation parsing, canonical CSV, splits and augmentation
//! * [`eval`] — detection matching, per-class metrics, AP/AR and PR curves
//!
//! Everything here is pure computation: no I/O beyond explicit helpers that
//! read or write strings/paths, no global state, no hidden randomness.  Any
//! operation that consumes a seed uses a counter-based generator so results
//! are reproducible across platforms.

pub mod anchors;
pub mod classes;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod trainmath;

pub use anchors::{AnchorGrid, AnchorLabel, FeatureGrid, RpnThresholds, TargetAssignment};
pub use classes::{ClassHistogram, UlcerClass};
pub use dataset::{DatasetManifest, ImageRecord, Provenance, SplitTag};
pub use error::{Error, Result};
pub use eval::{ClassMetrics, EvalReport, MatchResult, MeanAverage, PRCurve};
pub use geometry::{BBox, BoxDelta, Detection, LabeledBox};
pub use trainmath::{AdamState, LossBreakdown};

/// How forgiving parsing and transformation routines should be when the
/// input is well-formed but semantically questionable (out-of-bounds boxes,
/// degenerate rectangles, annotations lost to a transform).
///
/// `Strict` turns every recoverable oddity into an error; `Lenient` repairs
/// or drops the offending item and reports what happened as a warning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    Strict,
    #[default]
    Lenient,
}

/// A value produced under [`Strictness::Lenient`] together with the list of
/// repairs that were applied to obtain it.  An empty `warnings` vector means
/// the input was clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Warned<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

impl<T> Warned<T> {
    pub fn clean(value: T) -> Self {
        Warned { value, warnings: Vec::new() }
    }

    pub fn new(value: T, warnings: Vec<String>) -> Self {
        Warned { value, warnings }
    }

    /// True when no repairs were necessary.
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}
