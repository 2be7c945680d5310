//! Detection evaluation: greedy matching against ground truth, per-class
//! precision/recall/F1 tables, interpolated average precision and recall,
//! precision–recall curves, and renderers for the lot.

pub mod ap;
pub mod curve;
pub mod io;
pub mod matching;
pub mod render;

use serde::{Deserialize, Serialize};

pub use ap::{
    average_precision, average_recall_suite, bucketed_average_precision, coco_iou_thresholds,
    coco_map_suite, ArSuite, CocoMapSuite, SizeBucket,
};
pub use curve::{pr_curve, PRCurve, PRPoint};
pub use io::{detections_to_csv, parse_detections_csv, DETECTION_HEADER};
pub use matching::{match_detections, ClassTally, MatchResult, MatchedPair};
pub use render::{render_csv, render_jsonl, render_table};

use crate::classes::UlcerClass;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::Detection;

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision/recall/F1 for one class at one operating point.  Counts are
/// carried alongside the derived ratios so reports can be re-audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: UlcerClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth boxes of this class across all images (`tp + fn`).
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_count: u64,
    /// False positives whose best overlap with *any* same-class ground truth
    /// falls below the IoU threshold — localisation misses rather than
    /// duplicates.
    pub fp_outside: u64,
}

/// Arithmetic mean of the per-class metrics over classes with support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean support of the contributing classes.
    pub support: f64,
}

/// A full evaluation at one IoU threshold and one confidence cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    /// One entry per class, in canonical class order, including classes with
    /// zero support.
    pub per_class: Vec<ClassMetrics>,
    pub mean_average: MeanAverage,
    pub total_true_positives: u64,
    pub total_false_positives: u64,
    pub total_false_negatives: u64,
    /// False positives that missed every same-class ground-truth box at the
    /// IoU threshold, summed over classes.
    pub fp_outside_iou: u64,
}

/// Derives per-class metrics from raw match tallies, in canonical class
/// order.  A ratio with a zero denominator is reported as zero.
pub fn class_metrics(result: &MatchResult) -> Vec<ClassMetrics> {
    UlcerClass::ALL
        .iter()
        .map(|&class| {
            let tally = &result.tallies[class.index()];
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            let precision = ratio(tally.tp, tally.tp + tally.fp);
            let recall = ratio(tally.tp, tally.tp + tally.fn_count);
            ClassMetrics {
                class,
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: tally.tp + tally.fn_count,
                tp: tally.tp,
                fp: tally.fp,
                fn_count: tally.fn_count,
                fp_outside: tally.fp_outside,
            }
        })
        .collect()
}

/// Averages metrics over the classes that have ground-truth support.
/// Classes without support carry no signal and are excluded from every
/// column, including the support mean.  Errors if no class has support.
pub fn mean_average(per_class: &[ClassMetrics]) -> Result<MeanAverage> {
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    if supported.is_empty() {
        return Err(Error::Empty(
            "no class has ground-truth support; the mean row is undefined".into(),
        ));
    }
    let n = supported.len() as f64;
    Ok(MeanAverage {
        precision: supported.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: supported.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: supported.iter().map(|m| m.f1).sum::<f64>() / n,
        support: supported.iter().map(|m| m.support as f64).sum::<f64>() / n,
    })
}

/// Runs the full evaluation at one operating point: filter detections by
/// confidence, match per image and class, tally, and summarise.
pub fn evaluate(
    records: &[ImageRecord],
    detections: &[Detection],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<EvalReport> {
    let result = match_detections(records, detections, iou_threshold, confidence_threshold)?;
    let per_class = class_metrics(&result);
    let mean = mean_average(&per_class)?;
    let sum = |f: fn(&ClassMetrics) -> u64| per_class.iter().map(f).sum::<u64>();
    Ok(EvalReport {
        iou_threshold,
        confidence_threshold,
        mean_average: mean,
        total_true_positives: sum(|m| m.tp),
        total_false_positives: sum(|m| m.fp),
        total_false_negatives: sum(|m| m.fn_count),
        fp_outside_iou: sum(|m| m.fp_outside),
        per_class,
    })
}

/// Evaluates the same detections at a ladder of confidence cutoffs.  The
/// ladder must be non-empty and strictly ascending so the resulting reports
/// read as a tightening sweep.
pub fn sweep(
    records: &[ImageRecord],
    detections: &[Detection],
    iou_threshold: f64,
    confidence_thresholds: &[f64],
) -> Result<Vec<EvalReport>> {
    if confidence_thresholds.is_empty() {
        return Err(Error::InvalidArgument(
            "confidence sweep needs at least one cutoff".into(),
        ));
    }
    if confidence_thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "confidence cutoffs must be strictly ascending, got {confidence_thresholds:?}"
        )));
    }
    confidence_thresholds
        .iter()
        .map(|&cs| evaluate(records, detections, iou_threshold, cs))
        .collect()
}
