//! Ranked-precision metrics: 101-point interpolated average precision, the
//! pooled mAP suite over ten IoU thresholds and three object-size buckets,
//! and average recall at fixed detection budgets.

use std::collections::HashSet;

use crate::classes::UlcerClass;
use crate::dataset::ImageRecord;
use crate::error::Result;
use crate::eval::matching::{check_iou_threshold, index_records};
use crate::geometry::{iou, Detection};

/// Object-size stratification by box area (square pixels): small below
/// `32^2 = 1024`, medium from `1024` to `9216 = 96^2` inclusive, large
/// above.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn contains(self, area: f64) -> bool {
        match self {
            SizeBucket::All => true,
            SizeBucket::Small => area < 1024.0,
            SizeBucket::Medium => (1024.0..=9216.0).contains(&area),
            SizeBucket::Large => area > 9216.0,
        }
    }
}

/// The ten COCO-style IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Outcome of one ranked detection: whether it matched and the area that
/// governs its size bucket (the matched box's for hits, its own for misses).
#[derive(Debug, Clone, Copy)]
pub(crate) struct RankedOutcome {
    pub is_tp: bool,
    pub area: f64,
    pub confidence: f64,
}

/// Runs the global ranked matching for one class: all detections of the
/// class (optionally restricted to `allowed` input indices) sorted by
/// descending confidence with input-index tie-breaks, each greedily taking
/// the best still-free same-image box with IoU at or above the threshold.
/// Returns the per-rank outcomes plus the areas of every ground-truth box of
/// the class.
pub(crate) fn ranked_outcomes(
    records: &[ImageRecord],
    detections: &[Detection],
    class: UlcerClass,
    iou_threshold: f64,
    allowed: Option<&HashSet<usize>>,
) -> Result<(Vec<RankedOutcome>, Vec<f64>)> {
    check_iou_threshold(iou_threshold)?;
    let index = index_records(records, detections)?;

    let mut gt_areas = Vec::new();
    // Per record: indices of its boxes of this class, and a taken flag.
    let mut gt_slots: Vec<(Vec<usize>, Vec<bool>)> = records
        .iter()
        .map(|r| {
            let idx: Vec<usize> = r
                .annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.class_id == class)
                .map(|(i, _)| i)
                .collect();
            let n = idx.len();
            (idx, vec![false; n])
        })
        .collect();
    for (r, record) in records.iter().enumerate() {
        for &gt_idx in &gt_slots[r].0 {
            gt_areas.push(record.annotations[gt_idx].bbox.area());
        }
    }

    let mut order: Vec<usize> = (0..detections.len())
        .filter(|i| detections[*i].class_id == class)
        .filter(|i| allowed.is_none_or(|set| set.contains(i)))
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut outcomes = Vec::with_capacity(order.len());
    for det_idx in order {
        let det = &detections[det_idx];
        let r = index[det.image_id.as_str()];
        let record = &records[r];
        let (slots, taken) = &mut gt_slots[r];
        let mut best: Option<(f64, usize)> = None;
        for (slot, &gt_idx) in slots.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            let v = iou(&det.bbox, &record.annotations[gt_idx].bbox);
            if v >= iou_threshold && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, slot));
            }
        }
        match best {
            Some((_, slot)) => {
                taken[slot] = true;
                outcomes.push(RankedOutcome {
                    is_tp: true,
                    area: record.annotations[slots[slot]].bbox.area(),
                    confidence: det.confidence,
                });
            }
            None => outcomes.push(RankedOutcome {
                is_tp: false,
                area: det.bbox.area(),
                confidence: det.confidence,
            }),
        }
    }
    Ok((outcomes, gt_areas))
}

/// 101-point interpolated average precision for one class at one IoU
/// threshold, over the whole confidence range (no cutoff).  Precision is
/// sampled at recalls `0.00, 0.01, ..., 1.00` using the running maximum of
/// precision at or beyond each recall.  `None` when the class has no
/// ground-truth support.
pub fn average_precision(
    records: &[ImageRecord],
    detections: &[Detection],
    class: UlcerClass,
    iou_threshold: f64,
) -> Result<Option<f64>> {
    bucketed_average_precision(records, detections, class, iou_threshold, SizeBucket::All)
}

/// [`average_precision`] restricted to one size bucket: matching runs
/// against all boxes first, then hits count only when the matched box falls
/// in the bucket, misses only when the detection's own area does, and the
/// recall denominator is the bucketed box count.
pub fn bucketed_average_precision(
    records: &[ImageRecord],
    detections: &[Detection],
    class: UlcerClass,
    iou_threshold: f64,
    bucket: SizeBucket,
) -> Result<Option<f64>> {
    let (outcomes, gt_areas) = ranked_outcomes(records, detections, class, iou_threshold, None)?;
    let n_gt = gt_areas.iter().filter(|&&a| bucket.contains(a)).count();
    if n_gt == 0 {
        return Ok(None);
    }
    let flags: Vec<bool> = outcomes
        .iter()
        .filter(|o| bucket.contains(o.area))
        .map(|o| o.is_tp)
        .collect();

    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for flag in flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }

    // Running maximum of precision from the right: the interpolated
    // precision at any recall is the best precision achievable at or past it.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }

    let mut sum = 0.0;
    for r in 0..=100u32 {
        let target = r as f64 / 100.0;
        let idx = recalls.partition_point(|&rec| rec < target);
        sum += if idx < envelope.len() { envelope[idx] } else { 0.0 };
    }
    Ok(Some(sum / 101.0))
}

/// The pooled mAP suite: mean AP over classes with support, averaged over
/// the ten IoU thresholds, plus the fixed-threshold and size-bucket slices.
/// Fields are `None` when no class has support in the relevant bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CocoMapSuite {
    pub map: Option<f64>,
    pub map_50: Option<f64>,
    pub map_75: Option<f64>,
    pub map_small: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_large: Option<f64>,
}

fn mean_ap_at(
    records: &[ImageRecord],
    detections: &[Detection],
    iou_threshold: f64,
    bucket: SizeBucket,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for class in UlcerClass::ALL {
        if let Some(ap) =
            bucketed_average_precision(records, detections, class, iou_threshold, bucket)?
        {
            sum += ap;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn mean_over_thresholds(
    records: &[ImageRecord],
    detections: &[Detection],
    bucket: SizeBucket,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in coco_iou_thresholds() {
        if let Some(m) = mean_ap_at(records, detections, t, bucket)? {
            sum += m;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn coco_map_suite(records: &[ImageRecord], detections: &[Detection]) -> Result<CocoMapSuite> {
    Ok(CocoMapSuite {
        map: mean_over_thresholds(records, detections, SizeBucket::All)?,
        map_50: mean_ap_at(records, detections, 0.50, SizeBucket::All)?,
        map_75: mean_ap_at(records, detections, 0.75, SizeBucket::All)?,
        map_small: mean_over_thresholds(records, detections, SizeBucket::Small)?,
        map_medium: mean_over_thresholds(records, detections, SizeBucket::Medium)?,
        map_large: mean_over_thresholds(records, detections, SizeBucket::Large)?,
    })
}

/// Average recall at fixed per-image detection budgets, averaged over the
/// ten IoU thresholds and over classes with support, plus size-bucket slices
/// of the 100-detection budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArSuite {
    pub ar_1: Option<f64>,
    pub ar_10: Option<f64>,
    pub ar_100: Option<f64>,
    pub ar_100_small: Option<f64>,
    pub ar_100_medium: Option<f64>,
    pub ar_100_large: Option<f64>,
}

/// Recall with at most `k` detections per image (the `k` most confident
/// across all classes, ties by input index), averaged over the ten IoU
/// thresholds and the classes with ground truth in `bucket`.
pub fn average_recall_at(
    records: &[ImageRecord],
    detections: &[Detection],
    k: usize,
    bucket: SizeBucket,
) -> Result<Option<f64>> {
    index_records(records, detections)?;

    // Top-k most confident detections per image, across classes.
    let mut per_image: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (i, det) in detections.iter().enumerate() {
        per_image.entry(det.image_id.as_str()).or_default().push(i);
    }
    let mut allowed = HashSet::new();
    for indices in per_image.values_mut() {
        indices.sort_by(|&a, &b| {
            detections[b]
                .confidence
                .partial_cmp(&detections[a].confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        allowed.extend(indices.iter().take(k).copied());
    }

    let mut sum = 0.0;
    let mut n = 0usize;
    for t in coco_iou_thresholds() {
        for class in UlcerClass::ALL {
            let (outcomes, gt_areas) =
                ranked_outcomes(records, detections, class, t, Some(&allowed))?;
            let n_gt = gt_areas.iter().filter(|&&a| bucket.contains(a)).count();
            if n_gt == 0 {
                continue;
            }
            let matched = outcomes.iter().filter(|o| o.is_tp && bucket.contains(o.area)).count();
            sum += matched as f64 / n_gt as f64;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn average_recall_suite(records: &[ImageRecord], detections: &[Detection]) -> Result<ArSuite> {
    Ok(ArSuite {
        ar_1: average_recall_at(records, detections, 1, SizeBucket::All)?,
        ar_10: average_recall_at(records, detections, 10, SizeBucket::All)?,
        ar_100: average_recall_at(records, detections, 100, SizeBucket::All)?,
        ar_100_small: average_recall_at(records, detections, 100, SizeBucket::Small)?,
        ar_100_medium: average_recall_at(records, detections, 100, SizeBucket::Medium)?,
        ar_100_large: average_recall_at(records, detections, 100, SizeBucket::Large)?,
    })
}
