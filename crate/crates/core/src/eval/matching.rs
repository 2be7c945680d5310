//! Greedy detection-to-ground-truth matching at a fixed IoU and confidence
//! cutoff — the counting stage that everything in [`crate::eval`] builds on.

use std::collections::{BTreeMap, HashMap};

use crate::classes::UlcerClass;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};

/// Raw match counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    /// False positives whose best IoU against *any* same-class ground truth
    /// in their image stays below the threshold: clutter in empty territory
    /// rather than a lost duel over a matched box.
    pub fp_outside: u64,
}

/// One matched detection/ground-truth pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub image_id: String,
    pub class_id: UlcerClass,
    /// Index into the detection slice passed to [`match_detections`].
    pub detection_index: usize,
    /// Index into the matched record's annotation list.
    pub gt_index: usize,
    pub iou: f64,
    pub confidence: f64,
}

/// Outcome of matching a detection set against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub tallies: [ClassTally; UlcerClass::COUNT],
    pub pairs: Vec<MatchedPair>,
}

pub(crate) fn check_iou_threshold(iou_threshold: f64) -> Result<()> {
    if !iou_threshold.is_finite() || !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    Ok(())
}

pub(crate) fn check_confidence_threshold(cs: f64) -> Result<()> {
    if !cs.is_finite() || !(0.0..=1.0).contains(&cs) {
        return Err(Error::InvalidArgument(format!(
            "confidence cutoff must lie in [0, 1], got {cs}"
        )));
    }
    Ok(())
}

/// Builds an image-id index over the records, rejecting duplicates, and
/// verifies every detection points at a known image.
pub(crate) fn index_records<'a>(
    records: &'a [ImageRecord],
    detections: &[Detection],
) -> Result<HashMap<&'a str, usize>> {
    let mut index = HashMap::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        if index.insert(record.image_id.as_str(), i).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate image id {:?} in ground truth",
                record.image_id
            )));
        }
    }
    for det in detections {
        if !index.contains_key(det.image_id.as_str()) {
            return Err(Error::UnknownImage(det.image_id.clone()));
        }
    }
    Ok(index)
}

/// Matches detections against ground truth, greedily and per image/class.
///
/// Detections below the confidence cutoff are discarded outright (they count
/// as nothing).  Within each image and class, surviving detections are
/// visited in descending confidence (ties broken by input index); each takes
/// the not-yet-matched ground-truth box with the highest IoU, provided that
/// IoU reaches `iou_threshold` (ties towards the lower box index).  A
/// detection that finds no such box is a false positive; leftover boxes are
/// false negatives.  Pairs come back ordered by image id, then class, then
/// descending confidence.
pub fn match_detections(
    records: &[ImageRecord],
    detections: &[Detection],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<MatchResult> {
    check_iou_threshold(iou_threshold)?;
    check_confidence_threshold(confidence_threshold)?;
    index_records(records, detections)?;

    // Group surviving detections by (image, class), keeping input indices.
    let mut groups: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, det) in detections.iter().enumerate() {
        if det.confidence >= confidence_threshold {
            groups
                .entry((det.image_id.as_str(), det.class_id.index()))
                .or_default()
                .push(i);
        }
    }

    let mut tallies = [ClassTally::default(); UlcerClass::COUNT];
    let mut pairs = Vec::new();

    let mut sorted_records: Vec<&ImageRecord> = records.iter().collect();
    sorted_records.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    for record in sorted_records {
        for class in UlcerClass::ALL {
            let gts: Vec<usize> = record
                .annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.class_id == class)
                .map(|(i, _)| i)
                .collect();

            let mut dets: Vec<usize> = groups
                .get(&(record.image_id.as_str(), class.index()))
                .cloned()
                .unwrap_or_default();
            dets.sort_by(|&a, &b| {
                detections[b]
                    .confidence
                    .partial_cmp(&detections[a].confidence)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });

            let mut taken = vec![false; gts.len()];
            for det_idx in dets {
                let det = &detections[det_idx];
                let mut best: Option<(f64, usize)> = None; // over unmatched boxes
                let mut best_any = 0.0f64; // over all boxes, for fp_outside
                for (slot, &gt_idx) in gts.iter().enumerate() {
                    let v = iou(&det.bbox, &record.annotations[gt_idx].bbox);
                    best_any = best_any.max(v);
                    if !taken[slot] && best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, slot));
                    }
                }
                match best {
                    Some((v, slot)) if v >= iou_threshold => {
                        taken[slot] = true;
                        tallies[class.index()].tp += 1;
                        pairs.push(MatchedPair {
                            image_id: record.image_id.clone(),
                            class_id: class,
                            detection_index: det_idx,
                            gt_index: gts[slot],
                            iou: v,
                            confidence: det.confidence,
                        });
                    }
                    _ => {
                        tallies[class.index()].fp += 1;
                        if best_any < iou_threshold {
                            tallies[class.index()].fp_outside += 1;
                        }
                    }
                }
            }
            tallies[class.index()].fn_count += taken.iter().filter(|&&t| !t).count() as u64;
        }
    }

    Ok(MatchResult { iou_threshold, confidence_threshold, tallies, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testutil::record;
    use crate::geometry::BBox;

    fn det(image: &str, class: UlcerClass, conf: f64, b: (f64, f64, f64, f64)) -> Detection {
        Detection::new(image, class, conf, BBox::new(b.0, b.1, b.2, b.3).unwrap()).unwrap()
    }

    #[test]
    fn exact_overlap_is_a_true_positive() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryII, 10.0, 10.0, 50.0, 50.0)])];
        let dets = [det("a", UlcerClass::CategoryII, 0.9, (10.0, 10.0, 50.0, 50.0))];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        let t = mr.tallies[UlcerClass::CategoryII.index()];
        assert_eq!((t.tp, t.fp, t.fn_count, t.fp_outside), (1, 0, 0, 0));
        assert_eq!(mr.pairs.len(), 1);
        assert_eq!(mr.pairs[0].iou, 1.0);
        assert_eq!(mr.pairs[0].detection_index, 0);
        assert_eq!(mr.pairs[0].gt_index, 0);
    }

    #[test]
    fn class_mismatch_is_fp_plus_fn() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryII, 10.0, 10.0, 50.0, 50.0)])];
        let dets = [det("a", UlcerClass::CategoryIII, 0.9, (10.0, 10.0, 50.0, 50.0))];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        let fp_class = mr.tallies[UlcerClass::CategoryIII.index()];
        let fn_class = mr.tallies[UlcerClass::CategoryII.index()];
        assert_eq!((fp_class.fp, fp_class.fp_outside), (1, 1), "no same-class box anywhere");
        assert_eq!(fn_class.fn_count, 1);
        assert!(mr.pairs.is_empty());
    }

    #[test]
    fn second_detection_on_a_matched_box_is_fp_but_not_outside() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryI, 10.0, 10.0, 50.0, 50.0)])];
        let dets = [
            det("a", UlcerClass::CategoryI, 0.9, (10.0, 10.0, 50.0, 50.0)),
            det("a", UlcerClass::CategoryI, 0.8, (11.0, 10.0, 50.0, 50.0)),
        ];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        let t = mr.tallies[UlcerClass::CategoryI.index()];
        assert_eq!((t.tp, t.fp, t.fn_count), (1, 1, 0));
        assert_eq!(t.fp_outside, 0, "it overlaps a box above the threshold, just a taken one");
        assert_eq!(mr.pairs[0].detection_index, 0, "higher confidence wins the box");
    }

    #[test]
    fn higher_confidence_matches_first_even_if_later_in_input() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryI, 10.0, 10.0, 50.0, 50.0)])];
        let dets = [
            det("a", UlcerClass::CategoryI, 0.6, (10.0, 10.0, 50.0, 50.0)),
            det("a", UlcerClass::CategoryI, 0.9, (12.0, 10.0, 50.0, 50.0)),
        ];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        assert_eq!(mr.pairs.len(), 1);
        assert_eq!(mr.pairs[0].detection_index, 1);
    }

    #[test]
    fn confidence_ties_break_on_input_index() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryI, 10.0, 10.0, 50.0, 50.0)])];
        let dets = [
            det("a", UlcerClass::CategoryI, 0.7, (10.0, 10.0, 50.0, 50.0)),
            det("a", UlcerClass::CategoryI, 0.7, (10.0, 10.0, 50.0, 50.0)),
        ];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        assert_eq!(mr.pairs[0].detection_index, 0);
        assert_eq!(mr.tallies[UlcerClass::CategoryI.index()].fp, 1);
    }

    #[test]
    fn detection_picks_highest_iou_unmatched_box() {
        let records = [record("a", 200, 200, &[
            (UlcerClass::CategoryI, 0.0, 0.0, 100.0, 100.0),
            (UlcerClass::CategoryI, 50.0, 0.0, 150.0, 100.0),
        ])];
        // Overlaps the second box better.
        let dets = [det("a", UlcerClass::CategoryI, 0.9, (60.0, 0.0, 150.0, 100.0))];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        assert_eq!(mr.pairs[0].gt_index, 1);
    }

    #[test]
    fn below_cutoff_detections_count_as_nothing() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryI, 10.0, 10.0, 50.0, 50.0)])];
        let dets = [det("a", UlcerClass::CategoryI, 0.2, (10.0, 10.0, 50.0, 50.0))];
        let mr = match_detections(&records, &dets, 0.5, 0.3).unwrap();
        let t = mr.tallies[UlcerClass::CategoryI.index()];
        assert_eq!((t.tp, t.fp, t.fn_count), (0, 0, 1));
        // At the cutoff exactly, the detection survives (>= semantics).
        let mr = match_detections(&records, &dets, 0.5, 0.2).unwrap();
        assert_eq!(mr.tallies[UlcerClass::CategoryI.index()].tp, 1);
    }

    #[test]
    fn iou_exactly_at_threshold_matches() {
        let records = [record("a", 100, 100, &[(UlcerClass::CategoryI, 0.0, 0.0, 10.0, 10.0)])];
        // IoU exactly 0.5: box (0, 0, 10, 5).
        let dets = [det("a", UlcerClass::CategoryI, 0.9, (0.0, 0.0, 10.0, 5.0))];
        let mr = match_detections(&records, &dets, 0.5, 0.0).unwrap();
        assert_eq!(mr.tallies[UlcerClass::CategoryI.index()].tp, 1);
    }

    #[test]
    fn unknown_image_is_an_error() {
        let records = [record("a", 100, 100, &[])];
        let dets = [det("b", UlcerClass::CategoryI, 0.9, (0.0, 0.0, 10.0, 10.0))];
        let err = match_detections(&records, &dets, 0.5, 0.0).unwrap_err();
        assert!(matches!(err, Error::UnknownImage(_)), "{err}");
    }

    #[test]
    fn thresholds_are_validated() {
        assert!(match_detections(&[], &[], 0.0, 0.0).is_err());
        assert!(match_detections(&[], &[], 1.5, 0.0).is_err());
        assert!(match_detections(&[], &[], 0.5, -0.1).is_err());
        assert!(match_detections(&[], &[], 0.5, 1.5).is_err());
        assert!(match_detections(&[], &[], 0.5, 0.0).is_ok());
    }

    #[test]
    fn support_conservation_across_cutoffs() {
        let records = [
            record("a", 100, 100, &[
                (UlcerClass::CategoryI, 0.0, 0.0, 10.0, 10.0),
                (UlcerClass::CategoryI, 20.0, 20.0, 40.0, 40.0),
                (UlcerClass::Dti, 50.0, 50.0, 80.0, 80.0),
            ]),
            record("b", 100, 100, &[(UlcerClass::CategoryI, 5.0, 5.0, 25.0, 25.0)]),
        ];
        let dets = [
            det("a", UlcerClass::CategoryI, 0.9, (0.0, 0.0, 10.0, 10.0)),
            det("a", UlcerClass::Dti, 0.4, (50.0, 50.0, 80.0, 80.0)),
            det("b", UlcerClass::CategoryI, 0.6, (5.0, 5.0, 25.0, 25.0)),
        ];
        for cs in [0.0, 0.5, 0.95] {
            let mr = match_detections(&records, &dets, 0.5, cs).unwrap();
            let cat1 = mr.tallies[UlcerClass::CategoryI.index()];
            assert_eq!(cat1.tp + cat1.fn_count, 3, "cs={cs}");
            let dti = mr.tallies[UlcerClass::Dti.index()];
            assert_eq!(dti.tp + dti.fn_count, 1, "cs={cs}");
        }
    }
}
