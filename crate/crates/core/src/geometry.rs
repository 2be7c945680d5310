//! Axis-aligned box geometry: IoU, box-delta coding and non-maximum
//! suppression.
//!
//! Boxes use corner representation `(xmin, ymin, xmax, ymax)` in continuous
//! pixel coordinates with the origin at the top-left corner, x growing right
//! and y growing down.  Width is `xmax - xmin` and height `ymax - ymin`; a
//! valid box has strictly positive extent on both axes.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classes::UlcerClass;
use crate::error::{Error, Result};

/// Cap applied to decoded log-scale box deltas, `ln(1000/16)`.  A delta can
/// therefore grow a box by at most a factor of 62.5 per axis, which keeps
/// `exp` finite for arbitrary regressor output.
pub const MAX_DELTA_LOG_SCALE: f64 = 4.135166556742356;

/// Axis-aligned box in corner form.  `xmin < xmax` and `ymin < ymax` always
/// hold for boxes built through [`BBox::new`]; the fields stay public for
/// ergonomic pattern matching, so code that mutates them directly is
/// responsible for re-validating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty or inverted
    /// extents.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<BBox> {
        for (name, v) in [("xmin", xmin), ("ymin", ymin), ("xmax", xmax), ("ymax", ymax)] {
            if !v.is_finite() {
                return Err(Error::InvalidBox(format!("{name} is not finite: {v}")));
            }
        }
        if xmin >= xmax || ymin >= ymax {
            return Err(Error::InvalidBox(format!(
                "corners must satisfy xmin < xmax and ymin < ymax, got \
                 ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(BBox { xmin, ymin, xmax, ymax })
    }

    /// Builds a box from two arbitrary corner points, swapping coordinates
    /// into canonical order first.
    pub fn from_corners(a: (f64, f64), b: (f64, f64)) -> Result<BBox> {
        BBox::new(a.0.min(b.0), a.1.min(b.1), a.0.max(b.0), a.1.max(b.1))
    }

    /// Builds a box from its centre point and extents.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<BBox> {
        BBox::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.xmin + self.xmax) / 2.0,
            (self.ymin + self.ymax) / 2.0,
        )
    }

    /// Area of the overlap with `other`; zero when the boxes are disjoint or
    /// merely share an edge.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.xmax.min(other.xmax) - self.xmin.max(other.xmin)).max(0.0);
        let h = (self.ymax.min(other.ymax) - self.ymin.max(other.ymin)).max(0.0);
        w * h
    }

    /// The overlapping region itself, if it has positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let xmin = self.xmin.max(other.xmin);
        let ymin = self.ymin.max(other.ymin);
        let xmax = self.xmax.min(other.xmax);
        let ymax = self.ymax.min(other.ymax);
        if xmin < xmax && ymin < ymax {
            Some(BBox { xmin, ymin, xmax, ymax })
        } else {
            None
        }
    }

    /// Clips the box to the image rectangle `[0, width] x [0, height]`.
    /// Returns `None` when nothing with positive area remains inside.
    pub fn clip_to_image(&self, width: f64, height: f64) -> Option<BBox> {
        let xmin = self.xmin.max(0.0);
        let ymin = self.ymin.max(0.0);
        let xmax = self.xmax.min(width);
        let ymax = self.ymax.min(height);
        if xmin < xmax && ymin < ymax {
            Some(BBox { xmin, ymin, xmax, ymax })
        } else {
            None
        }
    }

    /// True when the box lies entirely inside `[0, width] x [0, height]`.
    pub fn is_inside_image(&self, width: f64, height: f64) -> bool {
        self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= width && self.ymax <= height
    }
}

/// Intersection over union of two boxes.  Degenerate (zero-area) inputs and
/// disjoint pairs yield `0.0`; the result always lies in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU variant that refuses degenerate boxes instead of defaulting to zero.
pub fn iou_strict(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("first box has area {}", a.area())));
    }
    if b.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("second box has area {}", b.area())));
    }
    Ok(iou(a, b))
}

/// Regression targets describing how to morph a reference box into a target
/// box: relative centre shift `(dx, dy)` and log-scale size change `(dw, dh)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// Encodes the delta that carries `reference` onto `target`:
/// centre offsets normalised by the reference extents and log ratios of the
/// extents.  The reference must have positive width and height.
pub fn encode_deltas(reference: &BBox, target: &BBox) -> Result<BoxDelta> {
    let (rw, rh) = (reference.width(), reference.height());
    if rw <= 0.0 || rh <= 0.0 {
        return Err(Error::DegenerateBox(format!(
            "reference box must have positive extent, got {rw} x {rh}"
        )));
    }
    let (tw, th) = (target.width(), target.height());
    if tw <= 0.0 || th <= 0.0 {
        return Err(Error::DegenerateBox(format!(
            "target box must have positive extent, got {tw} x {th}"
        )));
    }
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    Ok(BoxDelta {
        dx: (tx - rx) / rw,
        dy: (ty - ry) / rh,
        dw: (tw / rw).ln(),
        dh: (th / rh).ln(),
    })
}

/// Applies a delta to a reference box.  The log-scale components are capped
/// at [`MAX_DELTA_LOG_SCALE`] before exponentiation so a wild regressor
/// cannot produce an unbounded box.
pub fn decode_deltas(reference: &BBox, delta: &BoxDelta) -> Result<BBox> {
    let (rw, rh) = (reference.width(), reference.height());
    if rw <= 0.0 || rh <= 0.0 {
        return Err(Error::DegenerateBox(format!(
            "reference box must have positive extent, got {rw} x {rh}"
        )));
    }
    for (name, v) in [("dx", delta.dx), ("dy", delta.dy), ("dw", delta.dw), ("dh", delta.dh)] {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("delta component {name} is not finite")));
        }
    }
    let (rx, ry) = reference.center();
    let cx = rx + delta.dx * rw;
    let cy = ry + delta.dy * rh;
    let w = rw * delta.dw.min(MAX_DELTA_LOG_SCALE).exp();
    let h = rh * delta.dh.min(MAX_DELTA_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// A scored, classified box attributed to an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: UlcerClass,
    pub confidence: f64,
    pub bbox: BBox,
}

impl Detection {
    /// Builds a detection, requiring `confidence` to be a finite value in
    /// `[0, 1]`.
    pub fn new(
        image_id: impl Into<String>,
        class_id: UlcerClass,
        confidence: f64,
        bbox: BBox,
    ) -> Result<Detection> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence must lie in [0, 1], got {confidence}"
            )));
        }
        Ok(Detection { image_id: image_id.into(), class_id, confidence, bbox })
    }
}

/// A ground-truth box with its class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabeledBoxWire", into = "LabeledBoxWire")]
pub struct LabeledBox {
    pub class_id: UlcerClass,
    pub bbox: BBox,
}

impl LabeledBox {
    pub fn new(class_id: UlcerClass, bbox: BBox) -> LabeledBox {
        LabeledBox { class_id, bbox }
    }
}

/// Flat serialisation of [`LabeledBox`] so annotation records read naturally:
/// `{"class": "CategoryII", "xmin": ..., ...}`.
#[derive(Serialize, Deserialize)]
struct LabeledBoxWire {
    class: UlcerClass,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl TryFrom<LabeledBoxWire> for LabeledBox {
    type Error = Error;

    fn try_from(w: LabeledBoxWire) -> Result<LabeledBox> {
        Ok(LabeledBox {
            class_id: w.class,
            bbox: BBox::new(w.xmin, w.ymin, w.xmax, w.ymax)?,
        })
    }
}

impl From<LabeledBox> for LabeledBoxWire {
    fn from(b: LabeledBox) -> LabeledBoxWire {
        LabeledBoxWire {
            class: b.class_id,
            xmin: b.bbox.xmin,
            ymin: b.bbox.ymin,
            xmax: b.bbox.xmax,
            ymax: b.bbox.ymax,
        }
    }
}

/// Ordering used to rank detections: descending confidence, ties broken by
/// ascending input index so equal scores resolve deterministically.
pub(crate) fn rank_by_confidence<T>(items: &[T], confidence: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        confidence(&items[b])
            .partial_cmp(&confidence(&items[a]))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression.
///
/// Detections are visited in descending confidence (ties broken by input
/// index); each kept detection suppresses every later one whose IoU with it
/// *exceeds* `iou_threshold`.  With `class_wise` set, suppression only acts
/// between detections of the same class.  Kept detections are returned in
/// visit order.  `iou_threshold` must lie in `(0, 1)`.
pub fn nms(detections: &[Detection], iou_threshold: f64, class_wise: bool) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "NMS IoU threshold must lie in (0, 1), got {iou_threshold}"
        )));
    }
    let order = rank_by_confidence(detections, |d| d.confidence);
    let mut suppressed = vec![false; detections.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(detections[i].clone());
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if class_wise && detections[j].class_id != detections[i].class_id {
                continue;
            }
            if iou(&detections[j].bbox, &detections[i].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Parses `"xmin,ymin,xmax,ymax"` into a box; used by CLI flags.
impl FromStr for BBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<BBox> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!(
                "expected four comma-separated coordinates, got {s:?}"
            )));
        }
        let mut vals = [0.0; 4];
        for (slot, part) in vals.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|e| Error::Parse(format!("bad coordinate {part:?}: {e}")))?;
        }
        BBox::new(vals[0], vals[1], vals[2], vals[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(i: usize) -> UlcerClass {
        UlcerClass::from_index(i).unwrap()
    }

    fn det(conf: f64, bbox: BBox) -> Detection {
        Detection::new("img", class(0), conf, bbox).unwrap()
    }

    #[test]
    fn bbox_validation() {
        assert!(BBox::new(0.0, 0.0, 10.0, 10.0).is_ok());
        assert!(BBox::new(10.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 10.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 10.0).is_err());
        let b = BBox::from_corners((10.0, 20.0), (2.0, 4.0)).unwrap();
        assert_eq!(b, BBox { xmin: 2.0, ymin: 4.0, xmax: 10.0, ymax: 20.0 });
    }

    #[test]
    fn iou_of_partially_overlapping_squares() {
        // Two 10x10 squares offset by 5 on both axes: intersection 25,
        // union 175.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        let expected = 25.0 / 175.0;
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
        assert!((iou(&b, &a) - expected).abs() < 1e-12);
    }

    #[test]
    fn iou_identical_disjoint_and_touching() {
        let a = BBox::new(3.0, 4.0, 8.0, 9.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);

        let far = BBox::new(100.0, 100.0, 110.0, 110.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);

        // Sharing an edge only: zero-width intersection.
        let touching = BBox::new(8.0, 4.0, 12.0, 9.0).unwrap();
        assert_eq!(iou(&a, &touching), 0.0);
    }

    #[test]
    fn iou_strict_rejects_degenerate() {
        let good = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mut bad = good;
        bad.xmax = bad.xmin; // bypasses the constructor on purpose
        assert!(iou_strict(&bad, &good).is_err());
        assert!(iou_strict(&good, &bad).is_err());
        assert_eq!(iou_strict(&good, &good).unwrap(), 1.0);
        // The non-strict variant treats the same input as zero overlap.
        assert_eq!(iou(&bad, &good), 0.0);
    }

    #[test]
    fn delta_encoding_worked_example() {
        // Reference 10x10 at origin, target shifted +5 in x and twice as wide.
        let reference = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let target = BBox::new(0.0, 0.0, 20.0, 10.0).unwrap();
        let d = encode_deltas(&reference, &target).unwrap();
        assert!((d.dx - 0.5).abs() < 1e-12);
        assert!((d.dy - 0.0).abs() < 1e-12);
        assert!((d.dw - (2.0f64).ln()).abs() < 1e-12);
        assert!((d.dh - 0.0).abs() < 1e-12);
    }

    #[test]
    fn decode_inverts_encode() {
        let reference = BBox::new(12.0, -4.0, 61.5, 40.0).unwrap();
        let target = BBox::new(-3.0, 8.0, 95.0, 120.5).unwrap();
        let d = encode_deltas(&reference, &target).unwrap();
        let back = decode_deltas(&reference, &d).unwrap();
        assert!((back.xmin - target.xmin).abs() < 1e-9);
        assert!((back.ymin - target.ymin).abs() < 1e-9);
        assert!((back.xmax - target.xmax).abs() < 1e-9);
        assert!((back.ymax - target.ymax).abs() < 1e-9);
    }

    #[test]
    fn decode_caps_log_scale_growth() {
        let reference = BBox::new(0.0, 0.0, 16.0, 16.0).unwrap();
        let wild = BoxDelta { dx: 0.0, dy: 0.0, dw: 80.0, dh: 80.0 };
        let decoded = decode_deltas(&reference, &wild).unwrap();
        // 16 * exp(ln(1000/16)) = 1000, not exp(80)-sized.
        assert!((decoded.width() - 1000.0).abs() < 1e-6);
        assert!((decoded.height() - 1000.0).abs() < 1e-6);
        assert!((MAX_DELTA_LOG_SCALE - (1000.0f64 / 16.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_degenerate_reference() {
        let mut reference = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        reference.xmax = reference.xmin;
        let target = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(encode_deltas(&reference, &target).is_err());
        assert!(decode_deltas(&reference, &BoxDelta::ZERO).is_err());
    }

    #[test]
    fn nms_suppresses_heavy_overlap_keeps_light() {
        let a = det(0.9, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        // IoU with a: 8*10 / (100+100-80) = 2/3 > 0.5 -> suppressed.
        let b = det(0.8, BBox::new(2.0, 0.0, 12.0, 10.0).unwrap());
        // IoU with a: 25/175 ~= 0.143 < 0.5 -> kept.
        let c = det(0.7, BBox::new(5.0, 5.0, 15.0, 15.0).unwrap());
        let kept = nms(&[a.clone(), b, c.clone()], 0.5, false).unwrap();
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn nms_exact_threshold_survives() {
        // Suppression requires IoU strictly above the threshold.
        let a = det(0.9, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        // IoU exactly 1/3: 5*10 / (100 + 100 - 50).
        let b = det(0.8, BBox::new(5.0, 0.0, 15.0, 10.0).unwrap());
        let kept = nms(&[a, b], 1.0 / 3.0, false).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_tie_breaks_on_input_index() {
        let first = det(0.8, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        let second = det(0.8, BBox::new(1.0, 0.0, 11.0, 10.0).unwrap());
        let kept = nms(&[first.clone(), second], 0.5, false).unwrap();
        assert_eq!(kept, vec![first]);
    }

    #[test]
    fn nms_class_wise_keeps_other_classes() {
        let a = Detection::new("img", class(0), 0.9, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()).unwrap();
        let b = Detection::new("img", class(1), 0.8, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()).unwrap();
        assert_eq!(nms(&[a.clone(), b.clone()], 0.5, true).unwrap().len(), 2);
        assert_eq!(nms(&[a, b], 0.5, false).unwrap().len(), 1);
    }

    #[test]
    fn nms_rejects_out_of_range_threshold() {
        assert!(nms(&[], 0.0, false).is_err());
        assert!(nms(&[], 1.0, false).is_err());
        assert!(nms(&[], -0.5, true).is_err());
    }

    #[test]
    fn detection_confidence_validated() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(Detection::new("i", class(0), 1.1, b).is_err());
        assert!(Detection::new("i", class(0), -0.1, b).is_err());
        assert!(Detection::new("i", class(0), f64::NAN, b).is_err());
        assert!(Detection::new("i", class(0), 0.0, b).is_ok());
        assert!(Detection::new("i", class(0), 1.0, b).is_ok());
    }

    #[test]
    fn clip_to_image() {
        let b = BBox::new(-5.0, -5.0, 10.0, 10.0).unwrap();
        let clipped = b.clip_to_image(8.0, 8.0).unwrap();
        assert_eq!(clipped, BBox { xmin: 0.0, ymin: 0.0, xmax: 8.0, ymax: 8.0 });
        let outside = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(outside.clip_to_image(8.0, 8.0).is_none());
    }

    #[test]
    fn labeled_box_json_round_trip() {
        let lb = LabeledBox::new(class(4), BBox::new(1.0, 2.0, 3.5, 4.5).unwrap());
        let json = serde_json::to_string(&lb).unwrap();
        assert_eq!(json, r#"{"class":"DTI","xmin":1.0,"ymin":2.0,"xmax":3.5,"ymax":4.5}"#);
        let back: LabeledBox = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lb);
        // Inverted corners are rejected during deserialisation.
        let bad = r#"{"class":"DTI","xmin":5.0,"ymin":2.0,"xmax":3.5,"ymax":4.5}"#;
        assert!(serde_json::from_str::<LabeledBox>(bad).is_err());
    }

    #[test]
    fn bbox_from_str() {
        let b: BBox = "1, 2, 3, 4".parse().unwrap();
        assert_eq!(b, BBox { xmin: 1.0, ymin: 2.0, xmax: 3.0, ymax: 4.0 });
        assert!("1,2,3".parse::<BBox>().is_err());
        assert!("1,2,3,x".parse::<BBox>().is_err());
        assert!("3,2,1,4".parse::<BBox>().is_err());
    }
}
