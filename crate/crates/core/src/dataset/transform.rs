//! Geometric dataset transforms: letterbox resizing, affine augmentation and
//! window cropping.
//!
//! Augmentations act on annotations only — the workbench never touches pixel
//! data.  Every transform is expressed as an affine map of the image plane;
//! a box is transformed by mapping its four corners and taking their
//! axis-aligned hull, then clipping to the image.  Boxes that lose too much
//! of themselves (retained area below a configurable floor) are dropped with
//! a warning rather than kept as slivers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::{BBox, LabeledBox};
use crate::{Strictness, Warned};

/// The scale-and-pad applied by [`letterbox_resize`], kept so detections on
/// the letterboxed image can be mapped back onto the original.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub target: u32,
}

impl LetterboxTransform {
    /// Original-image box -> letterboxed-image box.
    pub fn apply(&self, b: &BBox) -> Result<BBox> {
        let t = self.target as f64;
        BBox::new(
            (b.xmin * self.scale + self.pad_x).clamp(0.0, t),
            (b.ymin * self.scale + self.pad_y).clamp(0.0, t),
            (b.xmax * self.scale + self.pad_x).clamp(0.0, t),
            (b.ymax * self.scale + self.pad_y).clamp(0.0, t),
        )
    }

    /// Letterboxed-image box -> original-image box.
    pub fn invert(&self, b: &BBox) -> Result<BBox> {
        BBox::new(
            (b.xmin - self.pad_x) / self.scale,
            (b.ymin - self.pad_y) / self.scale,
            (b.xmax - self.pad_x) / self.scale,
            (b.ymax - self.pad_y) / self.scale,
        )
    }
}

/// Scales the longer image side to `target` and pads the shorter side
/// symmetrically, producing a square `target x target` record with all
/// annotations mapped along.  Aspect ratio is preserved exactly; padding is
/// split evenly between the two sides.
pub fn letterbox_resize(record: &ImageRecord, target: u32) -> Result<(ImageRecord, LetterboxTransform)> {
    if target == 0 {
        return Err(Error::InvalidArgument("letterbox target must be positive".into()));
    }
    record.validate()?;
    let (w, h) = (record.width as f64, record.height as f64);
    let scale = target as f64 / w.max(h);
    let transform = LetterboxTransform {
        scale,
        pad_x: (target as f64 - w * scale) / 2.0,
        pad_y: (target as f64 - h * scale) / 2.0,
        target,
    };
    let mut annotations = Vec::with_capacity(record.annotations.len());
    for ann in &record.annotations {
        annotations.push(LabeledBox::new(ann.class_id, transform.apply(&ann.bbox)?));
    }
    let out = ImageRecord {
        image_id: record.image_id.clone(),
        source_path: record.source_path.clone(),
        width: target,
        height: target,
        provenance: record.provenance,
        annotations,
    };
    Ok((out, transform))
}

/// A 2-D affine map `p -> M p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] };

    /// Horizontal mirror inside an image of the given width: `x -> w - x`.
    pub fn flip_h(width: f64) -> Affine {
        Affine { m: [[-1.0, 0.0], [0.0, 1.0]], t: [width, 0.0] }
    }

    /// Vertical mirror inside an image of the given height: `y -> h - y`.
    pub fn flip_v(height: f64) -> Affine {
        Affine { m: [[1.0, 0.0], [0.0, -1.0]], t: [0.0, height] }
    }

    /// Rotation by `theta` degrees about `(cx, cy)`.  In the y-down image
    /// frame the matrix rows are `(cos, sin)` and `(-sin, cos)`, so a 90°
    /// rotation of a `W x W` image maps `(x, y)` to `(y, W - x)`.
    pub fn rotate_deg(theta: f64, cx: f64, cy: f64) -> Affine {
        let (s, c) = theta.to_radians().sin_cos();
        let m = [[c, s], [-s, c]];
        Affine { m, t: [cx - (c * cx + s * cy), cy - (-s * cx + c * cy)] }
    }

    /// Uniform scaling by `s` about `(cx, cy)`.
    pub fn scale_about(s: f64, cx: f64, cy: f64) -> Affine {
        Affine { m: [[s, 0.0], [0.0, s]], t: [cx * (1.0 - s), cy * (1.0 - s)] }
    }

    /// Horizontal shear about the line `y = cy`: `x -> x + k (y - cy)`.
    pub fn skew_x(k: f64, cy: f64) -> Affine {
        Affine { m: [[1.0, k], [0.0, 1.0]], t: [-k * cy, 0.0] }
    }

    /// Composition that applies `self` first, then `next`.
    pub fn then(&self, next: &Affine) -> Affine {
        let a = next.m;
        let b = self.m;
        Affine {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * self.t[0] + a[0][1] * self.t[1] + next.t[0],
                a[1][0] * self.t[0] + a[1][1] * self.t[1] + next.t[1],
            ],
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.m[0][0] * p.0 + self.m[0][1] * p.1 + self.t[0],
            self.m[1][0] * p.0 + self.m[1][1] * p.1 + self.t[1],
        )
    }

    /// Axis-aligned hull of the four mapped corners of a box.
    pub fn map_box_hull(&self, b: &BBox) -> Result<BBox> {
        let corners = [
            self.apply((b.xmin, b.ymin)),
            self.apply((b.xmax, b.ymin)),
            self.apply((b.xmin, b.ymax)),
            self.apply((b.xmax, b.ymax)),
        ];
        let xmin = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let ymin = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let xmax = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let ymax = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        BBox::new(xmin, ymin, xmax, ymax)
    }
}

/// One augmentation step.  `None` parameters are drawn from the configured
/// ranges; explicit values bypass the random draw entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    FlipHorizontal,
    FlipVertical,
    /// Rotation in degrees about the image centre.
    Rotate(Option<f64>),
    /// Small rotation ("camera tilt") with a narrower default range.
    Tilt(Option<f64>),
    /// Uniform scale about the image centre; factors must be positive.
    Scale(Option<f64>),
    /// Horizontal shear about the image centre line.
    Skew(Option<f64>),
}

/// Sampling ranges for randomly drawn augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub rotate_deg: (f64, f64),
    pub tilt_deg: (f64, f64),
    pub scale: (f64, f64),
    pub skew: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotate_deg: (-15.0, 15.0),
            tilt_deg: (-5.0, 5.0),
            scale: (0.9, 1.1),
            skew: (-0.15, 0.15),
        }
    }
}

/// Configuration for [`augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOptions {
    pub ranges: AugmentRanges,
    /// A transformed box is kept only if the fraction of its hull remaining
    /// after clipping to the image reaches this floor.
    pub min_retained_area: f64,
    pub seed: u64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions { ranges: AugmentRanges::default(), min_retained_area: 0.25, seed: 0 }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "{name} range ({lo}, {hi}) must be finite and ordered"
        )));
    }
    Ok(())
}

/// Applies a sequence of augmentation ops to a record's annotations.
///
/// The ops compose into a single affine map (applied in list order) before
/// any box is touched, so the result is identical to applying the steps one
/// by one.  Random parameters come from a counter-based generator seeded by
/// `options.seed`; draws happen in op order, and ops with explicit
/// parameters consume no randomness.  Boxes falling below the retained-area
/// floor are dropped with a warning.  If every annotation is lost, strict
/// mode escalates that to an error.
pub fn augment(
    record: &ImageRecord,
    ops: &[AugmentOp],
    options: &AugmentOptions,
    strictness: Strictness,
) -> Result<Warned<ImageRecord>> {
    record.validate()?;
    check_range("rotate", options.ranges.rotate_deg)?;
    check_range("tilt", options.ranges.tilt_deg)?;
    check_range("scale", options.ranges.scale)?;
    check_range("skew", options.ranges.skew)?;
    if options.ranges.scale.0 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "scale range must be positive, got ({}, {})",
            options.ranges.scale.0, options.ranges.scale.1
        )));
    }
    if !options.min_retained_area.is_finite() || !(0.0..=1.0).contains(&options.min_retained_area) {
        return Err(Error::InvalidArgument(format!(
            "retained-area floor must lie in [0, 1], got {}",
            options.min_retained_area
        )));
    }

    let (w, h) = (record.width as f64, record.height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut draw = |explicit: Option<f64>, (lo, hi): (f64, f64)| match explicit {
        Some(v) => v,
        None => rng.random_range(lo..=hi),
    };

    let mut total = Affine::IDENTITY;
    for op in ops {
        let step = match *op {
            AugmentOp::FlipHorizontal => Affine::flip_h(w),
            AugmentOp::FlipVertical => Affine::flip_v(h),
            AugmentOp::Rotate(v) => Affine::rotate_deg(draw(v, options.ranges.rotate_deg), cx, cy),
            AugmentOp::Tilt(v) => Affine::rotate_deg(draw(v, options.ranges.tilt_deg), cx, cy),
            AugmentOp::Scale(v) => {
                let s = draw(v, options.ranges.scale);
                if !s.is_finite() || s <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "scale factor must be positive, got {s}"
                    )));
                }
                Affine::scale_about(s, cx, cy)
            }
            AugmentOp::Skew(v) => Affine::skew_x(draw(v, options.ranges.skew), cy),
        };
        total = total.then(&step);
    }

    let mut warnings = Vec::new();
    let mut annotations = Vec::new();
    for (i, ann) in record.annotations.iter().enumerate() {
        let hull = total.map_box_hull(&ann.bbox)?;
        let clipped = hull.clip_to_image(w, h);
        let retained = clipped.map_or(0.0, |c| c.area() / hull.area());
        match clipped {
            Some(c) if retained >= options.min_retained_area => {
                annotations.push(LabeledBox::new(ann.class_id, c));
            }
            _ => warnings.push(format!(
                "dropped annotation {i} of image {:?}: retained area fraction {retained:.3} \
                 below the {:.3} floor",
                record.image_id, options.min_retained_area
            )),
        }
    }

    if annotations.is_empty() && !record.annotations.is_empty() {
        let msg = format!(
            "augmentation removed every annotation of image {:?}",
            record.image_id
        );
        if strictness == Strictness::Strict {
            return Err(Error::Strict(msg));
        }
        warnings.push(msg);
    }

    Ok(Warned::new(
        ImageRecord {
            image_id: record.image_id.clone(),
            source_path: record.source_path.clone(),
            width: record.width,
            height: record.height,
            provenance: record.provenance,
            annotations,
        },
        warnings,
    ))
}

/// Crops a rectangular window out of a record, re-expressing annotations in
/// window coordinates.
///
/// The window must lie inside the image and span at least one pixel per
/// axis; its extents are rounded to whole pixels for the output record.
/// Each annotation keeps the part inside the window when the retained
/// fraction of its own area reaches `min_retained_area`, and is dropped with
/// a warning otherwise.  Losing every annotation is an error in strict mode.
pub fn crop_window(
    record: &ImageRecord,
    window: &BBox,
    min_retained_area: f64,
    strictness: Strictness,
) -> Result<Warned<ImageRecord>> {
    record.validate()?;
    if !min_retained_area.is_finite() || !(0.0..=1.0).contains(&min_retained_area) {
        return Err(Error::InvalidArgument(format!(
            "retained-area floor must lie in [0, 1], got {min_retained_area}"
        )));
    }
    let (w, h) = (record.width as f64, record.height as f64);
    if !window.is_inside_image(w, h) {
        return Err(Error::InvalidArgument(format!(
            "crop window ({}, {}, {}, {}) exceeds the {w} x {h} image",
            window.xmin, window.ymin, window.xmax, window.ymax
        )));
    }
    if window.width() < 1.0 || window.height() < 1.0 {
        return Err(Error::InvalidArgument(
            "crop window must span at least one pixel per axis".into(),
        ));
    }
    let new_w = window.width().round() as u32;
    let new_h = window.height().round() as u32;

    let mut warnings = Vec::new();
    let mut annotations = Vec::new();
    for (i, ann) in record.annotations.iter().enumerate() {
        let retained_box = ann.bbox.intersection(window);
        let retained = retained_box.map_or(0.0, |r| r.area() / ann.bbox.area());
        match retained_box {
            Some(r) if retained >= min_retained_area => {
                let shifted = BBox::new(
                    (r.xmin - window.xmin).clamp(0.0, new_w as f64),
                    (r.ymin - window.ymin).clamp(0.0, new_h as f64),
                    (r.xmax - window.xmin).clamp(0.0, new_w as f64),
                    (r.ymax - window.ymin).clamp(0.0, new_h as f64),
                )?;
                annotations.push(LabeledBox::new(ann.class_id, shifted));
            }
            _ => warnings.push(format!(
                "dropped annotation {i} of image {:?}: retained area fraction {retained:.3} \
                 below the {min_retained_area:.3} floor",
                record.image_id
            )),
        }
    }

    if annotations.is_empty() && !record.annotations.is_empty() {
        let msg = format!(
            "crop window retains no annotations of image {:?}",
            record.image_id
        );
        if strictness == Strictness::Strict {
            return Err(Error::Strict(msg));
        }
        warnings.push(msg);
    }

    Ok(Warned::new(
        ImageRecord {
            image_id: record.image_id.clone(),
            source_path: record.source_path.clone(),
            width: new_w,
            height: new_h,
            provenance: record.provenance,
            annotations,
        },
        warnings,
    ))
}
