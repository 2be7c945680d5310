//! Anchor grids, training-target assignment and RoI feature pooling — the
//! plumbing between raw boxes and the losses in [`crate::trainmath`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classes::UlcerClass;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox, BoxDelta, LabeledBox};
use crate::Warned;

/// A dense grid of anchor boxes over an image.
///
/// One feature-map cell is `stride x stride` image pixels; cell `(i, j)`
/// maps back to the image point `((i + 0.5) * stride, (j + 0.5) * stride)`
/// and carries one anchor per `(scale, ratio)` combination, all sharing that
/// centre.  Anchors are stored row-major over cells (y outer, x inner),
/// scale-major then ratio within a cell, and may extend beyond the image.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub image_width: u32,
    pub image_height: u32,
    pub stride: u32,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub cells_x: usize,
    pub cells_y: usize,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Generates the anchor grid for an image.
///
/// An anchor of scale `s` and aspect ratio `r` (height over width) has
/// width `s / sqrt(r)` and height `s * sqrt(r)`, so every anchor of scale
/// `s` covers the same area `s^2`.  The cell count per axis is the image
/// extent divided by the stride, rounded up.
pub fn generate_anchors(
    image_width: u32,
    image_height: u32,
    stride: u32,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid> {
    if image_width == 0 || image_height == 0 {
        return Err(Error::InvalidArgument(format!(
            "image extent must be positive, got {image_width} x {image_height}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one scale and one aspect ratio".into(),
        ));
    }
    for &s in scales {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::InvalidArgument(format!("anchor scale must be positive, got {s}")));
        }
    }
    for &r in ratios {
        if !r.is_finite() || r <= 0.0 {
            return Err(Error::InvalidArgument(format!("aspect ratio must be positive, got {r}")));
        }
    }

    let cells_x = image_width.div_ceil(stride) as usize;
    let cells_y = image_height.div_ceil(stride) as usize;
    let mut anchors = Vec::with_capacity(cells_x * cells_y * scales.len() * ratios.len());
    for j in 0..cells_y {
        for i in 0..cells_x {
            let cx = (i as f64 + 0.5) * stride as f64;
            let cy = (j as f64 + 0.5) * stride as f64;
            for &s in scales {
                for &r in ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    anchors.push(BBox::from_center(cx, cy, w, h)?);
                }
            }
        }
    }
    Ok(AnchorGrid {
        image_width,
        image_height,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        cells_x,
        cells_y,
        anchors,
    })
}

/// Training label of an anchor or proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Foreground,
    Background,
    /// Excluded from the objectness loss entirely.
    Ignore,
}

/// The assignment of one anchor (or proposal) to the training targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetAssignment {
    pub anchor_index: usize,
    pub label: AnchorLabel,
    /// Index of the matched ground-truth box, for foreground entries.
    pub matched_gt: Option<usize>,
    /// Regression target carrying the anchor onto its matched box.
    pub deltas: Option<BoxDelta>,
    /// Class of the matched box; populated by the second-stage assignment,
    /// `None` for the class-agnostic first stage.
    pub class_id: Option<UlcerClass>,
}

impl TargetAssignment {
    fn unmatched(anchor_index: usize, label: AnchorLabel) -> TargetAssignment {
        TargetAssignment { anchor_index, label, matched_gt: None, deltas: None, class_id: None }
    }
}

/// IoU bands used by the first-stage assignment: foreground strictly above
/// `fg`, background strictly below `bg`, ignore in the closed band between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnThresholds {
    pub fg: f64,
    pub bg: f64,
}

impl RpnThresholds {
    /// Default operating point.
    pub const DEFAULT: RpnThresholds = RpnThresholds { fg: 0.5, bg: 0.1 };
    /// Stricter alternative used for ablations.
    pub const ALTERNATE: RpnThresholds = RpnThresholds { fg: 0.7, bg: 0.3 };

    fn validate(&self) -> Result<()> {
        for (name, v) in [("fg", self.fg), ("bg", self.bg)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} threshold must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.bg >= self.fg {
            return Err(Error::InvalidArgument(format!(
                "background threshold {} must be below foreground threshold {}",
                self.bg, self.fg
            )));
        }
        Ok(())
    }
}

/// First-stage (class-agnostic) target assignment.
///
/// Each anchor is labelled by its best IoU against the ground-truth boxes
/// (ties broken towards the lower box index): above `thresholds.fg` it is
/// foreground and receives the regression deltas onto its best box, below
/// `thresholds.bg` it is background, anything in between is ignored.  With
/// `exclude_outside`, anchors that poke past the image border are ignored
/// outright and take no further part.
///
/// A forcing pass then guarantees coverage: every ground-truth box that
/// overlaps at least one eligible anchor ends up with at least one
/// foreground anchor — its highest-IoU anchor is promoted even when the
/// overlap sits below the foreground band.  Promotion prefers anchors not
/// already serving another box; when every overlapping anchor is taken,
/// the pass claims the best one and re-places the dispossessed box by the
/// same rule (recursively, never revisiting an anchor), so a box goes
/// uncovered only when the overlap structure genuinely cannot cover all
/// boxes at once.
pub fn assign_rpn_targets(
    anchors: &[BBox],
    gts: &[LabeledBox],
    image_width: f64,
    image_height: f64,
    thresholds: RpnThresholds,
    exclude_outside: bool,
) -> Result<Vec<TargetAssignment>> {
    thresholds.validate()?;
    let excluded: Vec<bool> = anchors
        .iter()
        .map(|a| exclude_outside && !a.is_inside_image(image_width, image_height))
        .collect();

    let mut out = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        if excluded[i] {
            out.push(TargetAssignment::unmatched(i, AnchorLabel::Ignore));
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, &gt.bbox);
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        let (max_iou, best_gt) = best.unwrap_or((0.0, 0));
        let assignment = if max_iou > thresholds.fg {
            TargetAssignment {
                anchor_index: i,
                label: AnchorLabel::Foreground,
                matched_gt: Some(best_gt),
                deltas: Some(encode_deltas(anchor, &gts[best_gt].bbox)?),
                class_id: None,
            }
        } else if max_iou < thresholds.bg {
            TargetAssignment::unmatched(i, AnchorLabel::Background)
        } else {
            TargetAssignment::unmatched(i, AnchorLabel::Ignore)
        };
        out.push(assignment);
    }

    // Forcing pass: each box lacking a foreground anchor claims one via
    // `force_place`, which prefers free anchors and re-places dispossessed
    // boxes when it has to steal.
    for g in 0..gts.len() {
        let covered = out
            .iter()
            .any(|a| a.label == AnchorLabel::Foreground && a.matched_gt == Some(g));
        if !covered {
            let mut visited = vec![false; anchors.len()];
            force_place(g, anchors, gts, &excluded, &mut out, &mut visited)?;
        }
    }

    Ok(out)
}

/// Overlapping eligible anchors for one box, best first (IoU descending,
/// ties towards the lower anchor index).
fn forcing_candidates(
    anchors: &[BBox],
    excluded: &[bool],
    gt: &LabeledBox,
) -> Vec<(f64, usize)> {
    let mut candidates: Vec<(f64, usize)> = anchors
        .iter()
        .enumerate()
        .filter(|&(i, _)| !excluded[i])
        .filter_map(|(i, a)| {
            let v = iou(a, &gt.bbox);
            (v > 0.0).then_some((v, i))
        })
        .collect();
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    candidates
}

/// Claims a foreground anchor for box `g`: the best free overlapping anchor
/// if one exists, otherwise the best taken one whose previous owner can be
/// re-placed the same way.  `visited` guards each anchor against being
/// contested twice within one claim, which bounds the recursion; a `false`
/// return means the overlap structure cannot cover `g` without uncovering
/// someone else.
fn force_place(
    g: usize,
    anchors: &[BBox],
    gts: &[LabeledBox],
    excluded: &[bool],
    out: &mut [TargetAssignment],
    visited: &mut [bool],
) -> Result<bool> {
    let candidates = forcing_candidates(anchors, excluded, &gts[g]);
    for &(_, i) in &candidates {
        if !visited[i] && out[i].label != AnchorLabel::Foreground {
            visited[i] = true;
            out[i] = TargetAssignment {
                anchor_index: i,
                label: AnchorLabel::Foreground,
                matched_gt: Some(g),
                deltas: Some(encode_deltas(&anchors[i], &gts[g].bbox)?),
                class_id: None,
            };
            return Ok(true);
        }
    }
    for &(_, i) in &candidates {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let previous = out[i];
        let owner = previous.matched_gt.expect("foreground anchors carry their box");
        out[i] = TargetAssignment {
            anchor_index: i,
            label: AnchorLabel::Foreground,
            matched_gt: Some(g),
            deltas: Some(encode_deltas(&anchors[i], &gts[g].bbox)?),
            class_id: None,
        };
        let owner_still_covered = out
            .iter()
            .any(|a| a.label == AnchorLabel::Foreground && a.matched_gt == Some(owner));
        if owner_still_covered || force_place(owner, anchors, gts, excluded, out, visited)? {
            return Ok(true);
        }
        out[i] = previous;
    }
    Ok(false)
}

/// Draws a balanced objectness minibatch from an assignment.
///
/// Up to `floor(batch_size * fg_fraction)` foreground entries are sampled
/// uniformly without replacement; the remainder of the batch is filled with
/// background entries (again without replacement).  When either pool is too
/// small the batch simply comes out smaller on that side.  Sampling is
/// driven by a counter-based generator, so equal seeds give equal batches on
/// every platform.  Returns the selected `anchor_index` values in ascending
/// order, with a warning when no foreground was available at all.
pub fn sample_minibatch(
    assignments: &[TargetAssignment],
    batch_size: usize,
    fg_fraction: f64,
    seed: u64,
) -> Result<Warned<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !fg_fraction.is_finite() || !(0.0..=1.0).contains(&fg_fraction) {
        return Err(Error::InvalidArgument(format!(
            "foreground fraction must lie in [0, 1], got {fg_fraction}"
        )));
    }
    let mut fg: Vec<usize> = assignments
        .iter()
        .filter(|a| a.label == AnchorLabel::Foreground)
        .map(|a| a.anchor_index)
        .collect();
    let mut bg: Vec<usize> = assignments
        .iter()
        .filter(|a| a.label == AnchorLabel::Background)
        .map(|a| a.anchor_index)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fg.shuffle(&mut rng);
    bg.shuffle(&mut rng);

    let fg_quota = (batch_size as f64 * fg_fraction).floor() as usize;
    let n_fg = fg.len().min(fg_quota);
    let n_bg = bg.len().min(batch_size - n_fg);

    let mut warnings = Vec::new();
    if n_fg == 0 {
        warnings.push("no foreground anchors available; sampled an all-background batch".into());
    }

    let mut picked: Vec<usize> = fg[..n_fg].iter().chain(&bg[..n_bg]).copied().collect();
    picked.sort_unstable();
    Ok(Warned::new(picked, warnings))
}

/// Second-stage target assignment for region proposals.
///
/// Each proposal is labelled by its best IoU against the ground truth (ties
/// towards the lower box index): strictly above `0.5` it is foreground and
/// receives the matched box's class and regression deltas; within
/// `[0.1, 0.5]` it is background (the classifier's class `0`); below `0.1`
/// it is ignored as an uninformative easy negative.  A proposal at exactly
/// the foreground threshold therefore falls to background.
pub fn assign_proposal_targets(
    proposals: &[BBox],
    gts: &[LabeledBox],
) -> Result<Vec<TargetAssignment>> {
    const FG: f64 = 0.5;
    const BG_LO: f64 = 0.1;
    let mut out = Vec::with_capacity(proposals.len());
    for (i, proposal) in proposals.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(proposal, &gt.bbox);
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        let (max_iou, best_gt) = best.unwrap_or((0.0, 0));
        let assignment = if max_iou > FG {
            TargetAssignment {
                anchor_index: i,
                label: AnchorLabel::Foreground,
                matched_gt: Some(best_gt),
                deltas: Some(encode_deltas(proposal, &gts[best_gt].bbox)?),
                class_id: Some(gts[best_gt].class_id),
            }
        } else if max_iou >= BG_LO {
            TargetAssignment::unmatched(i, AnchorLabel::Background)
        } else {
            TargetAssignment::unmatched(i, AnchorLabel::Ignore)
        };
        out.push(assignment);
    }
    Ok(out)
}

/// A dense `width x height x channels` grid of feature values, stored
/// row-major with channels interleaved.  All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    fn validate_dims(width: usize, height: usize, channels: usize) -> Result<()> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature grid extent must be positive, got {width} x {height} x {channels}"
            )));
        }
        Ok(())
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<FeatureGrid> {
        FeatureGrid::validate_dims(width, height, channels)?;
        Ok(FeatureGrid { width, height, channels, values: vec![0.0; width * height * channels] })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<FeatureGrid> {
        FeatureGrid::from_fn(width, height, channels, |_, _, _| value)
    }

    /// Fills the grid from `f(x, y, channel)`; every produced value must be
    /// finite.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<FeatureGrid> {
        FeatureGrid::validate_dims(width, height, channels)?;
        let mut values = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    if !v.is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "feature value at ({x}, {y}, {c}) is not finite: {v}"
                        )));
                    }
                    values.push(v);
                }
            }
        }
        Ok(FeatureGrid { width, height, channels, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        assert!(x < self.width && y < self.height && c < self.channels, "feature index out of bounds");
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear interpolation at a continuous grid position, where cell
    /// `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.  Positions beyond
    /// the outermost centres clamp to the border value.
    fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
        let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Crops a proposal out of a feature grid and max-pools it to a fixed size.
///
/// The proposal (image coordinates) is mapped onto the grid by dividing
/// through `stride`; a `crop_size x crop_size` patch is then sampled
/// bilinearly at the centres of a regular subdivision of the mapped
/// rectangle, and `pool_size x pool_size` blocks are max-pooled, yielding a
/// `(crop_size / pool_size)^2` grid with the channel count preserved.
/// `crop_size` must be a multiple of `pool_size`, and the mapped proposal
/// must overlap the grid.
pub fn roi_crop_pool(
    features: &FeatureGrid,
    proposal: &BBox,
    stride: f64,
    crop_size: usize,
    pool_size: usize,
) -> Result<FeatureGrid> {
    if !stride.is_finite() || stride <= 0.0 {
        return Err(Error::InvalidArgument(format!("stride must be positive, got {stride}")));
    }
    if crop_size == 0 || pool_size == 0 || !crop_size.is_multiple_of(pool_size) {
        return Err(Error::InvalidArgument(format!(
            "crop size {crop_size} must be a positive multiple of pool size {pool_size}"
        )));
    }
    let fx1 = proposal.xmin / stride;
    let fy1 = proposal.ymin / stride;
    let fx2 = proposal.xmax / stride;
    let fy2 = proposal.ymax / stride;
    let (w, h) = (features.width() as f64, features.height() as f64);
    if fx2 <= 0.0 || fy2 <= 0.0 || fx1 >= w || fy1 >= h {
        return Err(Error::InvalidArgument(
            "proposal lies entirely outside the feature grid".into(),
        ));
    }

    let crop = FeatureGrid::from_fn(crop_size, crop_size, features.channels(), |x, y, c| {
        let sx = fx1 + (x as f64 + 0.5) * (fx2 - fx1) / crop_size as f64;
        let sy = fy1 + (y as f64 + 0.5) * (fy2 - fy1) / crop_size as f64;
        features.sample_bilinear(sx, sy, c)
    })?;

    let out_size = crop_size / pool_size;
    FeatureGrid::from_fn(out_size, out_size, features.channels(), |x, y, c| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..pool_size {
            for dx in 0..pool_size {
                m = m.max(crop.get(x * pool_size + dx, y * pool_size + dy, c));
            }
        }
        m
    })
}
