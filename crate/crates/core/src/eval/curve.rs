//! Precision–recall curves: one point per distinct confidence cutoff, the
//! monotone precision envelope, and the area under it.

use serde::Serialize;

use crate::classes::UlcerClass;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::eval::ap::ranked_outcomes;
use crate::geometry::Detection;

/// One operating point of the curve: everything at or above `cutoff` kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PRPoint {
    pub cutoff: f64,
    pub recall: f64,
    pub precision: f64,
}

/// A per-class precision–recall curve at a fixed IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PRCurve {
    pub class: UlcerClass,
    pub iou_threshold: f64,
    /// Operating points in descending-cutoff order; recall is non-decreasing
    /// along the vector.
    pub points: Vec<PRPoint>,
    /// Area under the precision envelope, integrated over recall.
    pub auc: f64,
}

/// Sweeps the confidence cutoff through every distinct detection confidence
/// (descending) and records precision/recall at each, then integrates the
/// monotone envelope — the best precision achievable at or beyond each
/// recall — over recall.  A class without ground-truth support has no
/// defined recall and is an error; a class without detections yields an
/// empty curve with zero area.
pub fn pr_curve(
    records: &[ImageRecord],
    detections: &[Detection],
    class: UlcerClass,
    iou_threshold: f64,
) -> Result<PRCurve> {
    let (outcomes, gt_areas) = ranked_outcomes(records, detections, class, iou_threshold, None)?;
    let n_gt = gt_areas.len();
    if n_gt == 0 {
        return Err(Error::Empty(format!(
            "class {class} has no ground-truth boxes; its recall is undefined"
        )));
    }

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, outcome) in outcomes.iter().enumerate() {
        if outcome.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        // Emit a point only once the cutoff drops past this confidence,
        // i.e. at the last outcome of a run of equal confidences.
        let last_of_run = outcomes
            .get(i + 1)
            .is_none_or(|next| next.confidence != outcome.confidence);
        if last_of_run {
            points.push(PRPoint {
                cutoff: outcome.confidence,
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }

    // Monotone envelope over the points, then exact step integration:
    // between consecutive recalls the envelope is constant.
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for (point, env) in points.iter().zip(&envelope) {
        auc += (point.recall - prev_recall) * env;
        prev_recall = point.recall;
    }

    Ok(PRCurve { class, iou_threshold, points, auc })
}

/// Renders the curve as a two-column CSV of raw operating points.
pub fn curve_to_csv(curve: &PRCurve) -> String {
    let mut out = String::from("cutoff,recall,precision\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.cutoff, p.recall, p.precision));
    }
    out
}

/// Renders the curve as a self-contained SVG document: axes with 0.2-spaced
/// ticks, the stepped envelope polyline, raw operating points, and a caption
/// with the class name and area.  Output is deterministic for equal input.
pub fn curve_to_svg(curve: &PRCurve) -> String {
    const W: f64 = 640.0;
    const H: f64 = 520.0;
    const ML: f64 = 60.0; // left margin
    const MB: f64 = 50.0; // bottom margin
    const MT: f64 = 40.0;
    const MR: f64 = 20.0;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let x = |recall: f64| ML + recall * plot_w;
    let y = |precision: f64| MT + (1.0 - precision) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"16\">\
         {} IoU@{:.2} AUC={:.4}</text>\n",
        ML,
        MT - 14.0,
        curve.class,
        curve.iou_threshold,
        curve.auc
    ));

    // Axes and ticks.
    svg.push_str(&format!(
        "  <line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MT + plot_h,
        ML + plot_w,
        MT + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MT + plot_h
    ));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            x(v),
            MT + plot_h,
            x(v),
            MT + plot_h + 6.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" \
             text-anchor=\"middle\">{v:.1}</text>\n",
            x(v),
            MT + plot_h + 20.0
        ));
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            ML - 6.0,
            y(v),
            y(v)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" \
             text-anchor=\"end\">{v:.1}</text>\n",
            ML - 10.0,
            y(v) + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">Recall</text>\n",
        ML + plot_w / 2.0,
        H - 10.0
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">Precision</text>\n",
        MT + plot_h / 2.0,
        MT + plot_h / 2.0
    ));

    // Stepped envelope path.
    if !curve.points.is_empty() {
        let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
        for i in (0..envelope.len() - 1).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut d = format!("M {:.2} {:.2}", x(0.0), y(envelope[0]));
        let mut prev_env = envelope[0];
        for (p, &env) in curve.points.iter().zip(&envelope) {
            if env != prev_env {
                d.push_str(&format!(" L {:.2} {:.2}", x(p.recall), y(prev_env)));
                d.push_str(&format!(" L {:.2} {:.2}", x(p.recall), y(env)));
                prev_env = env;
            } else {
                d.push_str(&format!(" L {:.2} {:.2}", x(p.recall), y(env)));
            }
        }
        svg.push_str(&format!(
            "  <path d=\"{d}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
        ));
        for p in &curve.points {
            svg.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#d62728\"/>\n",
                x(p.recall),
                y(p.precision)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
