//! Text renderers for evaluation reports: an aligned console table, a
//! machine-readable CSV, and one-report-per-line JSON.  All three are
//! byte-deterministic for equal input.

use std::fmt::Write as _;

use crate::classes::UlcerClass;
use crate::error::Result;
use crate::eval::EvalReport;

/// Renders one report as an aligned plain-text table.  Classes appear in
/// clinical reading order with four-decimal metric cells, followed by the
/// mean row over supported classes and a false-positive footer.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Inference results  IoU@{:.2}  CS@{:.2}",
        report.iou_threshold, report.confidence_threshold
    );
    let _ = writeln!(
        out,
        "{:<14} {:>10} {:>10} {:>10} {:>8}",
        "Class", "Precision", "Recall", "F1-score", "Support"
    );
    for &class in &UlcerClass::TABLE_ORDER {
        let m = &report.per_class[class.index()];
        let _ = writeln!(
            out,
            "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>8}",
            m.class.name(),
            m.precision,
            m.recall,
            m.f1,
            m.support
        );
    }
    let avg = &report.mean_average;
    let _ = writeln!(
        out,
        "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>8.1}",
        "Mean Average", avg.precision, avg.recall, avg.f1, avg.support
    );
    let _ = writeln!(
        out,
        "False positives: {} total, {} outside IoU@{:.2}",
        report.total_false_positives, report.fp_outside_iou, report.iou_threshold
    );
    out
}

/// Renders one report as CSV: one row per class in clinical reading order,
/// then a `MeanAverage` summary row.  Numbers use the shortest exact decimal
/// form so the file round-trips bit-for-bit.
pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "class,precision,recall,f1,support,tp,fp,fn,fp_outside,iou_threshold,confidence_threshold\n",
    );
    for &class in &UlcerClass::TABLE_ORDER {
        let m = &report.per_class[class.index()];
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.class.name(),
            m.precision,
            m.recall,
            m.f1,
            m.support,
            m.tp,
            m.fp,
            m.fn_count,
            m.fp_outside,
            report.iou_threshold,
            report.confidence_threshold
        );
    }
    let avg = &report.mean_average;
    let _ = writeln!(
        out,
        "MeanAverage,{},{},{},{},{},{},{},{},{},{}",
        avg.precision,
        avg.recall,
        avg.f1,
        avg.support,
        report.total_true_positives,
        report.total_false_positives,
        report.total_false_negatives,
        report.fp_outside_iou,
        report.iou_threshold,
        report.confidence_threshold
    );
    out
}

/// Renders a batch of reports as JSON Lines: one compact JSON object per
/// report, newline-terminated, in input order.
pub fn render_jsonl(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::new();
    for report in reports {
        out.push_str(&serde_json::to_string(report)?);
        out.push('\n');
    }
    Ok(out)
}
