//! Detection interchange: a flat CSV format for model outputs, one detection
//! per row, safe to diff and to feed back into the evaluator.

use crate::classes::UlcerClass;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

/// Column order of the detection CSV format.
pub const DETECTION_HEADER: [&str; 7] =
    ["image_id", "class", "confidence", "xmin", "ymin", "xmax", "ymax"];

/// Parses detections from CSV text.  The header must match
/// [`DETECTION_HEADER`] exactly; class names are matched case-insensitively;
/// every numeric field must parse and satisfy the usual detection
/// invariants (finite confidence in `[0, 1]`, well-ordered box corners).
/// Errors carry 1-based row numbers counting the header as row 1.
pub fn parse_detections_csv(text: &str) -> Result<Vec<Detection>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());

    let headers = reader.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != DETECTION_HEADER {
        return Err(Error::Parse(format!(
            "detection CSV header mismatch: expected {:?}, found {:?}",
            DETECTION_HEADER.join(","),
            got.join(",")
        )));
    }

    let mut detections = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rowno = i + 2;
        let row = row?;
        let field = |idx: usize| -> &str { row.get(idx).unwrap_or("") };
        let number = |idx: usize| -> Result<f64> {
            field(idx).trim().parse::<f64>().map_err(|_| {
                Error::Parse(format!(
                    "row {rowno}: field {:?} is not a number: {:?}",
                    DETECTION_HEADER[idx],
                    field(idx)
                ))
            })
        };

        let image_id = field(0).trim();
        if image_id.is_empty() {
            return Err(Error::Parse(format!("row {rowno}: empty image_id")));
        }
        let class: UlcerClass = field(1).trim().parse()?;
        let confidence = number(2)?;
        let bbox = BBox::new(number(3)?, number(4)?, number(5)?, number(6)?)
            .map_err(|e| Error::Parse(format!("row {rowno}: {e}")))?;
        let det = Detection::new(image_id, class, confidence, bbox)
            .map_err(|e| Error::Parse(format!("row {rowno}: {e}")))?;
        detections.push(det);
    }
    Ok(detections)
}

/// Renders detections as CSV in input order, using the shortest exact
/// decimal form for every number so the file round-trips bit-for-bit.
pub fn detections_to_csv(detections: &[Detection]) -> String {
    let mut out = DETECTION_HEADER.join(",");
    out.push('\n');
    for d in detections {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.image_id,
            d.class_id.name(),
            d.confidence,
            d.bbox.xmin,
            d.bbox.ymin,
            d.bbox.xmax,
            d.bbox.ymax
        ));
    }
    out
}
