//! The canonical annotation table: a UTF-8, LF-terminated CSV with one row
//! per annotation and the fixed header
//! `filename,width,height,class,xmin,ymin,xmax,ymax`.
//!
//! The table is the lingua franca between ingestion and evaluation.  Images
//! without annotations have no rows and therefore do not survive a round
//! trip through this format; use the JSON-lines manifest when empty records
//! matter.

use std::collections::HashMap;

use crate::classes::UlcerClass;
use crate::dataset::parse::sanitize_box;
use crate::dataset::{ImageRecord, Provenance};
use crate::error::{Error, Result};
use crate::geometry::LabeledBox;
use crate::{Strictness, Warned};

pub const CANONICAL_HEADER: [&str; 8] =
    ["filename", "width", "height", "class", "xmin", "ymin", "xmax", "ymax"];

/// Renders records as the canonical CSV.  Rows follow record order, then
/// annotation order; coordinates use the shortest representation that
/// round-trips the exact `f64`.  An empty record set yields a header-only
/// table.
pub fn to_canonical(records: &[ImageRecord]) -> Result<String> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wtr.write_record(CANONICAL_HEADER)?;
    for record in records {
        for ann in &record.annotations {
            wtr.write_record([
                record.image_id.as_str(),
                &record.width.to_string(),
                &record.height.to_string(),
                ann.class_id.name(),
                &ann.bbox.xmin.to_string(),
                &ann.bbox.ymin.to_string(),
                &ann.bbox.xmax.to_string(),
                &ann.bbox.ymax.to_string(),
            ])?;
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Parse(format!("CSV writer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(format!("CSV is not UTF-8: {e}")))
}

/// Parses the canonical CSV back into records, grouped by filename in order
/// of first appearance.  Class names are matched case-insensitively; rows of
/// one file must agree on the image extent.  Box repairs follow the shared
/// [`Strictness`] policy.  The produced records carry `provenance` since the
/// table itself does not store one.
pub fn from_canonical(
    text: &str,
    provenance: Provenance,
    strictness: Strictness,
) -> Result<Warned<Vec<ImageRecord>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CANONICAL_HEADER {
        return Err(Error::Parse(format!(
            "unexpected header {:?}; the canonical table starts with {:?}",
            headers.iter().collect::<Vec<_>>().join(","),
            CANONICAL_HEADER.join(",")
        )));
    }

    let mut records: Vec<ImageRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();

    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let rowno = i + 2; // 1-based, after the header line
        let field = |k: usize| row.get(k).unwrap_or("");

        let filename = field(0).to_string();
        if filename.is_empty() {
            return Err(Error::Parse(format!("row {rowno}: filename is empty")));
        }
        let width: u32 = parse_field(field(1), "width", rowno)?;
        let height: u32 = parse_field(field(2), "height", rowno)?;
        if width == 0 || height == 0 {
            return Err(Error::Parse(format!(
                "row {rowno}: image extent {width} x {height} is empty"
            )));
        }
        let class: UlcerClass = field(3).parse()?;
        let raw = (
            parse_field::<f64>(field(4), "xmin", rowno)?,
            parse_field::<f64>(field(5), "ymin", rowno)?,
            parse_field::<f64>(field(6), "xmax", rowno)?,
            parse_field::<f64>(field(7), "ymax", rowno)?,
        );

        let slot = match index.get(&filename) {
            Some(&slot) => {
                let existing = &records[slot];
                if existing.width != width || existing.height != height {
                    return Err(Error::Parse(format!(
                        "row {rowno}: image {filename:?} re-declared as {width} x {height}, \
                         earlier rows said {} x {}",
                        existing.width, existing.height
                    )));
                }
                slot
            }
            None => {
                index.insert(filename.clone(), records.len());
                records.push(ImageRecord {
                    image_id: filename.clone(),
                    source_path: filename.clone(),
                    width,
                    height,
                    provenance,
                    annotations: Vec::new(),
                });
                records.len() - 1
            }
        };

        let context = format!("row {rowno} ({filename:?})");
        if let Some(bbox) =
            sanitize_box(raw, width as f64, height as f64, &context, strictness, &mut warnings)?
        {
            records[slot].annotations.push(LabeledBox::new(class, bbox));
        }
    }

    Ok(Warned::new(records, warnings))
}

fn parse_field<T: std::str::FromStr>(text: &str, what: &str, rowno: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.parse()
        .map_err(|e| Error::Parse(format!("row {rowno}: bad {what} {text:?}: {e}")))
}
