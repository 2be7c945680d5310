//! Dataset handling: annotated image records, manifests, deterministic
//! splits, and the parsers/transforms that feed them.

pub mod canonical;
pub mod parse;
pub mod transform;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::ClassHistogram;
use crate::error::{Error, Result};
use crate::geometry::LabeledBox;

pub use canonical::{from_canonical, to_canonical};
pub use parse::{parse_labelme, parse_voc};
pub use transform::{
    augment, crop_window, letterbox_resize, Affine, AugmentOp, AugmentOptions, AugmentRanges,
    LetterboxTransform,
};

/// Which collection an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Medetec,
    Web,
    Trial,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Medetec => "medetec",
            Provenance::Web => "web",
            Provenance::Trial => "trial",
        };
        f.write_str(s)
    }
}

/// Side of a train/validation split a manifest belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

/// One annotated image: identity, pixel extent, provenance and its boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub source_path: String,
    pub width: u32,
    pub height: u32,
    pub provenance: Provenance,
    #[serde(default)]
    pub annotations: Vec<LabeledBox>,
}

impl ImageRecord {
    /// Checks the structural invariants: positive extent, non-empty id, and
    /// every annotation inside the image bounds.
    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::Parse("image id must not be empty".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parse(format!(
                "image {:?} has empty extent {} x {}",
                self.image_id, self.width, self.height
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, ann) in self.annotations.iter().enumerate() {
            let b = &ann.bbox;
            if b.xmin >= b.xmax || b.ymin >= b.ymax {
                return Err(Error::InvalidBox(format!(
                    "annotation {i} of image {:?} is degenerate",
                    self.image_id
                )));
            }
            if !b.is_inside_image(w, h) {
                return Err(Error::InvalidBox(format!(
                    "annotation {i} of image {:?} exceeds the image bounds",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Counts annotations per class over a set of records.
pub fn class_histogram(records: &[ImageRecord]) -> ClassHistogram {
    let mut hist = ClassHistogram::new();
    for record in records {
        for ann in &record.annotations {
            hist.add(ann.class_id);
        }
    }
    hist
}

/// An ordered, validated collection of image records.
///
/// Records are kept sorted by `image_id`, ids are unique, and every record
/// satisfies [`ImageRecord::validate`].  The on-disk form is JSON lines, one
/// record per line; derived quantities such as the class histogram are
/// always recomputed from the records rather than stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    split_tag: Option<SplitTag>,
}

impl DatasetManifest {
    /// Builds a manifest, sorting by image id and rejecting duplicates and
    /// invalid records.
    pub fn new(mut records: Vec<ImageRecord>) -> Result<DatasetManifest> {
        let mut seen = HashSet::new();
        for record in &records {
            record.validate()?;
            if !seen.insert(record.image_id.clone()) {
                return Err(Error::Parse(format!(
                    "duplicate image id {:?} in manifest",
                    record.image_id
                )));
            }
        }
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(DatasetManifest { records, split_tag: None })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_tag(&self) -> Option<SplitTag> {
        self.split_tag
    }

    pub fn class_histogram(&self) -> ClassHistogram {
        class_histogram(&self.records)
    }

    /// Serialises to JSON lines (one record per line, trailing newline).
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON lines produced by [`DatasetManifest::to_jsonl`].  Blank
    /// lines are permitted; anything else must be a record object.
    pub fn from_jsonl(text: &str) -> Result<DatasetManifest> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ImageRecord = serde_json::from_str(line).map_err(|e| {
                Error::Parse(format!("manifest line {}: {e}", lineno + 1))
            })?;
            records.push(record);
        }
        DatasetManifest::new(records)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_jsonl()?)?)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        DatasetManifest::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// Splits a manifest into train and validation parts.
///
/// Records are shuffled with a counter-based generator seeded by `seed`
/// (identical seeds give identical splits on every platform), then the first
/// `round-or-ceil(train_fraction * n)` go to the train side, clamped so both
/// sides keep at least one record.  The rounding snaps products that are
/// within floating-point noise of an integer (`0.9 * 10` is exactly `9`) and
/// otherwise rounds up, so a 90 % split of 4291 records yields 3862 + 429.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let n = manifest.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 records to split, got {n}"
        )));
    }
    if !train_fraction.is_finite() || !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let raw = train_fraction * n as f64;
    let snapped = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    let train_n = (snapped as usize).clamp(1, n - 1);

    let mut train_records = Vec::with_capacity(train_n);
    let mut val_records = Vec::with_capacity(n - train_n);
    for (pos, &idx) in order.iter().enumerate() {
        let record = manifest.records[idx].clone();
        if pos < train_n {
            train_records.push(record);
        } else {
            val_records.push(record);
        }
    }
    let mut train = DatasetManifest::new(train_records)?;
    train.split_tag = Some(SplitTag::Train);
    let mut val = DatasetManifest::new(val_records)?;
    val.split_tag = Some(SplitTag::Val);
    Ok((train, val))
}


#[cfg(test)]
mod tests {
    use super::testutil::record;
    use super::*;
    use crate::classes::UlcerClass;

    #[test]
    fn record_validation() {
        assert!(record("a", 100, 100, &[(UlcerClass::CategoryI, 0.0, 0.0, 100.0, 100.0)])
            .validate()
            .is_ok());
        let mut bad = record("a", 100, 100, &[(UlcerClass::CategoryI, 0.0, 0.0, 100.0, 100.0)]);
        bad.annotations[0].bbox.xmax = 101.0;
        assert!(bad.validate().is_err());
        bad.annotations[0].bbox.xmax = 0.0;
        assert!(bad.validate().is_err());
        let empty_id = ImageRecord { image_id: String::new(), ..record("a", 10, 10, &[]) };
        assert!(empty_id.validate().is_err());
    }

    #[test]
    fn manifest_sorts_and_rejects_duplicates() {
        let manifest = DatasetManifest::new(vec![
            record("b", 10, 10, &[]),
            record("a", 10, 10, &[]),
        ])
        .unwrap();
        let ids: Vec<&str> = manifest.records().iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);

        let dup = DatasetManifest::new(vec![record("a", 10, 10, &[]), record("a", 20, 20, &[])]);
        assert!(dup.is_err());
    }

    #[test]
    fn histogram_counts_across_records() {
        let records = vec![
            record("a", 100, 100, &[
                (UlcerClass::CategoryII, 0.0, 0.0, 10.0, 10.0),
                (UlcerClass::CategoryII, 20.0, 20.0, 30.0, 30.0),
            ]),
            record("b", 100, 100, &[(UlcerClass::Dti, 0.0, 0.0, 10.0, 10.0)]),
            record("c", 100, 100, &[]),
        ];
        let hist = class_histogram(&records);
        assert_eq!(hist.get(UlcerClass::CategoryII), 2);
        assert_eq!(hist.get(UlcerClass::Dti), 1);
        assert_eq!(hist.total(), 3);
    }

    #[test]
    fn histogram_is_order_invariant() {
        let mut records = vec![
            record("a", 100, 100, &[(UlcerClass::CategoryI, 0.0, 0.0, 10.0, 10.0)]),
            record("b", 100, 100, &[(UlcerClass::Unstageable, 0.0, 0.0, 10.0, 10.0)]),
            record("c", 100, 100, &[(UlcerClass::CategoryIV, 0.0, 0.0, 10.0, 10.0)]),
        ];
        let forward = class_histogram(&records);
        records.reverse();
        assert_eq!(class_histogram(&records), forward);
    }

    #[test]
    fn jsonl_round_trip() {
        let manifest = DatasetManifest::new(vec![
            record("x1", 640, 480, &[(UlcerClass::CategoryIII, 10.0, 20.0, 110.0, 220.0)]),
            record("x2", 1024, 1024, &[]),
        ])
        .unwrap();
        let text = manifest.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = DatasetManifest::from_jsonl(&text).unwrap();
        assert_eq!(back, manifest);
        // Histograms are recomputed, never stored.
        assert!(!text.contains("histogram"));
    }

    #[test]
    fn jsonl_rejects_garbage_with_line_number() {
        let err = DatasetManifest::from_jsonl("{\"nope\": true}\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn split_matches_documented_arithmetic() {
        let records: Vec<ImageRecord> =
            (0..4291).map(|i| record(&format!("img{i:05}"), 10, 10, &[])).collect();
        let manifest = DatasetManifest::new(records).unwrap();
        let (train, val) = split(&manifest, 0.9, 1).unwrap();
        assert_eq!(train.len(), 3862);
        assert_eq!(val.len(), 429);
        assert_eq!(train.split_tag(), Some(SplitTag::Train));
        assert_eq!(val.split_tag(), Some(SplitTag::Val));
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let manifest =
            DatasetManifest::new(vec![record("a", 10, 10, &[]), record("b", 10, 10, &[])]).unwrap();
        let (train, val) = split(&manifest, 0.5, 0).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
        // Extreme fractions still leave one record on each side.
        let (train, val) = split(&manifest, 0.999, 0).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let records: Vec<ImageRecord> =
            (0..137).map(|i| record(&format!("r{i:03}"), 10, 10, &[])).collect();
        let manifest = DatasetManifest::new(records).unwrap();
        let (t1, v1) = split(&manifest, 0.8, 99).unwrap();
        let (t2, v2) = split(&manifest, 0.8, 99).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);

        let mut all: Vec<String> = t1
            .records()
            .iter()
            .chain(v1.records())
            .map(|r| r.image_id.clone())
            .collect();
        all.sort();
        let mut expected: Vec<String> =
            manifest.records().iter().map(|r| r.image_id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);

        let (t3, _) = split(&manifest, 0.8, 100).unwrap();
        assert_ne!(t1, t3, "different seeds should give different partitions");
    }

    #[test]
    fn split_validates_input() {
        let one = DatasetManifest::new(vec![record("a", 10, 10, &[])]).unwrap();
        assert!(split(&one, 0.5, 0).is_err());
        let two =
            DatasetManifest::new(vec![record("a", 10, 10, &[]), record("b", 10, 10, &[])]).unwrap();
        assert!(split(&two, 0.0, 0).is_err());
        assert!(split(&two, 1.0, 0).is_err());
        assert!(split(&two, f64::NAN, 0).is_err());
    }
}
