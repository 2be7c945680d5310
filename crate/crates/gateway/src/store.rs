//! Append-only submission storage: one JSON object per line, fsynced before
//! the caller sees an acknowledgement, replayed in full on startup.  The log
//! file is the single source of truth; everything in memory is an index
//! over it.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use puw_core::classes::UlcerClass;
use puw_core::error::{Error, Result};
use puw_core::geometry::{BBox, Detection};

/// One detection as it travels over the wire and rests in the log.  The
/// class is stored in canonical spelling so that equal payloads hash equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class: String,
    pub confidence: f64,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// One accepted submission, exactly as persisted: identity, receipt time,
/// the content fingerprint used for idempotent retries, and the detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSubmission {
    pub submission_id: String,
    pub image_id: String,
    pub received_at: String,
    #[serde(default)]
    pub submitter: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_key: Option<String>,
    #[serde(default)]
    pub no_finding: bool,
    pub fingerprint: String,
    pub detections: Vec<WireDetection>,
}

/// Content hash of a submission, over everything the client controls:
/// image, submitter, the no-finding flag and the detections (canonical
/// class spelling, exact float values).  Receipt time, id and the dedup key
/// itself stay out, so a retry of the same payload hashes identically.
pub fn fingerprint(
    image_id: &str,
    submitter: &str,
    no_finding: bool,
    detections: &[WireDetection],
) -> String {
    #[derive(Serialize)]
    struct Normalized<'a> {
        image_id: &'a str,
        submitter: &'a str,
        no_finding: bool,
        detections: &'a [WireDetection],
    }
    let json = serde_json::to_string(&Normalized { image_id, submitter, no_finding, detections })
        .expect("normalized payload serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The append-only submission log plus its in-memory indexes.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    file: File,
    entries: Vec<StoredSubmission>,
    dedup: HashMap<String, usize>,
}

impl Store {
    /// Opens (or creates) the log at `path` and replays every line.  A line
    /// that fails to parse, a duplicate submission id, or a duplicate dedup
    /// key make the whole open fail — a damaged log must be repaired by a
    /// human, not skipped over.
    pub fn open(path: impl AsRef<Path>) -> Result<Store> {
        let path = path.as_ref().to_path_buf();
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };

        let mut entries: Vec<StoredSubmission> = Vec::new();
        let mut dedup = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoredSubmission = serde_json::from_str(line).map_err(|e| {
                Error::Parse(format!(
                    "submission log {}: line {} is not a valid entry: {e}",
                    path.display(),
                    i + 1
                ))
            })?;
            if entries.iter().any(|s| s.submission_id == entry.submission_id) {
                return Err(Error::Parse(format!(
                    "submission log {}: line {} repeats submission id {:?}",
                    path.display(),
                    i + 1,
                    entry.submission_id
                )));
            }
            if let Some(key) = &entry.dedup_key {
                if dedup.insert(key.clone(), entries.len()).is_some() {
                    return Err(Error::Parse(format!(
                        "submission log {}: line {} repeats dedup key {:?}",
                        path.display(),
                        i + 1,
                        key
                    )));
                }
            }
            entries.push(entry);
        }

        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Store { path, file, entries, dedup })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoredSubmission] {
        &self.entries
    }

    /// The next sequential submission id.
    pub fn next_id(&self) -> String {
        format!("sub-{:08}", self.entries.len() + 1)
    }

    pub fn find_by_dedup_key(&self, key: &str) -> Option<&StoredSubmission> {
        self.dedup.get(key).map(|&i| &self.entries[i])
    }

    /// Appends one entry durably: the line is written and fsynced before
    /// this returns, so an acknowledged submission survives a crash.
    pub fn append(&mut self, entry: StoredSubmission) -> Result<()> {
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_all()?;
        if let Some(key) = &entry.dedup_key {
            self.dedup.insert(key.clone(), self.entries.len());
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Flattens the whole store into evaluator detections, in append order.
    pub fn all_detections(&self) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for entry in &self.entries {
            for d in &entry.detections {
                let class: UlcerClass = d.class.parse()?;
                let bbox = BBox::new(d.xmin, d.ymin, d.xmax, d.ymax)?;
                out.push(Detection::new(&entry.image_id, class, d.confidence, bbox)?);
            }
        }
        Ok(out)
    }
}

/// Reads a submission log without keeping an append handle — the read-only
/// path used by offline exports.
pub fn load_store_entries(path: impl AsRef<Path>) -> Result<Vec<StoredSubmission>> {
    let store = Store::open(path)?;
    Ok(store.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_detection() -> WireDetection {
        WireDetection {
            class: "CategoryII".into(),
            confidence: 0.9,
            xmin: 10.0,
            ymin: 20.0,
            xmax: 110.0,
            ymax: 220.0,
        }
    }

    fn sample_entry(id: &str, key: Option<&str>) -> StoredSubmission {
        let detections = vec![sample_detection()];
        StoredSubmission {
            submission_id: id.into(),
            image_id: "img-1".into(),
            received_at: "2026-08-15T00:00:00Z".into(),
            submitter: "tester".into(),
            dedup_key: key.map(String::from),
            no_finding: false,
            fingerprint: fingerprint("img-1", "tester", false, &detections),
            detections,
        }
    }

    #[test]
    fn append_then_reopen_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let mut store = Store::open(&path).unwrap();
            assert!(store.is_empty());
            assert_eq!(store.next_id(), "sub-00000001");
            store.append(sample_entry("sub-00000001", Some("k1"))).unwrap();
            store.append(sample_entry("sub-00000002", None)).unwrap();
            assert_eq!(store.next_id(), "sub-00000003");
        }
        let store = Store::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.entries()[0].submission_id, "sub-00000001");
        assert_eq!(store.find_by_dedup_key("k1").unwrap().submission_id, "sub-00000001");
        assert!(store.find_by_dedup_key("k2").is_none());
        assert_eq!(store.next_id(), "sub-00000003");
    }

    #[test]
    fn corrupt_line_fails_the_open_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut store = Store::open(&path).unwrap();
        store.append(sample_entry("sub-00000001", None)).unwrap();
        drop(store);
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{ not json\n")
            .unwrap();
        let err = Store::open(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_ids_fail_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let entry = serde_json::to_string(&sample_entry("sub-00000001", None)).unwrap();
        std::fs::write(&path, format!("{entry}\n{entry}\n")).unwrap();
        let err = Store::open(&path).unwrap_err();
        assert!(err.to_string().contains("repeats submission id"), "{err}");
    }

    #[test]
    fn fingerprint_ignores_receipt_metadata_but_not_content() {
        let dets = vec![sample_detection()];
        let a = fingerprint("img-1", "tester", false, &dets);
        assert_eq!(a, fingerprint("img-1", "tester", false, &dets), "deterministic");
        assert_ne!(a, fingerprint("img-2", "tester", false, &dets));
        assert_ne!(a, fingerprint("img-1", "other", false, &dets));
        assert_ne!(a, fingerprint("img-1", "tester", true, &[]));
        let mut moved = dets.clone();
        moved[0].xmin += 1.0;
        assert_ne!(a, fingerprint("img-1", "tester", false, &moved));
        assert_eq!(a.len(), 64, "hex sha-256");
    }

    #[test]
    fn detections_flatten_in_append_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path().join("s.jsonl")).unwrap();
        store.append(sample_entry("sub-00000001", None)).unwrap();
        let mut second = sample_entry("sub-00000002", None);
        second.image_id = "img-2".into();
        second.detections[0].class = "DTI".into();
        store.append(second).unwrap();

        let dets = store.all_detections().unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].image_id, "img-1");
        assert_eq!(dets[1].image_id, "img-2");
        assert_eq!(dets[1].class_id, UlcerClass::Dti);
    }
}
