//! Machine-facing HTTP service around the evaluation core: clients submit
//! per-image detections, the service persists them append-only, and an
//! evaluation report over everything stored so far is available on demand.
//!
//! Two routes:
//!
//! * `POST /api/v1/detections` — validate and durably store one submission.
//! * `GET  /api/v1/reports?iou=&cs=` — evaluate the full store against the
//!   ground-truth manifest loaded at startup.
//!
//! The report body is rendered by the same serializer the command-line
//! `eval --format structured` uses, so online and offline evaluation of the
//! same data agree byte for byte.

pub mod store;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use puw_core::classes::UlcerClass;
use puw_core::dataset::ImageRecord;
use puw_core::error::Error as CoreError;
use puw_core::eval::{evaluate, render_jsonl, EvalReport};

pub use store::{fingerprint, load_store_entries, Store, StoredSubmission, WireDetection};

// ----------------------------------------------------------------- requests

/// Body of `POST /api/v1/detections`.
#[derive(Debug, Clone, Deserialize)]
pub struct SubmissionPayload {
    #[serde(default)]
    pub image_id: String,
    /// Opaque identity of the submitting client.
    #[serde(default)]
    pub submitter: String,
    /// Client-chosen idempotency key: resending the same payload under the
    /// same key returns the original id instead of storing a duplicate.
    #[serde(default)]
    pub dedup_key: Option<String>,
    /// Explicit claim that the image shows nothing to report.  Exactly one
    /// of `no_finding` and a non-empty `detections` list must hold.
    #[serde(default)]
    pub no_finding: bool,
    #[serde(default)]
    pub detections: Vec<SubmittedDetection>,
}

/// One detection inside a submission, before validation.
#[derive(Debug, Clone, Deserialize)]
pub struct SubmittedDetection {
    #[serde(default)]
    pub class: String,
    #[serde(default)]
    pub confidence: f64,
    #[serde(default)]
    pub xmin: f64,
    #[serde(default)]
    pub ymin: f64,
    #[serde(default)]
    pub xmax: f64,
    #[serde(default)]
    pub ymax: f64,
}

#[derive(Debug, Serialize)]
struct SubmissionReceipt {
    submission_id: String,
    received_at: String,
    /// Submissions stored after this request; unchanged on an idempotent
    /// replay.
    store_length: usize,
}

// ------------------------------------------------------------------- errors

/// One field that failed validation, with a JSON-path-ish locator such as
/// `detections[2].confidence`.
#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

enum ApiError {
    Validation(Vec<FieldError>),
    MalformedBody(String),
    DedupConflict { dedup_key: String, submission_id: String },
    BadThreshold(String),
    ManifestUnavailable,
    UnknownImage(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Validation(fields) => (
                StatusCode::BAD_REQUEST,
                serde_json::json!({ "error": "validation", "fields": fields }),
            ),
            ApiError::MalformedBody(message) => (
                StatusCode::BAD_REQUEST,
                serde_json::json!({ "error": "malformed_body", "message": message }),
            ),
            ApiError::DedupConflict { dedup_key, submission_id } => (
                StatusCode::CONFLICT,
                serde_json::json!({
                    "error": "dedup_conflict",
                    "message": format!(
                        "dedup key {dedup_key:?} was already used by {submission_id} \
                         with a different payload"
                    ),
                }),
            ),
            ApiError::BadThreshold(message) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                serde_json::json!({ "error": "bad_threshold", "message": message }),
            ),
            ApiError::ManifestUnavailable => (
                StatusCode::SERVICE_UNAVAILABLE,
                serde_json::json!({
                    "error": "manifest_unavailable",
                    "message": "no ground-truth manifest is loaded; reports cannot be produced",
                }),
            ),
            ApiError::UnknownImage(id) => (
                StatusCode::BAD_REQUEST,
                serde_json::json!({
                    "error": "unknown_image",
                    "message": format!(
                        "stored submissions reference image {id:?}, which the loaded \
                         manifest does not contain"
                    ),
                }),
            ),
            ApiError::Internal(message) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                serde_json::json!({ "error": "internal", "message": message }),
            ),
        };
        (status, Json(body)).into_response()
    }
}

// -------------------------------------------------------------------- state

/// A report as persisted to the report log: every served report is written
/// down once and never modified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredReport {
    pub report_id: String,
    pub iou: f64,
    pub cs: f64,
    pub created_at: String,
    pub report: EvalReport,
}

struct ReportLog {
    path: PathBuf,
    served: usize,
}

/// Shared service state: the ground truth (if loaded), the submission store
/// and the report log.  Both logs sit behind plain mutexes; handlers never
/// hold a lock across an await point.
pub struct AppState {
    manifest: Option<Vec<ImageRecord>>,
    store: Mutex<Store>,
    reports: Mutex<ReportLog>,
}

impl AppState {
    /// Opens (replaying) the submission store at `store_path`, prepares the
    /// sibling report log, and adopts the manifest.  A manifest without a
    /// single annotated box is rejected here rather than surfacing as a
    /// confusing per-request failure.
    pub fn new(
        manifest: Option<Vec<ImageRecord>>,
        store_path: impl AsRef<Path>,
    ) -> puw_core::Result<AppState> {
        if let Some(records) = &manifest {
            let boxes: usize = records.iter().map(|r| r.annotations.len()).sum();
            if boxes == 0 {
                return Err(CoreError::Empty(
                    "the ground-truth manifest contains no annotations; every report \
                     would be undefined"
                        .into(),
                ));
            }
        }
        let store = Store::open(store_path.as_ref())?;
        let reports_path = report_log_path(store_path.as_ref());
        let served = match std::fs::read_to_string(&reports_path) {
            Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).count(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        Ok(AppState {
            manifest,
            store: Mutex::new(store),
            reports: Mutex::new(ReportLog { path: reports_path, served }),
        })
    }
}

/// The report log lives next to the store: `store.jsonl` gets
/// `store.reports.jsonl`.
fn report_log_path(store_path: &Path) -> PathBuf {
    let stem = store_path.file_stem().and_then(|s| s.to_str()).unwrap_or("store");
    store_path.with_file_name(format!("{stem}.reports.jsonl"))
}

/// Builds the service router over shared state.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/detections", post(submit_detections))
        .route("/api/v1/reports", get(get_report))
        .with_state(state)
}

/// Serves the router on an already-bound listener until the task is dropped
/// or the connection loop fails.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

// ----------------------------------------------------------------- handlers

/// Validates the payload shape, returning either the canonicalized wire
/// detections or every field error found.
fn validate_payload(payload: &SubmissionPayload) -> Result<Vec<WireDetection>, Vec<FieldError>> {
    let mut errors = Vec::new();
    let fail = |errors: &mut Vec<FieldError>, field: &str, message: String| {
        errors.push(FieldError { field: field.to_string(), message });
    };

    if payload.image_id.is_empty() {
        fail(&mut errors, "image_id", "must not be empty".into());
    }
    if payload.no_finding && !payload.detections.is_empty() {
        fail(
            &mut errors,
            "detections",
            "must be empty when no_finding is set".into(),
        );
    }
    if !payload.no_finding && payload.detections.is_empty() {
        fail(
            &mut errors,
            "detections",
            "must contain at least one detection unless no_finding is set".into(),
        );
    }
    if let Some(key) = &payload.dedup_key {
        if key.is_empty() {
            fail(&mut errors, "dedup_key", "must not be empty when present".into());
        }
    }

    let mut wire = Vec::with_capacity(payload.detections.len());
    for (i, d) in payload.detections.iter().enumerate() {
        let class = match d.class.parse::<UlcerClass>() {
            Ok(class) => Some(class),
            Err(e) => {
                fail(&mut errors, &format!("detections[{i}].class"), e.to_string());
                None
            }
        };
        if !d.confidence.is_finite() || !(0.0..=1.0).contains(&d.confidence) {
            fail(
                &mut errors,
                &format!("detections[{i}].confidence"),
                format!("must lie in [0, 1], got {}", d.confidence),
            );
        }
        for (name, v) in [("xmin", d.xmin), ("ymin", d.ymin), ("xmax", d.xmax), ("ymax", d.ymax)]
        {
            if !v.is_finite() {
                fail(
                    &mut errors,
                    &format!("detections[{i}].{name}"),
                    format!("must be finite, got {v}"),
                );
            }
        }
        if d.xmin.is_finite() && d.xmax.is_finite() && d.xmin >= d.xmax {
            fail(
                &mut errors,
                &format!("detections[{i}].xmin"),
                format!("must be strictly below xmax, got [{}, {}]", d.xmin, d.xmax),
            );
        }
        if d.ymin.is_finite() && d.ymax.is_finite() && d.ymin >= d.ymax {
            fail(
                &mut errors,
                &format!("detections[{i}].ymin"),
                format!("must be strictly below ymax, got [{}, {}]", d.ymin, d.ymax),
            );
        }
        if let Some(class) = class {
            wire.push(WireDetection {
                class: class.name().to_string(),
                confidence: d.confidence,
                xmin: d.xmin,
                ymin: d.ymin,
                xmax: d.xmax,
                ymax: d.ymax,
            });
        }
    }

    if errors.is_empty() {
        Ok(wire)
    } else {
        Err(errors)
    }
}

async fn submit_detections(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<SubmissionPayload>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(payload) = payload.map_err(|e| ApiError::MalformedBody(e.body_text()))?;
    let detections = validate_payload(&payload).map_err(ApiError::Validation)?;
    let print = fingerprint(&payload.image_id, &payload.submitter, payload.no_finding, &detections);

    let mut store = state.store.lock().expect("store lock");
    if let Some(key) = &payload.dedup_key {
        if let Some(existing) = store.find_by_dedup_key(key) {
            if existing.fingerprint == print {
                let receipt = SubmissionReceipt {
                    submission_id: existing.submission_id.clone(),
                    received_at: existing.received_at.clone(),
                    store_length: store.len(),
                };
                return Ok((StatusCode::OK, Json(receipt)).into_response());
            }
            return Err(ApiError::DedupConflict {
                dedup_key: key.clone(),
                submission_id: existing.submission_id.clone(),
            });
        }
    }

    let entry = StoredSubmission {
        submission_id: store.next_id(),
        image_id: payload.image_id,
        received_at: Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true),
        submitter: payload.submitter,
        dedup_key: payload.dedup_key,
        no_finding: payload.no_finding,
        fingerprint: print,
        detections,
    };
    let receipt = SubmissionReceipt {
        submission_id: entry.submission_id.clone(),
        received_at: entry.received_at.clone(),
        store_length: store.len() + 1,
    };
    store.append(entry).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

#[derive(Deserialize)]
struct ReportQuery {
    iou: Option<String>,
    cs: Option<String>,
}

fn parse_threshold(name: &str, raw: &Option<String>, default: f64) -> Result<f64, ApiError> {
    let Some(raw) = raw else { return Ok(default) };
    let v: f64 = raw
        .parse()
        .map_err(|_| ApiError::BadThreshold(format!("{name} is not a number: {raw:?}")))?;
    if !v.is_finite() || !(v > 0.0 && v <= 1.0) {
        return Err(ApiError::BadThreshold(format!("{name} must lie in (0, 1], got {raw}")));
    }
    Ok(v)
}

async fn get_report(
    State(state): State<Arc<AppState>>,
    Query(query): Query<ReportQuery>,
) -> Result<Response, ApiError> {
    let iou = parse_threshold("iou", &query.iou, 0.5)?;
    let cs = parse_threshold("cs", &query.cs, 0.5)?;
    let records = state.manifest.as_ref().ok_or(ApiError::ManifestUnavailable)?;

    let detections = {
        let store = state.store.lock().expect("store lock");
        store.all_detections().map_err(|e| ApiError::Internal(e.to_string()))?
    };

    let report = evaluate(records, &detections, iou, cs).map_err(|e| match e {
        CoreError::UnknownImage(id) => ApiError::UnknownImage(id),
        other => ApiError::Internal(other.to_string()),
    })?;

    let body = render_jsonl(std::slice::from_ref(&report))
        .map_err(|e| ApiError::Internal(e.to_string()))?;

    {
        let mut log = state.reports.lock().expect("report log lock");
        let stored = StoredReport {
            report_id: format!("rep-{:08}", log.served + 1),
            iou,
            cs,
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true),
            report,
        };
        let mut line =
            serde_json::to_string(&stored).map_err(|e| ApiError::Internal(e.to_string()))?;
        line.push('\n');
        let result = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log.path)
            .and_then(|mut f| f.write_all(line.as_bytes()).and_then(|()| f.sync_all()));
        result.map_err(|e| ApiError::Internal(e.to_string()))?;
        log.served += 1;
    }

    Ok((
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/json")],
        body,
    )
        .into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: &str, confidence: f64) -> SubmittedDetection {
        SubmittedDetection {
            class: class.into(),
            confidence,
            xmin: 0.0,
            ymin: 0.0,
            xmax: 10.0,
            ymax: 10.0,
        }
    }

    fn payload(detections: Vec<SubmittedDetection>) -> SubmissionPayload {
        SubmissionPayload {
            image_id: "img-1".into(),
            submitter: "t".into(),
            dedup_key: None,
            no_finding: false,
            detections,
        }
    }

    #[test]
    fn clean_payload_canonicalizes_class_names() {
        let wire = validate_payload(&payload(vec![det("dti", 0.4)])).unwrap();
        assert_eq!(wire[0].class, "DTI");
    }

    #[test]
    fn every_bad_field_is_reported_with_its_path() {
        let mut p = payload(vec![det("CategoryV", 1.3), det("CategoryI", 0.5)]);
        p.detections[1].xmax = -5.0;
        p.image_id = String::new();
        let errors = validate_payload(&p).unwrap_err();
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"image_id"), "{fields:?}");
        assert!(fields.contains(&"detections[0].class"), "{fields:?}");
        assert!(fields.contains(&"detections[0].confidence"), "{fields:?}");
        assert!(fields.contains(&"detections[1].xmin"), "{fields:?}");
    }

    #[test]
    fn no_finding_and_detections_exclude_each_other() {
        let mut p = payload(vec![]);
        let errors = validate_payload(&p).unwrap_err();
        assert_eq!(errors[0].field, "detections");

        p.no_finding = true;
        assert!(validate_payload(&p).is_ok(), "no-finding with empty list is fine");

        p.detections.push(det("CategoryI", 0.5));
        let errors = validate_payload(&p).unwrap_err();
        assert!(errors.iter().any(|e| e.message.contains("no_finding")));
    }

    #[test]
    fn report_log_path_sits_next_to_the_store() {
        assert_eq!(
            report_log_path(Path::new("/data/store.jsonl")),
            PathBuf::from("/data/store.reports.jsonl")
        );
        assert_eq!(
            report_log_path(Path::new("relative.log")),
            PathBuf::from("relative.reports.jsonl")
        );
    }
}
