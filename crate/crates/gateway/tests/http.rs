//! End-to-end tests over real HTTP: an in-process server on an ephemeral
//! port, exercised with an ordinary HTTP client.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use puw_core::classes::UlcerClass;
use puw_core::dataset::{ImageRecord, Provenance};
use puw_core::geometry::{BBox, LabeledBox};
use puw_gateway::{serve_on, AppState, Store};

fn manifest() -> Vec<ImageRecord> {
    let boxed = |class, a: (f64, f64, f64, f64)| {
        LabeledBox::new(class, BBox::new(a.0, a.1, a.2, a.3).unwrap())
    };
    vec![
        ImageRecord {
            image_id: "img-1".into(),
            source_path: "img-1.jpg".into(),
            width: 512,
            height: 512,
            provenance: Provenance::Trial,
            annotations: vec![
                boxed(UlcerClass::CategoryII, (10.0, 20.0, 110.0, 220.0)),
                boxed(UlcerClass::CategoryI, (300.0, 300.0, 400.0, 400.0)),
            ],
        },
        ImageRecord {
            image_id: "img-2".into(),
            source_path: "img-2.jpg".into(),
            width: 512,
            height: 512,
            provenance: Provenance::Trial,
            annotations: vec![boxed(UlcerClass::Dti, (50.0, 50.0, 150.0, 150.0))],
        },
    ]
}

async fn spawn_server(
    manifest: Option<Vec<ImageRecord>>,
    store_path: &Path,
) -> (String, tokio::task::JoinHandle<()>) {
    let state = Arc::new(AppState::new(manifest, store_path).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = tokio::spawn(async move {
        serve_on(listener, state).await.unwrap();
    });
    (format!("http://{addr}"), handle)
}

fn store_path(dir: &tempfile::TempDir) -> PathBuf {
    dir.path().join("store.jsonl")
}

fn two_detection_payload() -> Value {
    json!({
        "image_id": "img-1",
        "submitter": "model-a",
        "detections": [
            {"class": "CategoryII", "confidence": 0.91,
             "xmin": 10.0, "ymin": 20.0, "xmax": 110.0, "ymax": 220.0},
            {"class": "categoryi", "confidence": 0.55,
             "xmin": 305.0, "ymin": 300.0, "xmax": 400.0, "ymax": 400.0},
        ],
    })
}

#[tokio::test]
async fn submission_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(Some(manifest()), &store_path(&dir)).await;
    let client = reqwest::Client::new();

    // A valid two-detection payload: 201, first id, store grows to 1.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&two_detection_payload())
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["submission_id"], "sub-00000001");
    assert_eq!(body["store_length"], 1);

    // Ids are sequential.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({
            "image_id": "img-2",
            "detections": [{"class": "DTI", "confidence": 0.4,
                            "xmin": 60.0, "ymin": 50.0, "xmax": 150.0, "ymax": 150.0}],
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["submission_id"], "sub-00000002");
    assert_eq!(body["store_length"], 2);

    // An explicit no-finding submission is also accepted.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({"image_id": "img-1", "no_finding": true}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);

    server.abort();
}

#[tokio::test]
async fn validation_failures_name_the_fields() {
    let dir = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(Some(manifest()), &store_path(&dir)).await;
    let client = reqwest::Client::new();

    // Out-of-range confidence: 400 naming the exact field.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({
            "image_id": "img-1",
            "detections": [{"class": "CategoryII", "confidence": 1.3,
                            "xmin": 0.0, "ymin": 0.0, "xmax": 10.0, "ymax": 10.0}],
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "validation");
    let fields: Vec<&str> =
        body["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"detections[0].confidence"), "{fields:?}");

    // Unknown class name: the message lists the valid set.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({
            "image_id": "img-1",
            "detections": [{"class": "CategoryVII", "confidence": 0.5,
                            "xmin": 0.0, "ymin": 0.0, "xmax": 10.0, "ymax": 10.0}],
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().await.unwrap();
    let messages = body["fields"].to_string();
    assert!(messages.contains("Unstageable"), "{messages}");

    // Detections and no_finding are mutually exclusive, both ways.
    for payload in [
        json!({"image_id": "img-1"}),
        json!({"image_id": "img-1", "no_finding": true,
               "detections": [{"class": "DTI", "confidence": 0.5,
                               "xmin": 0.0, "ymin": 0.0, "xmax": 10.0, "ymax": 10.0}]}),
    ] {
        let resp = client
            .post(format!("{base}/api/v1/detections"))
            .json(&payload)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 400);
    }

    // A body that is not JSON at all: 400, different error kind.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .header("content-type", "application/json")
        .body("{ this is not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "malformed_body");

    // Nothing of the above was stored.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&two_detection_payload())
        .send()
        .await
        .unwrap();
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["submission_id"], "sub-00000001");

    server.abort();
}

#[tokio::test]
async fn dedup_key_makes_submission_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(Some(manifest()), &store_path(&dir)).await;
    let client = reqwest::Client::new();

    let mut payload = two_detection_payload();
    payload["dedup_key"] = json!("retry-42");

    let first = client
        .post(format!("{base}/api/v1/detections"))
        .json(&payload)
        .send()
        .await
        .unwrap();
    assert_eq!(first.status(), 201);
    let first: Value = first.json().await.unwrap();

    // Identical resend: 200, same id, store untouched.
    let again = client
        .post(format!("{base}/api/v1/detections"))
        .json(&payload)
        .send()
        .await
        .unwrap();
    assert_eq!(again.status(), 200);
    let again: Value = again.json().await.unwrap();
    assert_eq!(again["submission_id"], first["submission_id"]);
    assert_eq!(again["store_length"], first["store_length"]);

    // Same key, different payload: conflict.
    payload["detections"][0]["confidence"] = json!(0.92);
    let conflict = client
        .post(format!("{base}/api/v1/detections"))
        .json(&payload)
        .send()
        .await
        .unwrap();
    assert_eq!(conflict.status(), 409);
    let conflict: Value = conflict.json().await.unwrap();
    assert_eq!(conflict["error"], "dedup_conflict");

    // Class spelling is canonicalized before hashing, so a respelled
    // identical payload still counts as identical.
    let mut respelled = two_detection_payload();
    respelled["dedup_key"] = json!("retry-42");
    respelled["detections"][0]["class"] = json!("category ii");
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&respelled)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);

    server.abort();
}

#[tokio::test]
async fn reports_reflect_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(Some(manifest()), &store_path(&dir)).await;
    let client = reqwest::Client::new();

    // Empty store: a well-formed report with every recall at zero.
    let resp = client.get(format!("{base}/api/v1/reports")).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let report: Value = resp.json().await.unwrap();
    assert_eq!(report["iou_threshold"], 0.5);
    assert_eq!(report["confidence_threshold"], 0.5);
    assert_eq!(report["total_true_positives"], 0);
    assert_eq!(report["total_false_negatives"], 3);
    for class in report["per_class"].as_array().unwrap() {
        assert_eq!(class["recall"], 0.0);
        assert_eq!(class["fn"], class["support"]);
    }

    // Store one good submission; the report moves.
    client
        .post(format!("{base}/api/v1/detections"))
        .json(&two_detection_payload())
        .send()
        .await
        .unwrap();
    let resp = client
        .get(format!("{base}/api/v1/reports?iou=0.5&cs=0.5"))
        .send()
        .await
        .unwrap();
    let report: Value = resp.json().await.unwrap();
    assert_eq!(report["total_true_positives"], 2);
    assert_eq!(report["total_false_negatives"], 1, "the DTI box is still unclaimed");

    // Tighter confidence cutoff drops the weaker detection.
    let resp = client
        .get(format!("{base}/api/v1/reports?iou=0.5&cs=0.9"))
        .send()
        .await
        .unwrap();
    let report: Value = resp.json().await.unwrap();
    assert_eq!(report["total_true_positives"], 1);

    // Served reports are journaled with sequential ids.
    let log = std::fs::read_to_string(dir.path().join("store.reports.jsonl")).unwrap();
    let ids: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(ids.len(), 3);
    assert_eq!(ids[0]["report_id"], "rep-00000001");
    assert_eq!(ids[2]["report_id"], "rep-00000003");
    assert_eq!(ids[2]["cs"], 0.9);

    server.abort();
}

#[tokio::test]
async fn threshold_and_manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(Some(manifest()), &store_path(&dir)).await;
    let client = reqwest::Client::new();

    for query in ["iou=1.5", "iou=0", "cs=-0.2", "cs=abc", "iou=nan"] {
        let resp = client
            .get(format!("{base}/api/v1/reports?{query}"))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 422, "query {query}");
        let body: Value = resp.json().await.unwrap();
        assert_eq!(body["error"], "bad_threshold");
    }
    server.abort();

    // Without a manifest the service accepts submissions but cannot report.
    let dir2 = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(None, &store_path(&dir2)).await;
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&two_detection_payload())
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let resp = client.get(format!("{base}/api/v1/reports")).send().await.unwrap();
    assert_eq!(resp.status(), 503);
    server.abort();
}

#[tokio::test]
async fn submissions_for_unknown_images_fail_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (base, server) = spawn_server(Some(manifest()), &store_path(&dir)).await;
    let client = reqwest::Client::new();

    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({
            "image_id": "img-99",
            "detections": [{"class": "DTI", "confidence": 0.9,
                            "xmin": 0.0, "ymin": 0.0, "xmax": 10.0, "ymax": 10.0}],
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201, "submission time cannot know the manifest's future");

    let resp = client.get(format!("{base}/api/v1/reports")).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "unknown_image");

    server.abort();
}

#[tokio::test]
async fn restart_replays_to_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = store_path(&dir);

    let (base, server) = spawn_server(Some(manifest()), &path).await;
    let client = reqwest::Client::new();
    client
        .post(format!("{base}/api/v1/detections"))
        .json(&two_detection_payload())
        .send()
        .await
        .unwrap();
    client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({
            "image_id": "img-2",
            "detections": [{"class": "DTI", "confidence": 0.7,
                            "xmin": 55.0, "ymin": 50.0, "xmax": 150.0, "ymax": 150.0}],
        }))
        .send()
        .await
        .unwrap();
    let before = client
        .get(format!("{base}/api/v1/reports?iou=0.5&cs=0.3"))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    server.abort();

    // A fresh process over the same log serves the identical report.
    let (base, server) = spawn_server(Some(manifest()), &path).await;
    let after = client
        .get(format!("{base}/api/v1/reports?iou=0.5&cs=0.3"))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    assert_eq!(before, after, "replayed store must evaluate identically");

    // And the id sequence continues rather than restarting.
    let resp = client
        .post(format!("{base}/api/v1/detections"))
        .json(&json!({"image_id": "img-1", "no_finding": true}))
        .send()
        .await
        .unwrap();
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["submission_id"], "sub-00000003");

    server.abort();
}

#[tokio::test]
async fn concurrent_submissions_all_land() {
    let dir = tempfile::tempdir().unwrap();
    let path = store_path(&dir);
    let (base, server) = spawn_server(Some(manifest()), &path).await;
    let client = reqwest::Client::new();

    let mut handles = Vec::new();
    for i in 0..8 {
        let client = client.clone();
        let base = base.clone();
        handles.push(tokio::spawn(async move {
            let resp = client
                .post(format!("{base}/api/v1/detections"))
                .json(&json!({
                    "image_id": "img-1",
                    "submitter": format!("client-{i}"),
                    "detections": [{"class": "CategoryII", "confidence": 0.5 + 0.05 * i as f64,
                                    "xmin": 10.0, "ymin": 20.0, "xmax": 110.0, "ymax": 220.0}],
                }))
                .send()
                .await
                .unwrap();
            assert_eq!(resp.status(), 201);
            let body: Value = resp.json().await.unwrap();
            body["submission_id"].as_str().unwrap().to_string()
        }));
    }
    let mut ids = Vec::new();
    for h in handles {
        ids.push(h.await.unwrap());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 8, "every submission got its own id");

    server.abort();
    let store = Store::open(&path).unwrap();
    assert_eq!(store.len(), 8);
}
