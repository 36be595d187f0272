mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{assert_api, fixture_config, fixture_dir};
use debris_core::interface::http::{router, AppState};
use debris_core::store::SurveyStore;

struct Api {
    _dir: tempfile::TempDir,
    state: Arc<AppState>,
    app: Router,
}

struct Reply {
    status: StatusCode,
    content_type: String,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {:?}", String::from_utf8_lossy(&self.body)))
    }
}

impl Api {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(SurveyStore::open(dir.path()).unwrap());
        let state = Arc::new(AppState::new(store, fixture_config()));
        let app = router(state.clone());
        Self { _dir: dir, state, app }
    }

    async fn send(&self, method: Method, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(ct) = content_type {
            req = req.header(header::CONTENT_TYPE, ct);
        }
        let resp = self.app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
        let status = resp.status();
        let content_type = resp
            .headers()
            .get(header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, content_type, body }
    }

    async fn get(&self, uri: &str) -> Reply {
        self.send(Method::GET, uri, None, Vec::new()).await
    }

    async fn post_json(&self, uri: &str, body: Value) -> Reply {
        self.send(Method::POST, uri, Some("application/json"), body.to_string().into_bytes()).await
    }

    async fn patch_json(&self, uri: &str, body: Value) -> Reply {
        self.send(Method::PATCH, uri, Some("application/json"), body.to_string().into_bytes()).await
    }

    async fn upload_fixture(&self, survey: &str) {
        let mut paths: Vec<_> = std::fs::read_dir(fixture_dir().join("images"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        paths.sort();
        for p in paths {
            let name = p.file_name().unwrap().to_str().unwrap().to_string();
            let r = self
                .send(
                    Method::POST,
                    &format!("/api/surveys/{survey}/images?name={name}"),
                    Some("image/jpeg"),
                    std::fs::read(&p).unwrap(),
                )
                .await;
            assert_eq!(r.status, StatusCode::CREATED, "{name}");
            assert_api("IngestedImage", &r.json());
        }
    }

    async fn wait_for_job(&self, job_id: &str) -> Value {
        let start = Instant::now();
        loop {
            let r = self.get(&format!("/api/jobs/{job_id}")).await;
            assert_eq!(r.status, StatusCode::OK);
            let job = r.json();
            assert_api("JobStatus", &job);
            assert!(job["images_done"].as_u64() <= job["images_total"].as_u64());
            if job["phase"] == "done" || job["phase"] == "failed" {
                return job;
            }
            assert!(start.elapsed() < Duration::from_secs(60), "job did not finish");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Survey "beach" with the fixture images, detected through the job API.
    async fn detected() -> Self {
        let api = Self::new();
        let r = api.post_json("/api/surveys", json!({"survey_id": "beach"})).await;
        assert_eq!(r.status, StatusCode::CREATED);
        assert_api("SurveyCreated", &r.json());
        api.upload_fixture("beach").await;
        let r = api.send(Method::POST, "/api/surveys/beach/detect", None, Vec::new()).await;
        assert_eq!(r.status, StatusCode::ACCEPTED);
        let job = r.json();
        assert_api("JobStatus", &job);
        let done = api.wait_for_job(job["job_id"].as_str().unwrap()).await;
        assert_eq!(done["phase"], "done", "{done:#}");
        api
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn detect_job_runs_to_completion() {
    let api = Api::detected().await;
    let r = api.get("/api/surveys/beach").await;
    assert_eq!(r.status, StatusCode::OK);
    let s = r.json();
    assert_api("SurveySummary", &s);
    assert_eq!(s["images"], 12);
    assert_eq!(s["unmapped_images"], 1);
    assert_eq!(s["records"], 24);
    assert_eq!(s["detected"], true);
    assert_eq!(s["detect_running"], false);

    let r = api.get("/api/surveys").await;
    assert_api("SurveyList", &r.json());
    assert_eq!(r.json()["surveys"], json!(["beach"]));
}

#[tokio::test(flavor = "multi_thread")]
async fn records_are_paged() {
    let api = Api::detected().await;
    let r = api.get("/api/surveys/beach/records?page=3&page_size=10").await;
    assert_eq!(r.status, StatusCode::OK);
    let page = r.json();
    assert_api("RecordPage", &page);
    assert_eq!(page["total"], 24);
    assert_eq!(page["pages"], 3);
    assert_eq!(page["records"].as_array().unwrap().len(), 4);

    let mut seen = Vec::new();
    for p in 1..=3 {
        let page = api.get(&format!("/api/surveys/beach/records?page={p}&page_size=10")).await.json();
        for rec in page["records"].as_array().unwrap() {
            seen.push(rec["record_id"].as_str().unwrap().to_string());
        }
    }
    let mut dedup = seen.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), 24, "pages overlap or skip records");
    assert_eq!(seen, dedup, "records are listed in id order");

    let past_end = api.get("/api/surveys/beach/records?page=9&page_size=10").await.json();
    assert!(past_end["records"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn label_correction_persists_with_audit_entry() {
    let api = Api::detected().await;
    let id = "beach-IMG_0002-001";
    let before = api.get(&format!("/api/records/{id}")).await;
    assert_eq!(before.status, StatusCode::OK);
    assert_eq!(before.json()["record"]["predicted_label"], "metal");

    let r = api.patch_json(&format!("/api/records/{id}"), json!({"corrected_label": "wheel"})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_api("RecordDetail", &r.json());
    assert_eq!(r.json()["record"]["corrected_label"], "wheel");

    let other = "beach-IMG_0001-000";
    let r = api.patch_json(&format!("/api/records/{other}"), json!({"corrected_label": "metal"})).await;
    assert_eq!(r.status, StatusCode::OK);

    // same label again: still 200, no second audit entry
    let again = api.patch_json(&format!("/api/records/{other}"), json!({"corrected_label": "metal"})).await;
    assert_eq!(again.status, StatusCode::OK);

    let after = api.get(&format!("/api/records/{other}")).await.json();
    assert_api("RecordDetail", &after);
    assert_eq!(after["record"]["corrected_label"], "metal");
    assert_eq!(after["record"]["predicted_label"], "fishing gear");
    let audit = after["corrections"].as_array().unwrap();
    assert_eq!(audit.len(), 1);
    assert_eq!(audit[0]["old_label"], "fishing gear");
    assert_eq!(audit[0]["new_label"], "metal");

    // the store on disk has it too
    let reopened = SurveyStore::open(api.state.store.root()).unwrap();
    let survey = reopened.survey("beach").unwrap();
    assert_eq!(survey.record(other).unwrap().corrected_label.as_deref(), Some("metal"));
    assert_eq!(survey.corrections.len(), 2);

    let stats = api.get("/api/surveys/beach/stats").await.json();
    assert_eq!(stats["corrected_records"], 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_label_is_rejected_with_the_schema() {
    let api = Api::detected().await;
    let r = api
        .patch_json("/api/records/beach-IMG_0001-000", json!({"corrected_label": "glass"}))
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let body = r.json();
    assert_api("UnknownLabel", &body);
    assert_eq!(
        body["valid_labels"],
        json!(["wood", "cage", "fishing gear", "nature", "plastic", "metal", "wheel"])
    );
    let rec = api.get("/api/records/beach-IMG_0001-000").await.json();
    assert_eq!(rec["record"]["corrected_label"], Value::Null);
    assert!(rec["corrections"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_are_404() {
    let api = Api::new();
    api.post_json("/api/surveys", json!({"survey_id": "s"})).await;
    for uri in [
        "/api/surveys/nope",
        "/api/surveys/nope/records",
        "/api/surveys/nope/map",
        "/api/surveys/nope/stats",
        "/api/surveys/nope/duplicates",
        "/api/surveys/nope/export.csv",
        "/api/records/nope",
        "/api/records/nope/crop.png",
        "/api/jobs/job-9999",
    ] {
        let r = api.get(uri).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{uri}");
        assert_api("Error", &r.json());
        assert_eq!(r.json()["error"], "not_found");
    }
    let r = api.patch_json("/api/records/nope", json!({"corrected_label": "wood"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api.send(Method::POST, "/api/surveys/nope/detect", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api.send(Method::POST, "/api/surveys/nope/dedup", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = api
        .send(Method::POST, "/api/surveys/nope/images?name=a.png", Some("image/png"), vec![1, 2, 3])
        .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn second_detect_conflicts_while_one_runs() {
    let api = Api::new();
    api.post_json("/api/surveys", json!({"survey_id": "beach"})).await;
    api.upload_fixture("beach").await;
    // hold the survey's job slot so the race is deterministic
    let held = api.state.jobs.start("beach", 12).unwrap();

    let r = api.send(Method::POST, "/api/surveys/beach/detect", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let body = r.json();
    assert_api("JobConflict", &body);
    assert_eq!(body["job_id"], held.job_id.as_str());

    let r = api.send(Method::POST, "/api/surveys/beach/dedup", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert!(api.get("/api/surveys/beach").await.json()["detect_running"].as_bool().unwrap());

    api.state.jobs.finish(&held.job_id, Err("abandoned".into()));
    let r = api.send(Method::POST, "/api/surveys/beach/detect", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let job = api.wait_for_job(r.json()["job_id"].as_str().unwrap()).await;
    assert_eq!(job["phase"], "done");
    assert_eq!(job["records"], 24);
    assert_eq!(job["images_done"], 12);
}

#[tokio::test(flavor = "multi_thread")]
async fn uploads_are_checked() {
    let api = Api::new();
    let r = api.post_json("/api/surveys", json!({})).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let id = r.json()["survey_id"].as_str().unwrap().to_string();
    assert_eq!(id, "survey-0001");
    let dup = api.post_json("/api/surveys", json!({"survey_id": id})).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);

    let jpeg = std::fs::read(fixture_dir().join("images/IMG_0001.jpg")).unwrap();
    let uri = format!("/api/surveys/{id}/images?name=IMG_0001.jpg");
    let r = api.send(Method::POST, &uri, Some("image/gif"), jpeg.clone()).await;
    assert_eq!(r.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let r = api.send(Method::POST, &uri, Some("image/jpeg"), jpeg.clone()).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let img = r.json();
    assert_eq!(img["image_id"], "IMG_0001");
    assert_eq!(img["meta"]["altitude"], 44.7);
    // same bytes again: accepted without change
    let r = api.send(Method::POST, &uri, Some("image/jpeg"), jpeg).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["added"], false);
    // different bytes under the same name
    let other = std::fs::read(fixture_dir().join("images/IMG_0002.jpg")).unwrap();
    let r = api.send(Method::POST, &uri, Some("image/jpeg"), other).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = api
        .send(Method::POST, &format!("/api/surveys/{id}/images?name=x.png"), Some("image/png"), b"not a png".to_vec())
        .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_api("Error", &r.json());

    let r = api.send(Method::POST, &format!("/api/surveys/{id}/dedup"), None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST, "dedup before detect");
}

#[tokio::test(flavor = "multi_thread")]
async fn dedup_and_duplicate_review() {
    let api = Api::detected().await;
    let r = api.send(Method::POST, "/api/surveys/beach/dedup", None, Vec::new()).await;
    assert_eq!(r.status, StatusCode::OK);
    let report = r.json();
    assert_api("DedupReport", &report);
    assert_eq!(report["groups"].as_array().unwrap().len(), 3);
    assert_eq!(report["surviving"], 21);

    // repeating gives the same answer
    let again = api.send(Method::POST, "/api/surveys/beach/dedup", None, Vec::new()).await.json();
    assert_eq!(again, report);

    let dups = api.get("/api/surveys/beach/duplicates").await.json();
    assert_api("Duplicates", &dups);
    let groups = dups["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 3);
    for g in groups {
        for (member, url) in g["thumbnails"].as_object().unwrap() {
            assert!(g["members"].as_array().unwrap().iter().any(|m| m == member));
            let r = api.get(url.as_str().unwrap()).await;
            assert_eq!(r.status, StatusCode::OK);
            assert_eq!(r.content_type, "image/png");
            assert_eq!(&r.body[..8], b"\x89PNG\r\n\x1a\n");
            let thumb = image::load_from_memory(&r.body).unwrap();
            assert!(thumb.width().max(thumb.height()) <= 256);
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn map_stats_and_export() {
    let api = Api::detected().await;
    api.send(Method::POST, "/api/surveys/beach/dedup", None, Vec::new()).await;
    let cfg = fixture_config();

    let r = api.get("/api/surveys/beach/map").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "application/geo+json");
    let fc = r.json();
    assert_api("FeatureCollection", &fc);
    let features = fc["features"].as_array().unwrap();
    // 24 records, 3 dropped as duplicates, 1 on the frame without GPS
    assert_eq!(features.len(), 20);
    assert_eq!(fc["unmapped_records"], 1);
    for f in features {
        let p = &f["properties"];
        let label = p["label"].as_str().unwrap();
        assert_eq!(p["color"], cfg.palette[label].as_str(), "{label}");
    }

    let stats = api.get("/api/surveys/beach/stats").await.json();
    assert_api("SurveyStats", &stats);
    assert_eq!(stats["total_records"], 24);
    assert_eq!(stats["surviving_records"], 21);
    assert_eq!(stats["duplicates_removed"], 3);
    let counted: u64 = stats["classes"].as_array().unwrap().iter().map(|c| c["count"].as_u64().unwrap()).sum();
    assert_eq!(counted, 21);

    let labels = api.get("/api/labels").await.json();
    assert_api("Labels", &labels);

    let r = api.get("/api/surveys/beach/export.csv").await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(r.content_type.starts_with("text/csv"));
    let expected = debris_core::interface::export_csv(&api.state.store, "beach").unwrap();
    assert_eq!(r.body, expected);
    assert_eq!(r.body.iter().filter(|&&b| b == b'\n').count(), 25);
}
