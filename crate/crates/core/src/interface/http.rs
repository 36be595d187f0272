//! JSON HTTP API over a survey store.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::jobs::{JobRegistry, Phase, ProgressDetector};
use super::{AppError, Providers};
use crate::config::SurveyConfig;
use crate::pipeline::{run_survey, DebrisRecord};
use crate::store::{Correction, StoreError, SurveyStore};

const THUMBNAIL_SIDE: u32 = 256;

pub struct AppState {
    pub store: Arc<SurveyStore>,
    pub config: Arc<SurveyConfig>,
    pub providers: Providers,
    pub jobs: JobRegistry,
}

impl AppState {
    pub fn new(store: Arc<SurveyStore>, config: SurveyConfig) -> Self {
        let providers = Providers::from_config(&config);
        Self {
            store,
            config: Arc::new(config),
            providers,
            jobs: JobRegistry::default(),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.server.max_upload_bytes;
    Router::new()
        .route("/api/labels", get(labels))
        .route("/api/surveys", post(create_survey).get(list_surveys))
        .route("/api/surveys/{id}", get(survey_summary))
        .route("/api/surveys/{id}/images", post(upload_image))
        .route("/api/surveys/{id}/detect", post(start_detect))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/surveys/{id}/records", get(list_records))
        .route("/api/records/{id}", patch(correct_record).get(get_record))
        .route("/api/records/{id}/crop.png", get(record_crop))
        .route("/api/surveys/{id}/dedup", post(run_dedup))
        .route("/api/surveys/{id}/duplicates", get(duplicates))
        .route("/api/surveys/{id}/map", get(map))
        .route("/api/surveys/{id}/stats", get(stats))
        .route("/api/surveys/{id}/export.csv", get(export_csv))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": kind, "message": message.into()}),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::NotFound { .. } => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string()),
            StoreError::UnknownLabel { valid, .. } => ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({"error": "unknown_label", "message": e.to_string(), "valid_labels": valid}),
            },
            StoreError::InvalidImage(_)
            | StoreError::InvalidId(_)
            | StoreError::Csv { .. }
            | StoreError::SchemaMismatch(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", e.to_string()),
            StoreError::Io(_) | StoreError::Corrupt(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string())
            }
        }
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        match e {
            AppError::Store(s) => s.into(),
            AppError::Config(m) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "config", m),
            AppError::Provider(m) => ApiError::new(StatusCode::BAD_GATEWAY, "provider", m),
            AppError::Data(m) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", m),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

async fn labels(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let labels: Vec<_> = st
        .config
        .pipeline
        .schema
        .labels()
        .iter()
        .map(|l| json!({"label": l, "color": st.config.color_for(l)}))
        .collect();
    Json(json!({ "labels": labels }))
}

#[derive(Debug, Default, Deserialize)]
struct CreateSurvey {
    survey_id: Option<String>,
}

async fn create_survey(
    State(st): State<Arc<AppState>>,
    body: Option<Json<CreateSurvey>>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let id = st
        .store
        .create_survey(req.survey_id.as_deref(), st.config.pipeline.schema.clone())?;
    Ok((StatusCode::CREATED, Json(json!({ "survey_id": id }))))
}

async fn list_surveys(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "surveys": st.store.survey_ids() }))
}

#[derive(Debug, Serialize)]
struct SurveySummary {
    survey_id: String,
    images: usize,
    unmapped_images: usize,
    records: usize,
    duplicate_groups: usize,
    corrections: usize,
    detected: bool,
    detect_running: bool,
}

async fn survey_summary(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SurveySummary>> {
    let s = st.store.survey(&id)?;
    Ok(Json(SurveySummary {
        images: s.images.len(),
        unmapped_images: s.images.values().filter(|i| !i.mapped()).count(),
        records: s.records.len(),
        duplicate_groups: s.groups.len(),
        corrections: s.corrections.len(),
        detected: s.detected,
        detect_running: st.jobs.is_running(&id),
        survey_id: s.survey_id,
    }))
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    name: Option<String>,
}

async fn upload_image(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<UploadQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    st.store.survey(&id)?;
    let ctype = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .split(';')
        .next()
        .unwrap_or("")
        .trim()
        .to_ascii_lowercase();
    if !st.config.server.allowed_types.iter().any(|t| t == &ctype) {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            format!("content type {ctype:?} is not one of {}", st.config.server.allowed_types.join(", ")),
        ));
    }
    let stem = q.name.as_deref().map(|n| {
        std::path::Path::new(n)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(n)
            .to_string()
    });
    let store = st.store.clone();
    let img = blocking(move || store.ingest_image(&id, stem.as_deref(), &body)).await??;
    let status = if img.added { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(serde_json::to_value(img).expect("plain data"))))
}

async fn start_detect(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let survey = st.store.survey(&id)?;
    if survey.images.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_input", "survey has no images"));
    }
    let job = st.jobs.start(&id, survey.images.len()).map_err(|running| ApiError {
        status: StatusCode::CONFLICT,
        body: json!({"error": "conflict", "message": format!("detection already running for {id}"), "job_id": running}),
    })?;
    let job_id = job.job_id.clone();
    let state = st.clone();
    tokio::task::spawn_blocking(move || run_detect_job(&state, &id, &job_id));
    Ok((StatusCode::ACCEPTED, Json(serde_json::to_value(job).expect("plain data"))))
}

fn run_detect_job(st: &AppState, survey_id: &str, job_id: &str) {
    let result = (|| -> Result<(usize, usize), AppError> {
        let images = st.store.survey_images(survey_id)?;
        let cfg = &st.config.pipeline;
        let calls = cfg.threshold_pairs.len() * 2;
        st.jobs.advance(job_id, Phase::Detecting);
        let total = images.len();
        let progress = ProgressDetector::new(st.providers.detector.clone(), calls, |done| {
            st.jobs.set_progress(job_id, done);
            if done >= total {
                st.jobs.advance(job_id, Phase::Classifying);
            }
        });
        let run = run_survey(
            &images,
            cfg,
            &st.config.camera_model(),
            &progress,
            st.providers.classifier.as_ref(),
            survey_id,
        )?;
        let counts = (run.records.len(), run.failures.len());
        st.store.replace_records(survey_id, run.records, run.failures)?;
        Ok(counts)
    })();
    st.jobs.finish(job_id, result.map_err(|e| e.to_string()));
}

async fn job_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let job = st
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::from(StoreError::NotFound { kind: "job", id: id.clone() }))?;
    Ok(Json(serde_json::to_value(job).expect("plain data")))
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn list_records(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let survey = st.store.survey(&id)?;
    let page = q.page.unwrap_or(1).max(1);
    let size = q.page_size.unwrap_or(st.config.server.page_size).clamp(1, 1000);
    let total = survey.records.len();
    let records: Vec<&DebrisRecord> = survey.records.iter().skip((page - 1) * size).take(size).collect();
    Ok(Json(json!({
        "survey_id": id,
        "page": page,
        "page_size": size,
        "total": total,
        "pages": total.div_ceil(size),
        "records": records,
    })))
}

#[derive(Debug, Serialize)]
struct RecordDetail {
    survey_id: String,
    record: DebrisRecord,
    corrections: Vec<Correction>,
}

fn record_detail(store: &SurveyStore, record_id: &str) -> Result<RecordDetail, StoreError> {
    let (survey_id, record) = store.locate_record(record_id)?;
    let corrections = store
        .survey(&survey_id)?
        .corrections
        .into_iter()
        .filter(|c| c.record_id == record_id)
        .collect();
    Ok(RecordDetail {
        survey_id,
        record,
        corrections,
    })
}

async fn get_record(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RecordDetail>> {
    Ok(Json(record_detail(&st.store, &id)?))
}

#[derive(Debug, Deserialize)]
struct CorrectionBody {
    corrected_label: String,
}

async fn correct_record(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<CorrectionBody>,
) -> ApiResult<Json<RecordDetail>> {
    st.store.correct_label(&id, &body.corrected_label)?;
    Ok(Json(record_detail(&st.store, &id)?))
}

async fn record_crop(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = st.store.clone();
    let png = blocking(move || store.crop_png(&id, THUMBNAIL_SIDE)).await??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn run_dedup(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    if st.jobs.is_running(&id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflict",
            format!("detection is running for {id}"),
        ));
    }
    let state = st.clone();
    let report = blocking(move || super::dedup_stored(&state.store, &id, &state.config)).await??;
    Ok(Json(serde_json::to_value(report).expect("plain data")))
}

async fn duplicates(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let survey = st.store.survey(&id)?;
    let groups: Vec<_> = survey
        .groups
        .iter()
        .map(|g| {
            let thumbs: serde_json::Map<String, serde_json::Value> = g
                .members
                .iter()
                .map(|m| (m.clone(), json!(format!("/api/records/{m}/crop.png"))))
                .collect();
            json!({
                "group_id": g.group_id,
                "members": g.members,
                "canonical": g.canonical,
                "matches": g.matches,
                "thumbnails": thumbs,
            })
        })
        .collect();
    Ok(Json(json!({"survey_id": id, "groups": groups})))
}

async fn map(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = super::export_geojson(&st.store, &id, &st.config)?;
    Ok(([(header::CONTENT_TYPE, "application/geo+json")], bytes).into_response())
}

async fn stats(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let s = super::stats(&st.store, &id, &st.config)?;
    Ok(Json(serde_json::to_value(s).expect("plain data")))
}

async fn export_csv(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = super::export_csv(&st.store, &id)?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.csv\"")),
        ],
        bytes,
    )
        .into_response())
}
