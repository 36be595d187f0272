//! Operations shared by the command line and the HTTP service, and the error
//! classes both report.

pub mod http;
pub mod jobs;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ProviderConfig, SurveyConfig};
use crate::dedup::{dedup_with_judge, DuplicateGroup, PairEvidence, SiftJudge};
use crate::evaluation::{evaluate, parse_truth_csv, parse_truth_json, EvaluationError, MetricsReport, Prediction};
use crate::pipeline::{run_survey, ImageFailure, PipelineError};
use crate::providers::{Classifier, Detector, FileBackedProvider, ProviderError, RemoteProvider};
use crate::store::{self, IngestedImage, MapStyle, StoreError, SurveyStore, SurveyStats};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Provider(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Provider(_) => 3,
            AppError::Data(_) | AppError::Store(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Config(_) => "config",
            AppError::Provider(_) => "provider",
            AppError::Data(_) | AppError::Store(_) => "data",
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<EvaluationError> for AppError {
    fn from(e: EvaluationError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Config(_) => AppError::Config(e.to_string()),
            PipelineError::Provider { source: ProviderError::InvalidRequest(_), .. }
            | PipelineError::Decode { .. }
            | PipelineError::EmptySurvey => AppError::Data(e.to_string()),
            PipelineError::Provider { .. }
            | PipelineError::ProviderUnavailable(_)
            | PipelineError::AllImagesFailed(_) => AppError::Provider(e.to_string()),
        }
    }
}

/// Detector and classifier chosen by the config.
#[derive(Clone)]
pub struct Providers {
    pub detector: Arc<dyn Detector>,
    pub classifier: Arc<dyn Classifier>,
}

impl Providers {
    pub fn from_config(cfg: &SurveyConfig) -> Self {
        match &cfg.provider {
            ProviderConfig::File { dir } => {
                let p = Arc::new(FileBackedProvider::from_dir(dir.clone()));
                Self {
                    detector: p.clone(),
                    classifier: p,
                }
            }
            ProviderConfig::Remote(r) => {
                let p = Arc::new(RemoteProvider::new(r.clone()));
                Self {
                    detector: p.clone(),
                    classifier: p,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub survey_id: String,
    pub images: Vec<IngestedImage>,
    pub unmapped: Vec<String>,
    /// Files that could not be ingested, with the reason.
    pub rejected: Vec<ImageFailure>,
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        .unwrap_or(false)
}

/// Ingest every JPEG/PNG in `dir` (not recursive) under its file stem.
pub fn ingest_dir(
    store: &SurveyStore,
    survey_id: Option<&str>,
    dir: &Path,
    cfg: &SurveyConfig,
) -> Result<IngestSummary, AppError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AppError::Data(format!("no JPEG or PNG images in {}", dir.display())));
    }
    let schema = cfg.pipeline.schema.clone();
    let survey_id = match survey_id {
        Some(id) => {
            store.ensure_survey(id, schema)?;
            id.to_string()
        }
        None => store.create_survey(None, schema)?,
    };
    let mut summary = IngestSummary {
        survey_id: survey_id.clone(),
        images: Vec::new(),
        unmapped: Vec::new(),
        rejected: Vec::new(),
    };
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let bytes = std::fs::read(&path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        match store.ingest_image(&survey_id, Some(&stem), &bytes) {
            Ok(img) => {
                if img.meta.is_none() {
                    summary.unmapped.push(img.image_id.clone());
                }
                summary.images.push(img);
            }
            Err(e @ (StoreError::InvalidImage(_) | StoreError::InvalidId(_))) => summary.rejected.push(ImageFailure {
                image_id: stem,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub survey_id: String,
    pub images: usize,
    pub records: usize,
    pub failures: Vec<ImageFailure>,
    pub warnings: Vec<String>,
}

/// Run detection and classification over every image of the survey. The
/// stored records are replaced only when the run succeeds.
pub fn detect_survey(
    store: &SurveyStore,
    survey_id: &str,
    cfg: &SurveyConfig,
    providers: &Providers,
) -> Result<DetectSummary, AppError> {
    let images = store.survey_images(survey_id)?;
    let run = run_survey(
        &images,
        &cfg.pipeline,
        &cfg.camera_model(),
        providers.detector.as_ref(),
        providers.classifier.as_ref(),
        survey_id,
    )?;
    let summary = DetectSummary {
        survey_id: survey_id.to_string(),
        images: images.len(),
        records: run.records.len(),
        failures: run.failures.clone(),
        warnings: run.warnings,
    };
    store.replace_records(survey_id, run.records, run.failures)?;
    Ok(summary)
}

/// Duplicate report: groups with their evidence, plus every SIFT comparison
/// that was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub survey_id: String,
    pub groups: Vec<DuplicateGroup>,
    pub candidate_pairs: usize,
    pub sift_comparisons: usize,
    pub comparisons: Vec<PairEvidence>,
    pub records: usize,
    pub surviving: usize,
    pub warnings: Vec<String>,
}

pub fn dedup_stored(store: &SurveyStore, survey_id: &str, cfg: &SurveyConfig) -> Result<DedupReport, AppError> {
    let survey = store.survey(survey_id)?;
    if !survey.detected {
        return Err(AppError::Data(format!("survey {survey_id:?} has no detections yet")));
    }
    // start from a clean slate so repeated runs give the same answer
    let mut records = survey.records;
    for r in &mut records {
        r.duplicate_group = None;
        r.is_canonical = false;
    }
    let crops = store.record_crops(survey_id)?;
    let source = |r: &crate::pipeline::DebrisRecord| crops.get(&r.record_id).cloned();
    let judge = SiftJudge::new(&records, &source, cfg.dedup.clone());
    let outcome = dedup_with_judge(&records, &judge, cfg.dedup.radius_m);
    store.apply_dedup(survey_id, &outcome)?;
    Ok(DedupReport {
        survey_id: survey_id.to_string(),
        candidate_pairs: outcome.candidate_pairs,
        sift_comparisons: judge.comparisons(),
        comparisons: outcome.comparisons.clone(),
        records: outcome.records.len(),
        surviving: outcome.survivors().len(),
        groups: outcome.groups,
        warnings: outcome.warnings,
    })
}

/// Score the survey's records (corrected labels where present) against an
/// annotation file, JSON or, by extension, CSV.
pub fn evaluate_stored(
    store: &SurveyStore,
    survey_id: &str,
    truth_path: &Path,
    cfg: &SurveyConfig,
) -> Result<MetricsReport, AppError> {
    let survey = store.survey(survey_id)?;
    let bytes = std::fs::read(truth_path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", truth_path.display())))?;
    let is_csv = truth_path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let truths = if is_csv {
        parse_truth_csv(&bytes, &survey.schema)?
    } else {
        parse_truth_json(&bytes, &survey.schema)?
    };
    let preds: Vec<Prediction> = survey.records.iter().map(Prediction::from).collect();
    Ok(evaluate(
        &preds,
        &truths,
        &survey.schema,
        cfg.evaluation.matching,
        cfg.evaluation.iou_mode,
    ))
}

pub fn map_style(cfg: &SurveyConfig) -> MapStyle<'_> {
    MapStyle {
        palette: &cfg.palette,
        eps_m: cfg.clustering.eps_m,
        min_pts: cfg.clustering.min_pts,
    }
}

pub fn export_csv(store: &SurveyStore, survey_id: &str) -> Result<Vec<u8>, AppError> {
    Ok(store::export_csv(&store.survey(survey_id)?.records))
}

pub fn export_geojson(store: &SurveyStore, survey_id: &str, cfg: &SurveyConfig) -> Result<Vec<u8>, AppError> {
    let fc = store::export_geojson(&store.survey(survey_id)?.records, &map_style(cfg));
    let mut out = serde_json::to_vec_pretty(&fc).expect("plain data");
    out.push(b'\n');
    Ok(out)
}

pub fn stats(store: &SurveyStore, survey_id: &str, cfg: &SurveyConfig) -> Result<SurveyStats, AppError> {
    let survey = store.survey(survey_id)?;
    Ok(store::survey_stats(&survey.records, &survey.schema, &map_style(cfg)))
}

/// Replace a survey's records with a CSV export, creating the survey if needed.
pub fn import_csv(store: &SurveyStore, survey_id: &str, bytes: &[u8], cfg: &SurveyConfig) -> Result<usize, AppError> {
    store.ensure_survey(survey_id, cfg.pipeline.schema.clone())?;
    let schema = store.survey(survey_id)?.schema;
    let records = store::import_csv(bytes, &schema)?;
    let n = records.len();
    store.import_records(survey_id, records)?;
    Ok(n)
}
