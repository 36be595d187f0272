//! Detection and classification providers.
//!
//! The pipeline never talks to a model directly. A [`Detector`] answers
//! text-prompted box queries and a [`Classifier`] returns a probability
//! distribution over the labeling schema for an object crop. Two
//! implementations ship with the crate: [`FileBackedProvider`] replays JSON
//! fixture documents and [`RemoteProvider`] speaks the HTTP inference
//! protocol (`POST /v1/detect`, `POST /v1/classify`).

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, sort_detections, CropBounds, PixelBox, ScoredDetection};

/// Upper bound on proposals returned for one query.
pub const MAX_DETECTIONS: usize = 900;

pub const DEFAULT_LABELS: [&str; 7] = [
    "wood",
    "cage",
    "fishing gear",
    "nature",
    "plastic",
    "metal",
    "wheel",
];

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Ordered set of class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSchema {
    labels: Vec<String>,
}

impl Default for LabelSchema {
    fn default() -> Self {
        Self {
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for LabelSchema {
    type Error = String;

    fn try_from(labels: Vec<String>) -> Result<Self, String> {
        Self::new(labels)
    }
}

impl From<LabelSchema> for Vec<String> {
    fn from(s: LabelSchema) -> Self {
        s.labels
    }
}

impl LabelSchema {
    pub fn new(labels: Vec<String>) -> Result<Self, String> {
        if labels.len() < 2 {
            return Err("a labeling schema needs at least 2 classes".into());
        }
        if labels.iter().any(|l| l.trim().is_empty()) {
            return Err("class names must be non-empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(format!("duplicate class name {dup:?}"));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.position(label).is_some()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Probability per schema class, aligned with the schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl ClassDistribution {
    /// Validate and, if the total drifts from 1, renormalize. The returned flag
    /// says whether renormalization happened.
    pub fn from_scores(
        schema: &LabelSchema,
        scores: Vec<f64>,
    ) -> Result<(Self, bool), ProviderError> {
        if scores.len() != schema.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} probabilities, got {}",
                schema.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ProviderError::Protocol(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Err(ProviderError::Protocol("probabilities sum to zero".into()));
        }
        let renormalized = (total - 1.0).abs() > NORMALIZATION_TOLERANCE;
        let probabilities = if renormalized {
            scores.iter().map(|p| p / total).collect()
        } else {
            scores
        };
        Ok((
            Self {
                labels: schema.labels().to_vec(),
                probabilities,
            },
            renormalized,
        ))
    }

    pub fn uniform(schema: &LabelSchema) -> Self {
        let p = 1.0 / schema.len() as f64;
        Self {
            labels: schema.labels().to_vec(),
            probabilities: vec![p; schema.len()],
        }
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.probabilities[i])
    }
}

/// Label with the highest probability; the earlier class wins a tie.
pub fn argmax_label(dist: &ClassDistribution) -> &str {
    let mut best = 0;
    for (i, p) in dist.probabilities.iter().enumerate() {
        if *p > dist.probabilities[best] {
            best = i;
        }
    }
    &dist.labels[best]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRequest {
    pub image_id: String,
    pub prompt: String,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl DetectionRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.prompt.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("prompt must be non-empty".into()));
        }
        for (name, t) in [
            ("box_threshold", self.box_threshold),
            ("text_threshold", self.text_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(ProviderError::InvalidRequest(format!(
                    "{name} {t} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Encoded source image handed to a detector.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub image_id: &'a str,
    pub width: u32,
    pub height: u32,
    pub bytes: &'a [u8],
}

/// Object crop handed to a classifier.
#[derive(Debug, Clone, Copy)]
pub struct CropInput<'a> {
    pub image_id: &'a str,
    pub bounds: CropBounds,
    pub raster: &'a RgbImage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectOutput {
    pub detections: Vec<ScoredDetection>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutput {
    pub distribution: ClassDistribution,
    pub warnings: Vec<String>,
}

pub trait Detector: Send + Sync {
    fn detect(
        &self,
        request: &DetectionRequest,
        image: &ImageInput<'_>,
    ) -> Result<DetectOutput, ProviderError>;
}

pub trait Classifier: Send + Sync {
    fn classify(
        &self,
        crop: &CropInput<'_>,
        schema: &LabelSchema,
    ) -> Result<ClassifyOutput, ProviderError>;
}

/// One box of the `/v1/detect` response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub prompt: String,
    /// Fixture-only: phrase score compared against the text threshold.
    /// Defaults to `score`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePrompt {
    pub text: String,
    pub box_threshold: f64,
    pub text_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectWireRequest {
    pub image: String,
    pub prompts: Vec<WirePrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectWireResponse {
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyWireRequest {
    pub image: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyWireResponse {
    pub probabilities: Vec<f64>,
}

/// Shared response post-processing: validate scores, clamp boxes to the
/// frame, apply the request thresholds, sort and cap.
pub fn finalize_detections(
    raw: Vec<WireDetection>,
    request: &DetectionRequest,
    width: u32,
    height: u32,
) -> Result<DetectOutput, ProviderError> {
    let mut out = DetectOutput::default();
    let (w, h) = (width as f64, height as f64);
    for d in raw {
        if !d.score.is_finite() || d.score < 0.0 || d.score > 1.0 {
            return Err(ProviderError::Protocol(format!(
                "score {} outside [0, 1]",
                d.score
            )));
        }
        let text_score = d.text_score.unwrap_or(d.score);
        if !text_score.is_finite() || text_score < 0.0 {
            return Err(ProviderError::Protocol(format!(
                "text score {text_score} is invalid"
            )));
        }
        if [d.x_min, d.y_min, d.x_max, d.y_max]
            .iter()
            .any(|c| !c.is_finite())
        {
            return Err(ProviderError::Protocol("non-finite box coordinate".into()));
        }
        if d.prompt != request.prompt
            || d.score < request.box_threshold
            || text_score < request.text_threshold
        {
            continue;
        }
        let raw_box = PixelBox {
            x_min: d.x_min,
            y_min: d.y_min,
            x_max: d.x_max,
            y_max: d.y_max,
        };
        let bbox = if raw_box.validate().is_ok() && raw_box.within(w, h) {
            raw_box
        } else {
            match raw_box.clamp_to(w, h) {
                Some(b) => {
                    out.warnings.push(format!(
                        "image {}: box [{}, {}, {}, {}] clamped to the {}x{} frame",
                        request.image_id, d.x_min, d.y_min, d.x_max, d.y_max, width, height
                    ));
                    b
                }
                None => {
                    out.warnings.push(format!(
                        "image {}: empty box [{}, {}, {}, {}] dropped",
                        request.image_id, d.x_min, d.y_min, d.x_max, d.y_max
                    ));
                    continue;
                }
            }
        };
        out.detections.push(ScoredDetection {
            bbox,
            query_label: request.prompt.clone(),
            score: d.score,
            source_image_id: request.image_id.clone(),
        });
    }
    sort_detections(&mut out.detections);
    if out.detections.len() > MAX_DETECTIONS {
        out.warnings.push(format!(
            "image {}: {} detections truncated to {}",
            request.image_id,
            out.detections.len(),
            MAX_DETECTIONS
        ));
        out.detections.truncate(MAX_DETECTIONS);
    }
    Ok(out)
}

/// Fixture classification entry. Either `probabilities` (aligned with
/// `labels`, or with the request schema when `labels` is absent) or a
/// `distribution` map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureClassification {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<HashMap<String, f64>>,
}

impl FixtureClassification {
    fn scores_for(&self, schema: &LabelSchema) -> Result<Vec<f64>, ProviderError> {
        if let Some(map) = &self.distribution {
            if let Some(unknown) = map.keys().find(|k| !schema.contains(k)) {
                return Err(ProviderError::Protocol(format!(
                    "fixture label {unknown:?} not in schema"
                )));
            }
            return Ok(schema
                .labels()
                .iter()
                .map(|l| map.get(l).copied().unwrap_or(0.0))
                .collect());
        }
        let probs = self
            .probabilities
            .as_ref()
            .ok_or_else(|| ProviderError::Protocol("fixture entry has no scores".into()))?;
        match &self.labels {
            None => Ok(probs.clone()),
            Some(labels) => {
                if labels.len() != probs.len() {
                    return Err(ProviderError::Protocol(
                        "fixture labels and probabilities differ in length".into(),
                    ));
                }
                schema
                    .labels()
                    .iter()
                    .map(|l| {
                        labels
                            .iter()
                            .position(|x| x == l)
                            .map(|i| probs[i])
                            .ok_or_else(|| {
                                ProviderError::Protocol(format!("fixture lacks label {l:?}"))
                            })
                    })
                    .collect()
            }
        }
    }
}

/// Per-image fixture document read by [`FileBackedProvider`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureDocument {
    #[serde(default)]
    pub detections: Vec<WireDetection>,
    #[serde(default)]
    pub classifications: Vec<FixtureClassification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_classification: Option<FixtureClassification>,
}

/// Minimum IoU between a crop and a fixture classification box.
const FIXTURE_MATCH_IOU: f64 = 0.5;

enum FixtureSource {
    Directory(PathBuf),
    Memory(HashMap<String, FixtureDocument>),
}

/// Deterministic provider replaying `<image_id>.json` fixture documents.
pub struct FileBackedProvider {
    source: FixtureSource,
    cache: Mutex<HashMap<String, FixtureDocument>>,
}

impl FileBackedProvider {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            source: FixtureSource::Directory(dir.into()),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_documents(docs: HashMap<String, FixtureDocument>) -> Self {
        Self {
            source: FixtureSource::Memory(docs),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn fixture_path(dir: &Path, image_id: &str) -> PathBuf {
        dir.join(format!("{image_id}.json"))
    }

    fn document(&self, image_id: &str) -> Result<FixtureDocument, ProviderError> {
        match &self.source {
            FixtureSource::Memory(docs) => docs.get(image_id).cloned().ok_or_else(|| {
                ProviderError::Protocol(format!("no fixture for image {image_id}"))
            }),
            FixtureSource::Directory(dir) => {
                if let Some(doc) = self.cache.lock().unwrap().get(image_id) {
                    return Ok(doc.clone());
                }
                let path = Self::fixture_path(dir, image_id);
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    ProviderError::Protocol(format!("fixture {}: {e}", path.display()))
                })?;
                let doc: FixtureDocument = serde_json::from_str(&text).map_err(|e| {
                    ProviderError::Protocol(format!("fixture {}: {e}", path.display()))
                })?;
                self.cache
                    .lock()
                    .unwrap()
                    .insert(image_id.to_string(), doc.clone());
                Ok(doc)
            }
        }
    }
}

impl Detector for FileBackedProvider {
    fn detect(
        &self,
        request: &DetectionRequest,
        image: &ImageInput<'_>,
    ) -> Result<DetectOutput, ProviderError> {
        request.validate()?;
        let doc = self.document(&request.image_id)?;
        finalize_detections(doc.detections, request, image.width, image.height)
    }
}

impl Classifier for FileBackedProvider {
    fn classify(
        &self,
        crop: &CropInput<'_>,
        schema: &LabelSchema,
    ) -> Result<ClassifyOutput, ProviderError> {
        if crop.bounds.is_empty() {
            return Err(ProviderError::InvalidRequest("empty crop".into()));
        }
        let doc = self.document(crop.image_id)?;
        let crop_box = crop.bounds.as_box();
        let mut best: Option<(f64, &FixtureClassification)> = None;
        for entry in &doc.classifications {
            let [x0, y0, x1, y1] = entry.bbox;
            let Ok(b) = PixelBox::new(x0, y0, x1, y1) else {
                return Err(ProviderError::Protocol(format!(
                    "fixture classification box {:?} is invalid",
                    entry.bbox
                )));
            };
            let overlap = iou(&b, &crop_box).unwrap_or(0.0);
            if overlap >= FIXTURE_MATCH_IOU && best.is_none_or(|(o, _)| overlap > o) {
                best = Some((overlap, entry));
            }
        }
        let entry = best
            .map(|(_, e)| e)
            .or(doc.default_classification.as_ref())
            .ok_or_else(|| {
                ProviderError::Protocol(format!(
                    "no fixture classification for crop {:?} of image {}",
                    crop.bounds, crop.image_id
                ))
            })?;
        let (distribution, renormalized) =
            ClassDistribution::from_scores(schema, entry.scores_for(schema)?)?;
        let mut warnings = Vec::new();
        if renormalized {
            warnings.push(format!(
                "image {}: fixture distribution renormalized",
                crop.image_id
            ));
        }
        Ok(ClassifyOutput {
            distribution,
            warnings,
        })
    }
}

/// Counting semaphore bounding concurrent requests.
struct Limiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            slots: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap();
        }
        *slots -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.slots.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_concurrency")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_concurrency() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_concurrency(),
        }
    }
}

/// HTTP client for the inference sidecar protocol.
pub struct RemoteProvider {
    config: RemoteConfig,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Self {
        let timeout = Duration::from_secs_f64(config.timeout_secs.max(0.001));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            limiter: Limiter::new(config.max_in_flight),
            config,
            agent,
        }
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let _slot = self.limiter.acquire();
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let payload =
            serde_json::to_vec(body).map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(&payload[..])
            .map_err(|e| ProviderError::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(format!("{url}: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Protocol(format!(
                "{url} answered {status}: {}",
                text.chars().take(200).collect::<String>()
            )));
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol(format!("{url}: {e}")))
    }
}

fn encode_base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn encode_png(raster: &RgbImage) -> Result<Vec<u8>, ProviderError> {
    let mut out = Cursor::new(Vec::new());
    raster
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ProviderError::InvalidRequest(format!("crop encoding failed: {e}")))?;
    Ok(out.into_inner())
}

impl Detector for RemoteProvider {
    fn detect(
        &self,
        request: &DetectionRequest,
        image: &ImageInput<'_>,
    ) -> Result<DetectOutput, ProviderError> {
        request.validate()?;
        let body = DetectWireRequest {
            image: encode_base64(image.bytes),
            prompts: vec![WirePrompt {
                text: request.prompt.clone(),
                box_threshold: request.box_threshold,
                text_threshold: request.text_threshold,
            }],
        };
        let resp: DetectWireResponse = self.post("/v1/detect", &body)?;
        finalize_detections(resp.detections, request, image.width, image.height)
    }
}

impl Classifier for RemoteProvider {
    fn classify(
        &self,
        crop: &CropInput<'_>,
        schema: &LabelSchema,
    ) -> Result<ClassifyOutput, ProviderError> {
        if crop.bounds.is_empty() || crop.raster.width() == 0 || crop.raster.height() == 0 {
            return Err(ProviderError::InvalidRequest("empty crop".into()));
        }
        let body = ClassifyWireRequest {
            image: encode_base64(&encode_png(crop.raster)?),
            labels: schema.labels().to_vec(),
        };
        let resp: ClassifyWireResponse = self.post("/v1/classify", &body)?;
        let (distribution, renormalized) = ClassDistribution::from_scores(schema, resp.probabilities)?;
        let mut warnings = Vec::new();
        if renormalized {
            warnings.push(format!(
                "image {}: classifier probabilities renormalized",
                crop.image_id
            ));
        }
        Ok(ClassifyOutput {
            distribution,
            warnings,
        })
    }
}
