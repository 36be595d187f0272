//! Per-image survey flow: dual-threshold detection, rock subtraction, overlap
//! suppression, oversize filtering, crop classification and geolocation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geolocate::{pixel_to_geo, CameraModel, GeoPoint, ImageMeta};
use crate::geometry::{
    filter_oversized, sort_detections, subtract_overlapping, suppress_overlaps_with,
    OverlapMeasure, PixelBox, ScoredDetection,
};
use crate::providers::{
    argmax_label, ClassDistribution, Classifier, CropInput, DetectionRequest, Detector,
    ImageInput, LabelSchema, ProviderError,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl ThresholdPair {
    pub const fn new(box_threshold: f64, text_threshold: f64) -> Self {
        Self {
            box_threshold,
            text_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub trash_prompt: String,
    pub rock_prompt: String,
    pub threshold_pairs: Vec<ThresholdPair>,
    pub overlap_threshold: f64,
    pub overlap_measure: OverlapMeasure,
    pub max_area_fraction: f64,
    pub rock_containment_threshold: f64,
    pub schema: LabelSchema,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trash_prompt: "all trash".into(),
            rock_prompt: "all rocks".into(),
            threshold_pairs: vec![ThresholdPair::new(0.3, 0.3), ThresholdPair::new(0.15, 0.15)],
            overlap_threshold: 0.40,
            overlap_measure: OverlapMeasure::Iou,
            max_area_fraction: 0.5,
            rock_containment_threshold: 0.5,
            schema: LabelSchema::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.threshold_pairs.is_empty() {
            return Err("at least one threshold pair is required".into());
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        for p in &self.threshold_pairs {
            if !in_unit(p.box_threshold) || !in_unit(p.text_threshold) {
                return Err(format!(
                    "threshold pair ({}, {}) outside [0, 1]",
                    p.box_threshold, p.text_threshold
                ));
            }
        }
        for (name, v) in [
            ("overlap_threshold", self.overlap_threshold),
            ("max_area_fraction", self.max_area_fraction),
            ("rock_containment_threshold", self.rock_containment_threshold),
        ] {
            if !in_unit(v) {
                return Err(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.trash_prompt.trim().is_empty() || self.rock_prompt.trim().is_empty() {
            return Err("prompts must be non-empty".into());
        }
        Ok(())
    }
}

/// A classified, optionally geolocated detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebrisRecord {
    pub record_id: String,
    pub source_image_id: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub detection_score: f64,
    pub predicted_label: String,
    #[serde(default)]
    pub corrected_label: Option<String>,
    /// Absent for records restored from a CSV export.
    #[serde(default)]
    pub class_distribution: Option<ClassDistribution>,
    #[serde(default)]
    pub geo_position: Option<GeoPoint>,
    /// Altitude of the source image, meters.
    #[serde(default)]
    pub altitude: Option<f64>,
    #[serde(default)]
    pub duplicate_group: Option<String>,
    #[serde(default)]
    pub is_canonical: bool,
}

impl DebrisRecord {
    /// Corrected label when present, otherwise the predicted one.
    pub fn effective_label(&self) -> &str {
        self.corrected_label
            .as_deref()
            .unwrap_or(&self.predicted_label)
    }

    /// Canonical or not part of any duplicate group.
    pub fn is_survivor(&self) -> bool {
        self.duplicate_group.is_none() || self.is_canonical
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("image {image_id}: {source}")]
    Provider {
        image_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("image {image_id}: cannot decode: {reason}")]
    Decode { image_id: String, reason: String },
    #[error("every image failed: {}", .0.join("; "))]
    AllImagesFailed(Vec<String>),
    #[error("inference provider unavailable, nothing was stored: {0}")]
    ProviderUnavailable(String),
    #[error("survey has no images")]
    EmptySurvey,
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

/// An image ready for processing.
#[derive(Debug, Clone)]
pub struct SurveyImage {
    pub image_id: String,
    pub bytes: std::sync::Arc<Vec<u8>>,
    pub meta: Option<ImageMeta>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageDetections {
    pub detections: Vec<ScoredDetection>,
    pub warnings: Vec<String>,
}

fn provider_err(image_id: &str) -> impl Fn(ProviderError) -> PipelineError + '_ {
    move |source| PipelineError::Provider {
        image_id: image_id.to_string(),
        source,
    }
}

/// Run every threshold pair for the trash and rock prompts, then apply
/// union, rock subtraction, overlap suppression and the oversize filter, in
/// that order.
pub fn detect_image(
    image: &ImageInput<'_>,
    config: &PipelineConfig,
    detector: &dyn Detector,
) -> Result<ImageDetections, PipelineError> {
    let mut trash = Vec::new();
    let mut rocks = Vec::new();
    let mut warnings = Vec::new();
    for pair in &config.threshold_pairs {
        for (prompt, sink) in [
            (&config.trash_prompt, &mut trash),
            (&config.rock_prompt, &mut rocks),
        ] {
            let request = DetectionRequest {
                image_id: image.image_id.to_string(),
                prompt: prompt.clone(),
                box_threshold: pair.box_threshold,
                text_threshold: pair.text_threshold,
            };
            let out = detector
                .detect(&request, image)
                .map_err(provider_err(image.image_id))?;
            sink.extend(out.detections);
            warnings.extend(out.warnings);
        }
    }

    let kept = subtract_overlapping(&trash, &rocks, config.rock_containment_threshold);
    let kept = suppress_overlaps_with(&kept, config.overlap_threshold, config.overlap_measure);
    let mut kept = filter_oversized(
        &kept,
        image.width as f64,
        image.height as f64,
        config.max_area_fraction,
    );
    sort_detections(&mut kept);
    Ok(ImageDetections {
        detections: kept,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassifiedImage {
    pub records: Vec<DebrisRecord>,
    pub warnings: Vec<String>,
}

pub fn record_id(prefix: &str, image_id: &str, index: usize) -> String {
    if prefix.is_empty() {
        format!("{image_id}-{index:03}")
    } else {
        format!("{prefix}-{image_id}-{index:03}")
    }
}

/// One record per detection, labeled by the argmax of its crop's class
/// distribution. Detections whose crop is empty are dropped with a warning.
pub fn classify_detections(
    image_id: &str,
    raster: &image::RgbImage,
    detections: &[ScoredDetection],
    config: &PipelineConfig,
    classifier: &dyn Classifier,
    record_prefix: &str,
) -> Result<ClassifiedImage, PipelineError> {
    let mut out = ClassifiedImage::default();
    let (w, h) = raster.dimensions();
    for (index, det) in detections.iter().enumerate() {
        let bounds = det.bbox.crop_bounds(w, h);
        if bounds.is_empty() {
            out.warnings.push(format!(
                "image {image_id}: detection {index} has an empty crop and was dropped"
            ));
            continue;
        }
        let crop =
            image::imageops::crop_imm(raster, bounds.x0, bounds.y0, bounds.width(), bounds.height())
                .to_image();
        let result = classifier
            .classify(
                &CropInput {
                    image_id,
                    bounds,
                    raster: &crop,
                },
                &config.schema,
            )
            .map_err(provider_err(image_id))?;
        out.warnings.extend(result.warnings);
        out.records.push(DebrisRecord {
            record_id: record_id(record_prefix, image_id, index),
            source_image_id: image_id.to_string(),
            bbox: det.bbox,
            detection_score: det.score,
            predicted_label: argmax_label(&result.distribution).to_string(),
            corrected_label: None,
            class_distribution: Some(result.distribution),
            geo_position: None,
            altitude: None,
            duplicate_group: None,
            is_canonical: false,
        });
    }
    Ok(out)
}

/// Fill geo position and altitude from the image metadata. The camera's
/// pixel dimensions are replaced by the actual frame size so resized frames
/// keep a correct ground sample distance.
pub fn geolocate_records(
    records: &mut [DebrisRecord],
    meta: &ImageMeta,
    camera: &CameraModel,
    width: u32,
    height: u32,
) -> Vec<String> {
    let cam = CameraModel {
        image_width_px: width,
        image_height_px: height,
        ..camera.clone()
    };
    let mut warnings = Vec::new();
    for r in records {
        let (cx, cy) = r.bbox.center();
        match pixel_to_geo(meta, &cam, cx, cy) {
            Ok(p) => {
                r.geo_position = Some(p);
                r.altitude = Some(meta.altitude);
            }
            Err(e) => warnings.push(format!("record {}: not geolocated: {e}", r.record_id)),
        }
    }
    warnings
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurveyRun {
    pub records: Vec<DebrisRecord>,
    pub failures: Vec<ImageFailure>,
    pub warnings: Vec<String>,
}

struct ImageOutcome {
    records: Vec<DebrisRecord>,
    warnings: Vec<String>,
}

fn process_image(
    image: &SurveyImage,
    config: &PipelineConfig,
    camera: &CameraModel,
    detector: &dyn Detector,
    classifier: &dyn Classifier,
    record_prefix: &str,
) -> Result<ImageOutcome, PipelineError> {
    let decoded = image::load_from_memory(&image.bytes).map_err(|e| PipelineError::Decode {
        image_id: image.image_id.clone(),
        reason: e.to_string(),
    })?;
    let raster = decoded.to_rgb8();
    let (w, h) = raster.dimensions();
    let input = ImageInput {
        image_id: &image.image_id,
        width: w,
        height: h,
        bytes: &image.bytes,
    };
    let detected = detect_image(&input, config, detector)?;
    let mut classified = classify_detections(
        &image.image_id,
        &raster,
        &detected.detections,
        config,
        classifier,
        record_prefix,
    )?;
    let mut warnings = detected.warnings;
    warnings.append(&mut classified.warnings);
    match &image.meta {
        Some(meta) => warnings.extend(geolocate_records(
            &mut classified.records,
            meta,
            camera,
            w,
            h,
        )),
        None => {
            if !classified.records.is_empty() {
                warnings.push(format!(
                    "image {}: no GPS metadata, records left unmapped",
                    image.image_id
                ));
            }
        }
    }
    Ok(ImageOutcome {
        records: classified.records,
        warnings,
    })
}

/// Process every image independently (in parallel) and concatenate the
/// records in image order.
///
/// A per-image decode or protocol failure is reported and skipped. A
/// transport failure means the provider is down, so the whole run is
/// abandoned and nothing is returned for persistence.
pub fn run_survey(
    images: &[SurveyImage],
    config: &PipelineConfig,
    camera: &CameraModel,
    detector: &dyn Detector,
    classifier: &dyn Classifier,
    record_prefix: &str,
) -> Result<SurveyRun, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    if images.is_empty() {
        return Err(PipelineError::EmptySurvey);
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| images[a].image_id.cmp(&images[b].image_id));

    let results: Vec<Result<ImageOutcome, PipelineError>> = order
        .par_iter()
        .map(|&i| process_image(&images[i], config, camera, detector, classifier, record_prefix))
        .collect();

    let mut run = SurveyRun::default();
    for (&i, result) in order.iter().zip(results) {
        match result {
            Ok(mut outcome) => {
                run.records.append(&mut outcome.records);
                run.warnings.append(&mut outcome.warnings);
            }
            Err(PipelineError::Provider {
                source: ProviderError::Transport(msg),
                ..
            }) => return Err(PipelineError::ProviderUnavailable(msg)),
            Err(e) => run.failures.push(ImageFailure {
                image_id: images[i].image_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if run.failures.len() == images.len() {
        return Err(PipelineError::AllImagesFailed(
            run.failures.iter().map(|f| f.reason.clone()).collect(),
        ));
    }
    Ok(run)
}

#[cfg(test)]
pub(crate) fn test_record(id: &str, score: f64) -> DebrisRecord {
    DebrisRecord {
        record_id: id.to_string(),
        source_image_id: "img".into(),
        bbox: PixelBox {
            x_min: 10.0,
            y_min: 10.0,
            x_max: 30.0,
            y_max: 30.0,
        },
        detection_score: score,
        predicted_label: "plastic".into(),
        corrected_label: None,
        class_distribution: None,
        geo_position: None,
        altitude: None,
        duplicate_group: None,
        is_canonical: false,
    }
}
