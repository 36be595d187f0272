//! The survey configuration document: camera, schema, thresholds, colors,
//! dedup and clustering parameters, provider selection and server limits.
//! One TOML file; every section is optional and falls back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::DedupConfig;
use crate::evaluation::{IouMode, MatchingStrategy};
use crate::geolocate::CameraModel;
use crate::pipeline::PipelineConfig;
use crate::providers::RemoteConfig;

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "DEBRIS_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    /// Named profile the explicit fields below override.
    pub profile: String,
    pub focal_length_mm: Option<f64>,
    pub sensor_width_mm: Option<f64>,
    pub image_width_px: Option<u32>,
    pub image_height_px: Option<u32>,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            profile: "phantom4pro".into(),
            focal_length_mm: None,
            sensor_width_mm: None,
            image_width_px: None,
            image_height_px: None,
        }
    }
}

impl CameraSection {
    pub fn resolve(&self) -> Result<CameraModel, ConfigError> {
        let mut cam = match self.profile.as_str() {
            "phantom4pro" => CameraModel::phantom4pro(),
            other => return Err(ConfigError::Invalid(format!("unknown camera profile {other:?}"))),
        };
        if let Some(f) = self.focal_length_mm {
            cam.focal_length_m = f / 1000.0;
        }
        if let Some(s) = self.sensor_width_mm {
            cam.sensor_width_m = s / 1000.0;
        }
        if let Some(w) = self.image_width_px {
            cam.image_width_px = w;
        }
        if let Some(h) = self.image_height_px {
            cam.image_height_px = h;
        }
        cam.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub eps_m: f64,
    pub min_pts: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            eps_m: 10.0,
            min_pts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Sidecar JSON documents, one per image, named `<image_id>.json`.
    File { dir: PathBuf },
    Remote(RemoteConfig),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::File {
            dir: PathBuf::from("detections"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub matching: MatchingStrategy,
    pub iou_mode: IouMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub max_upload_bytes: usize,
    pub allowed_types: Vec<String>,
    pub page_size: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 64 * 1024 * 1024,
            allowed_types: vec!["image/jpeg".into(), "image/png".into()],
            page_size: 50,
        }
    }
}

pub fn default_palette() -> BTreeMap<String, String> {
    [
        ("wood", "#8c564b"),
        ("cage", "#9467bd"),
        ("fishing gear", "#1f77b4"),
        ("nature", "#2ca02c"),
        ("plastic", "#d62728"),
        ("metal", "#7f7f7f"),
        ("wheel", "#ff7f0e"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    pub camera: CameraSection,
    pub pipeline: PipelineConfig,
    /// Map color per class, `#rrggbb`.
    pub palette: BTreeMap<String, String>,
    pub dedup: DedupConfig,
    pub clustering: ClusteringConfig,
    pub provider: ProviderConfig,
    pub evaluation: EvaluationConfig,
    pub server: ServerConfig,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self {
            camera: CameraSection::default(),
            pipeline: PipelineConfig::default(),
            palette: default_palette(),
            dedup: DedupConfig::default(),
            clustering: ClusteringConfig::default(),
            provider: ProviderConfig::default(),
            evaluation: EvaluationConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

fn is_hex_color(s: &str) -> bool {
    s.len() == 7 && s.starts_with('#') && s[1..].chars().all(|c| c.is_ascii_hexdigit())
}

impl SurveyConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SurveyConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file. A relative file-provider directory is resolved
    /// against the file's own directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: SurveyConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let ProviderConfig::File { dir } = &mut cfg.provider {
            if dir.is_relative() {
                if let Some(base) = path.parent() {
                    *dir = base.join(&*dir);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit path, else the environment variable, else defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate().map_err(ConfigError::Invalid)?;
        self.camera.resolve()?;
        for label in self.pipeline.schema.labels() {
            match self.palette.get(label) {
                Some(c) if is_hex_color(c) => {}
                Some(c) => {
                    return Err(ConfigError::Invalid(format!("color {c:?} for {label:?} is not #rrggbb")))
                }
                None => return Err(ConfigError::Invalid(format!("no palette color for {label:?}"))),
            }
        }
        if !(self.dedup.radius_m.is_finite() && self.dedup.radius_m > 0.0) {
            return Err(ConfigError::Invalid("dedup radius must be positive".into()));
        }
        if !(self.dedup.ratio > 0.0 && self.dedup.ratio <= 1.0) {
            return Err(ConfigError::Invalid("dedup ratio must be in (0, 1]".into()));
        }
        if !(self.clustering.eps_m.is_finite() && self.clustering.eps_m > 0.0) || self.clustering.min_pts == 0 {
            return Err(ConfigError::Invalid("clustering needs eps_m > 0 and min_pts >= 1".into()));
        }
        if let ProviderConfig::Remote(r) = &self.provider {
            if !(r.timeout_secs > 0.0) || r.max_in_flight == 0 {
                return Err(ConfigError::Invalid("remote provider needs a positive timeout and concurrency".into()));
            }
        }
        if self.server.page_size == 0 || self.server.max_upload_bytes == 0 {
            return Err(ConfigError::Invalid("server limits must be positive".into()));
        }
        Ok(())
    }

    pub fn camera_model(&self) -> CameraModel {
        self.camera.resolve().expect("validated at load")
    }

    pub fn color_for(&self, label: &str) -> &str {
        self.palette.get(label).map_or("#000000", String::as_str)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
