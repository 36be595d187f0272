//! Camera ground-sample-distance math, pixel to WGS-84 projection, great-circle
//! distance and density clustering of geolocated debris.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::SpatialIndex;

/// Mean Earth radius used for every distance computation in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Length of one degree of latitude on the [`EARTH_RADIUS_M`] sphere.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

/// Tangent-plane projection is refused at or beyond this latitude.
pub const MAX_PROJECTABLE_LATITUDE: f64 = 89.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid camera model: {0}")]
    Camera(String),
    #[error("invalid image metadata: {0}")]
    Meta(String),
    #[error("pixel ({0}, {1}) lies outside the {2}x{3} image")]
    PixelOutOfBounds(f64, f64, u32, u32),
    #[error("latitude {0} too close to a pole for tangent-plane projection")]
    PolarLatitude(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_length_m: f64,
    pub sensor_width_m: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

impl CameraModel {
    /// 1" 20 MP drone camera: 8.8 mm lens, 13.2 mm sensor, 5472x3648 frames.
    pub fn phantom4pro() -> Self {
        Self {
            focal_length_m: 0.0088,
            sensor_width_m: 0.0132,
            image_width_px: 5472,
            image_height_px: 3648,
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.focal_length_m.is_finite() && self.focal_length_m > 0.0) {
            return Err(GeoError::Camera(format!(
                "focal length must be positive, got {}",
                self.focal_length_m
            )));
        }
        if !(self.sensor_width_m.is_finite() && self.sensor_width_m > 0.0) {
            return Err(GeoError::Camera(format!(
                "sensor width must be positive, got {}",
                self.sensor_width_m
            )));
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return Err(GeoError::Camera("image dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub latitude: f64,
    pub longitude: f64,
    /// Meters above ground.
    pub altitude: f64,
    /// Degrees clockwise from true north that the top of the frame faces.
    #[serde(default)]
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captured_at: Option<String>,
}

impl ImageMeta {
    pub fn new(latitude: f64, longitude: f64, altitude: f64) -> Self {
        Self {
            latitude,
            longitude,
            altitude,
            heading: 0.0,
            captured_at: None,
        }
    }

    pub fn position(&self) -> GeoPoint {
        GeoPoint {
            latitude: self.latitude,
            longitude: self.longitude,
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        self.position()
            .validate()
            .map_err(|e| GeoError::Meta(e.to_string()))?;
        if !(self.altitude.is_finite() && self.altitude > 0.0) {
            return Err(GeoError::Meta(format!(
                "altitude must be positive, got {}",
                self.altitude
            )));
        }
        if !self.heading.is_finite() {
            return Err(GeoError::Meta("heading must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Self {
        Self {
            latitude,
            longitude,
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.latitude.is_finite() && (-90.0..=90.0).contains(&self.latitude)) {
            return Err(GeoError::Meta(format!(
                "latitude {} outside [-90, 90]",
                self.latitude
            )));
        }
        if !(self.longitude.is_finite() && (-180.0..=180.0).contains(&self.longitude)) {
            return Err(GeoError::Meta(format!(
                "longitude {} outside [-180, 180]",
                self.longitude
            )));
        }
        Ok(())
    }
}

/// Ground sample distance in meters per pixel: `A * S / (f * I)`.
pub fn gsd(meta: &ImageMeta, cam: &CameraModel) -> Result<f64, GeoError> {
    cam.validate()?;
    if !(meta.altitude.is_finite() && meta.altitude > 0.0) {
        return Err(GeoError::Meta(format!(
            "altitude must be positive, got {}",
            meta.altitude
        )));
    }
    Ok(meta.altitude * cam.sensor_width_m / (cam.focal_length_m * cam.image_width_px as f64))
}

/// Ground displacement of pixel `(px, py)` from the frame center in meters,
/// returned as `(east, north)`.
pub fn pixel_offset_m(
    meta: &ImageMeta,
    cam: &CameraModel,
    px: f64,
    py: f64,
) -> Result<(f64, f64), GeoError> {
    let scale = gsd(meta, cam)?;
    let (w, h) = (cam.image_width_px, cam.image_height_px);
    if !(px.is_finite() && py.is_finite())
        || px < 0.0
        || py < 0.0
        || px > w as f64
        || py > h as f64
    {
        return Err(GeoError::PixelOutOfBounds(px, py, w, h));
    }
    let right = (px - 0.5 * w as f64) * scale;
    let up = -(py - 0.5 * h as f64) * scale;
    let heading = meta.heading.rem_euclid(360.0).to_radians();
    let (sin_h, cos_h) = heading.sin_cos();
    // top of frame faces `heading`; image right is that direction turned 90° clockwise
    let east = right * cos_h + up * sin_h;
    let north = -right * sin_h + up * cos_h;
    Ok((east, north))
}

/// Project an image pixel onto the ground with a local tangent-plane
/// approximation around the camera position.
pub fn pixel_to_geo(
    meta: &ImageMeta,
    cam: &CameraModel,
    px: f64,
    py: f64,
) -> Result<GeoPoint, GeoError> {
    meta.validate()?;
    if meta.latitude.abs() >= MAX_PROJECTABLE_LATITUDE {
        return Err(GeoError::PolarLatitude(meta.latitude));
    }
    let (east, north) = pixel_offset_m(meta, cam, px, py)?;
    Ok(offset_point(&meta.position(), east, north))
}

/// Move `origin` by `east`/`north` meters on the tangent plane.
pub fn offset_point(origin: &GeoPoint, east: f64, north: f64) -> GeoPoint {
    let d_lat = north / METERS_PER_DEGREE;
    let d_lon = east / (METERS_PER_DEGREE * origin.latitude.to_radians().cos());
    let mut lon = origin.longitude + d_lon;
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint {
        latitude: origin.latitude + d_lat,
        longitude: lon,
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let phi1 = a.latitude.to_radians();
    let phi2 = b.latitude.to_radians();
    let d_phi = phi2 - phi1;
    let d_lambda = (b.longitude - a.longitude).to_radians();
    let h = (d_phi * 0.5).sin().powi(2) + phi1.cos() * phi2.cos() * (d_lambda * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Density-based clustering (DBSCAN) with the haversine metric.
///
/// Core points and their eps-connected components do not depend on input
/// order. Border points join the cluster of their nearest core point, so the
/// partition is order independent as well; only the numbering follows input
/// order (cluster ids are assigned by first member encountered).
pub fn cluster_hotspots(points: &[GeoPoint], eps_m: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let eps_m = eps_m.max(f64::MIN_POSITIVE);
    let index = SpatialIndex::build(points.iter().copied().map(Some), eps_m);
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| index.within(&points[i], eps_m, None))
        .collect();
    // a point's neighborhood includes itself
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() + 1 >= min_pts).collect();

    let mut component = vec![usize::MAX; n];
    let mut n_components = 0;
    for seed in 0..n {
        if !is_core[seed] || component[seed] != usize::MAX {
            continue;
        }
        component[seed] = n_components;
        let mut stack = vec![seed];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if is_core[q] && component[q] == usize::MAX {
                    component[q] = n_components;
                    stack.push(q);
                }
            }
        }
        n_components += 1;
    }

    let mut raw: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if is_core[i] {
            raw[i] = Some(component[i]);
            continue;
        }
        let nearest = neighbors[i]
            .iter()
            .copied()
            .filter(|&q| is_core[q])
            .min_by(|&a, &b| {
                haversine(&points[i], &points[a])
                    .total_cmp(&haversine(&points[i], &points[b]))
                    .then_with(|| points[a].latitude.total_cmp(&points[b].latitude))
                    .then_with(|| points[a].longitude.total_cmp(&points[b].longitude))
            });
        raw[i] = nearest.map(|q| component[q]);
    }

    let mut renumber = vec![usize::MAX; n_components];
    let mut next = 0;
    raw.into_iter()
        .map(|c| {
            c.map(|c| {
                if renumber[c] == usize::MAX {
                    renumber[c] = next;
                    next += 1;
                }
                renumber[c]
            })
        })
        .collect()
}
