//! C interface to the survey engine.
//!
//! Every function returns a [`DebrisStatus`]; results go through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`debris_last_error`]. Objects are handed out as opaque handles and must be
//! released with the matching `_free` function. Byte results come back as a
//! [`DebrisBuffer`] owned by the caller until [`debris_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use debris_core::config::SurveyConfig;
use debris_core::geolocate::{self, CameraModel, GeoPoint, ImageMeta};
use debris_core::geometry::{self, PixelBox, ScoredDetection};
use debris_core::interface::{self, AppError};
use debris_core::sift::{self, GrayRaster, SiftDescriptorSet};
use debris_core::store::{StoreError, SurveyStore};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DebrisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    /// Input data rejected: bad CSV, unknown label, undecodable image.
    InvalidData = 4,
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DebrisExportFormat {
    Csv = 0,
    GeoJson = 1,
}

/// Axis-aligned pixel box, corners in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebrisBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebrisCamera {
    pub focal_length_m: f64,
    pub sensor_width_m: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebrisImageMeta {
    pub latitude: f64,
    pub longitude: f64,
    /// Meters above ground.
    pub altitude: f64,
    /// Degrees clockwise from north faced by the top of the frame.
    pub heading: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebrisGeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

/// Bytes allocated by the library.
#[repr(C)]
#[derive(Debug)]
pub struct DebrisBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// SIFT keypoints and descriptors of one grayscale image.
pub struct DebrisFeatures(SiftDescriptorSet);

/// An open survey store directory.
pub struct DebrisStore(SurveyStore);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DebrisStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(DebrisStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl ToString) -> Self {
        Failure(DebrisStatus::InvalidArgument, msg.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound { .. } => DebrisStatus::NotFound,
            StoreError::Io(_) | StoreError::Corrupt(_) => DebrisStatus::Io,
            StoreError::InvalidId(_) => DebrisStatus::InvalidArgument,
            _ => DebrisStatus::InvalidData,
        };
        Failure(status, e.to_string())
    }
}

impl From<AppError> for Failure {
    fn from(e: AppError) -> Self {
        match e {
            AppError::Store(s) => s.into(),
            AppError::Config(m) => Failure(DebrisStatus::InvalidArgument, m),
            AppError::Provider(m) | AppError::Data(m) => Failure(DebrisStatus::InvalidData, m),
        }
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DebrisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DebrisStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal error");
            DebrisStatus::Internal
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn input<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))
}

fn pixel_box(b: &DebrisBox) -> Result<PixelBox, Failure> {
    PixelBox::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(Failure::invalid)
}

fn camera(c: &DebrisCamera) -> CameraModel {
    CameraModel {
        focal_length_m: c.focal_length_m,
        sensor_width_m: c.sensor_width_m,
        image_width_px: c.image_width_px,
        image_height_px: c.image_height_px,
    }
}

fn meta(m: &DebrisImageMeta) -> ImageMeta {
    ImageMeta {
        heading: m.heading,
        ..ImageMeta::new(m.latitude, m.longitude, m.altitude)
    }
}

fn into_buffer(bytes: Vec<u8>) -> DebrisBuffer {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    DebrisBuffer {
        data: Box::into_raw(boxed) as *mut u8,
        len,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn debris_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn debris_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `a`, `b` and `out_iou` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn debris_iou(a: *const DebrisBox, b: *const DebrisBox, out_iou: *mut f64) -> DebrisStatus {
    guard(|| {
        let a = pixel_box(input(a, "a")?)?;
        let b = pixel_box(input(b, "b")?)?;
        *out(out_iou, "out_iou")? = geometry::iou(&a, &b).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// Greedy overlap suppression. Writes the indices of kept boxes, highest
/// score first, to `out_kept` (room for `n` entries) and their number to
/// `out_len`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` elements; `out_kept` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn debris_suppress_overlaps(
    boxes: *const DebrisBox,
    scores: *const f64,
    n: usize,
    threshold: f64,
    out_kept: *mut usize,
    out_len: *mut usize,
) -> DebrisStatus {
    guard(|| {
        let out_len = out(out_len, "out_len")?;
        if n == 0 {
            *out_len = 0;
            return Ok(());
        }
        if boxes.is_null() || scores.is_null() || out_kept.is_null() {
            return Err(Failure::null("boxes, scores or out_kept"));
        }
        let boxes = std::slice::from_raw_parts(boxes, n);
        let scores = std::slice::from_raw_parts(scores, n);
        let dets = boxes
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (b, &score))| {
                Ok(ScoredDetection {
                    bbox: pixel_box(b)?,
                    query_label: String::new(),
                    score,
                    // carries the caller's index through suppression
                    source_image_id: i.to_string(),
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let kept = geometry::suppress_overlaps(&dets, threshold);
        let dst = std::slice::from_raw_parts_mut(out_kept, n);
        for (slot, d) in dst.iter_mut().zip(&kept) {
            *slot = d.source_image_id.parse().expect("index round trip");
        }
        *out_len = kept.len();
        Ok(())
    })
}

/// Ground sample distance in meters per pixel.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn debris_gsd(
    meta_in: *const DebrisImageMeta,
    cam: *const DebrisCamera,
    out_gsd: *mut f64,
) -> DebrisStatus {
    guard(|| {
        let g = geolocate::gsd(&meta(input(meta_in, "meta")?), &camera(input(cam, "camera")?))
            .map_err(Failure::invalid)?;
        *out(out_gsd, "out_gsd")? = g;
        Ok(())
    })
}

/// Ground position of pixel `(px, py)`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn debris_pixel_to_geo(
    meta_in: *const DebrisImageMeta,
    cam: *const DebrisCamera,
    px: f64,
    py: f64,
    out_point: *mut DebrisGeoPoint,
) -> DebrisStatus {
    guard(|| {
        let p = geolocate::pixel_to_geo(&meta(input(meta_in, "meta")?), &camera(input(cam, "camera")?), px, py)
            .map_err(Failure::invalid)?;
        *out(out_point, "out_point")? = DebrisGeoPoint {
            latitude: p.latitude,
            longitude: p.longitude,
        };
        Ok(())
    })
}

/// Great-circle distance in meters.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn debris_haversine(
    a: *const DebrisGeoPoint,
    b: *const DebrisGeoPoint,
    out_m: *mut f64,
) -> DebrisStatus {
    guard(|| {
        let a = input(a, "a")?;
        let b = input(b, "b")?;
        *out(out_m, "out_m")? = geolocate::haversine(
            &GeoPoint::new(a.latitude, a.longitude),
            &GeoPoint::new(b.latitude, b.longitude),
        );
        Ok(())
    })
}

/// Extract SIFT features from a row-major grayscale image with values in
/// `[0, 1]`.
///
/// # Safety
/// `pixels` must hold `width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn debris_features_extract(
    pixels: *const f32,
    width: usize,
    height: usize,
    out_features: *mut *mut DebrisFeatures,
) -> DebrisStatus {
    guard(|| {
        let slot = out(out_features, "out_features")?;
        if pixels.is_null() {
            return Err(Failure::null("pixels"));
        }
        let len = width
            .checked_mul(height)
            .ok_or_else(|| Failure::invalid("image dimensions overflow"))?;
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let raster = GrayRaster::new(width, height, data).map_err(Failure::invalid)?;
        let set = sift::extract(&raster).map_err(Failure::invalid)?;
        *slot = Box::into_raw(Box::new(DebrisFeatures(set)));
        Ok(())
    })
}

/// Number of keypoints.
///
/// # Safety
/// `features` must come from [`debris_features_extract`].
#[no_mangle]
pub unsafe extern "C" fn debris_features_len(features: *const DebrisFeatures, out_len: *mut usize) -> DebrisStatus {
    guard(|| {
        *out(out_len, "out_len")? = input(features, "features")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `features` must come from [`debris_features_extract`] and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn debris_features_free(features: *mut DebrisFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Ratio-test matches from `a` to `b`, one-to-one.
///
/// # Safety
/// Handles must be live; `out_count` valid.
#[no_mangle]
pub unsafe extern "C" fn debris_features_match(
    a: *const DebrisFeatures,
    b: *const DebrisFeatures,
    ratio: f32,
    out_count: *mut usize,
) -> DebrisStatus {
    guard(|| {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Failure::invalid(format!("ratio must be in (0, 1], got {ratio}")));
        }
        let m = sift::match_descriptors(&input(a, "a")?.0, &input(b, "b")?.0, ratio);
        *out(out_count, "out_count")? = m.match_count;
        Ok(())
    })
}

/// Duplicate verdict with the default ratio: true when the better matching
/// direction reaches `min_matches`.
///
/// # Safety
/// Handles must be live; out pointers valid. `out_count` may be null.
#[no_mangle]
pub unsafe extern "C" fn debris_features_is_duplicate(
    a: *const DebrisFeatures,
    b: *const DebrisFeatures,
    min_matches: usize,
    out_duplicate: *mut bool,
    out_count: *mut usize,
) -> DebrisStatus {
    guard(|| {
        let v = sift::duplicate_verdict(&input(a, "a")?.0, &input(b, "b")?.0, min_matches, sift::DEFAULT_RATIO);
        *out(out_duplicate, "out_duplicate")? = v.duplicate;
        if let Some(c) = out_count.as_mut() {
            *c = v.match_count;
        }
        Ok(())
    })
}

/// Open (or create) a store directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_store` valid.
#[no_mangle]
pub unsafe extern "C" fn debris_store_open(path: *const c_char, out_store: *mut *mut DebrisStore) -> DebrisStatus {
    guard(|| {
        let slot = out(out_store, "out_store")?;
        let store = SurveyStore::open(text(path, "path")?)?;
        *slot = Box::into_raw(Box::new(DebrisStore(store)));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`debris_store_open`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn debris_store_free(store: *mut DebrisStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of records in a survey.
///
/// # Safety
/// `store` must be live; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn debris_store_record_count(
    store: *const DebrisStore,
    survey_id: *const c_char,
    out_count: *mut usize,
) -> DebrisStatus {
    guard(|| {
        let survey = input(store, "store")?.0.survey(text(survey_id, "survey_id")?)?;
        *out(out_count, "out_count")? = survey.records.len();
        Ok(())
    })
}

/// Replace a survey's records with a CSV export, creating the survey when
/// needed. Writes the number of imported records to `out_count` (may be null).
///
/// # Safety
/// `store` must be live; `data` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn debris_store_import_csv(
    store: *const DebrisStore,
    survey_id: *const c_char,
    data: *const u8,
    len: usize,
    out_count: *mut usize,
) -> DebrisStatus {
    guard(|| {
        let store = &input(store, "store")?.0;
        let survey = text(survey_id, "survey_id")?;
        if data.is_null() && len > 0 {
            return Err(Failure::null("data"));
        }
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(data, len) };
        let n = interface::import_csv(store, survey, bytes, &SurveyConfig::default())?;
        if let Some(c) = out_count.as_mut() {
            *c = n;
        }
        Ok(())
    })
}

/// Export a survey as CSV or GeoJSON into a new buffer.
///
/// # Safety
/// `store` must be live; `out_buffer` valid. Free the result with
/// [`debris_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn debris_store_export(
    store: *const DebrisStore,
    survey_id: *const c_char,
    format: DebrisExportFormat,
    out_buffer: *mut DebrisBuffer,
) -> DebrisStatus {
    guard(|| {
        let slot = out(out_buffer, "out_buffer")?;
        let store = &input(store, "store")?.0;
        let survey = text(survey_id, "survey_id")?;
        let bytes = match format {
            DebrisExportFormat::Csv => interface::export_csv(store, survey)?,
            DebrisExportFormat::GeoJson => interface::export_geojson(store, survey, &SurveyConfig::default())?,
        };
        *slot = into_buffer(bytes);
        Ok(())
    })
}

/// # Safety
/// `buffer` must have been filled by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn debris_buffer_free(buffer: *mut DebrisBuffer) {
    let Some(b) = buffer.as_mut() else {
        return;
    };
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
    b.data = ptr::null_mut();
    b.len = 0;
}
