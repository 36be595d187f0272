//! Survey persistence: one JSON database file plus content-addressed image
//! blobs under a root directory.
//!
//! Every mutation runs against a copy of the state, is written to disk with
//! an atomic rename and only then becomes visible to readers, so a failed
//! write leaves both disk and memory untouched.

mod export;
pub mod meta;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use export::{
    export_csv, export_geojson, import_csv, survey_stats, ClassCount, ClusterSummary, MapStyle,
    SurveyStats, CSV_COLUMNS,
};

use crate::dedup::{DedupOutcome, DuplicateGroup};
use crate::geolocate::ImageMeta;
use crate::pipeline::{DebrisRecord, ImageFailure, SurveyImage};
use crate::providers::LabelSchema;
use crate::sift::GrayRaster;

const DB_FILE: &str = "store.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown {kind} {id:?}")]
    NotFound { kind: &'static str, id: String },
    #[error("{0}")]
    Conflict(String),
    #[error("cannot decode image: {0}")]
    InvalidImage(String),
    #[error("label {label:?} is not one of: {}", .valid.join(", "))]
    UnknownLabel { label: String, valid: Vec<String> },
    #[error("line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error("CSV header does not match the export schema: {0}")]
    SchemaMismatch(String),
    #[error("invalid identifier {0:?}: use letters, digits, '-', '_' or '.'")]
    InvalidId(String),
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("store database is corrupt: {0}")]
    Corrupt(String),
}

impl StoreError {
    fn not_found(kind: &'static str, id: &str) -> Self {
        StoreError::NotFound {
            kind,
            id: id.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    /// Hex sha256 of the original bytes.
    pub blob: String,
    pub width: u32,
    pub height: u32,
    /// `None` when the image carries no usable GPS block; such images are
    /// processed but their records are not placed on the map.
    pub meta: Option<ImageMeta>,
}

impl ImageEntry {
    pub fn mapped(&self) -> bool {
        self.meta.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub record_id: String,
    pub old_label: String,
    pub new_label: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Survey {
    pub survey_id: String,
    pub schema: LabelSchema,
    pub images: BTreeMap<String, ImageEntry>,
    /// Sorted by image id, then record id.
    pub records: Vec<DebrisRecord>,
    pub groups: Vec<DuplicateGroup>,
    pub corrections: Vec<Correction>,
    #[serde(default)]
    pub failures: Vec<ImageFailure>,
    #[serde(default)]
    pub detected: bool,
}

impl Survey {
    fn new(survey_id: &str, schema: LabelSchema) -> Self {
        Self {
            survey_id: survey_id.to_string(),
            schema,
            images: BTreeMap::new(),
            records: Vec::new(),
            groups: Vec::new(),
            corrections: Vec::new(),
            failures: Vec::new(),
            detected: false,
        }
    }

    pub fn record(&self, record_id: &str) -> Option<&DebrisRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Current label of every record, recomputed by replaying the audit log
    /// over the stored predictions.
    pub fn replay_corrections(&self) -> BTreeMap<String, String> {
        let mut labels: BTreeMap<String, String> = self
            .records
            .iter()
            .map(|r| (r.record_id.clone(), r.predicted_label.clone()))
            .collect();
        for c in &self.corrections {
            if let Some(l) = labels.get_mut(&c.record_id) {
                *l = c.new_label.clone();
            }
        }
        labels
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StoreState {
    version: u32,
    surveys: BTreeMap<String, Survey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub meta: Option<ImageMeta>,
    /// False when the same bytes were already stored under this id.
    pub added: bool,
}

/// Ids appear in URLs and file names.
pub fn validate_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub struct SurveyStore {
    root: PathBuf,
    state: RwLock<Arc<StoreState>>,
    writer: Mutex<()>,
}

impl std::fmt::Debug for SurveyStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SurveyStore").field("root", &self.root).finish()
    }
}

impl SurveyStore {
    /// Open the store at `root`, creating an empty one if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("blobs"))?;
        let db = root.join(DB_FILE);
        let state = if db.exists() {
            let bytes = std::fs::read(&db)?;
            let state: StoreState =
                serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            if state.version != FORMAT_VERSION {
                return Err(StoreError::Corrupt(format!("unsupported format version {}", state.version)));
            }
            state
        } else {
            StoreState {
                version: FORMAT_VERSION,
                surveys: BTreeMap::new(),
            }
        };
        Ok(Self {
            root,
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn snapshot(&self) -> Arc<StoreState> {
        self.state.read().expect("store lock").clone()
    }

    /// Serialize writers, apply `f` to a copy, persist, then publish.
    fn mutate<T>(&self, f: impl FnOnce(&mut StoreState) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let _guard = self.writer.lock().expect("writer lock");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        let bytes = serde_json::to_vec(&next).expect("plain data");
        write_atomic(&self.root.join(DB_FILE), &bytes)?;
        *self.state.write().expect("store lock") = Arc::new(next);
        Ok(out)
    }

    pub fn survey_ids(&self) -> Vec<String> {
        self.snapshot().surveys.keys().cloned().collect()
    }

    pub fn survey(&self, survey_id: &str) -> Result<Survey, StoreError> {
        self.snapshot()
            .surveys
            .get(survey_id)
            .cloned()
            .ok_or_else(|| StoreError::not_found("survey", survey_id))
    }

    /// Create a survey. With no id, the next free `survey-NNNN` is used.
    pub fn create_survey(&self, survey_id: Option<&str>, schema: LabelSchema) -> Result<String, StoreError> {
        self.mutate(|st| {
            let id = match survey_id {
                Some(id) => {
                    validate_id(id)?;
                    if st.surveys.contains_key(id) {
                        return Err(StoreError::Conflict(format!("survey {id:?} already exists")));
                    }
                    id.to_string()
                }
                None => (1..)
                    .map(|n| format!("survey-{n:04}"))
                    .find(|id| !st.surveys.contains_key(id))
                    .expect("unbounded"),
            };
            st.surveys.insert(id.clone(), Survey::new(&id, schema));
            Ok(id)
        })
    }

    /// Existing survey or a fresh one under that id.
    pub fn ensure_survey(&self, survey_id: &str, schema: LabelSchema) -> Result<(), StoreError> {
        if self.snapshot().surveys.contains_key(survey_id) {
            return Ok(());
        }
        self.create_survey(Some(survey_id), schema).map(|_| ())
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join("blobs").join(&hash[..2]).join(hash)
    }

    fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = sha256_hex(bytes);
        let path = self.blob_path(&hash);
        if !path.exists() {
            std::fs::create_dir_all(path.parent().expect("nested"))?;
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn blob(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(StoreError::not_found("blob", hash));
        }
        std::fs::read(self.blob_path(hash)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::not_found("blob", hash),
            _ => StoreError::Io(e),
        })
    }

    /// Store an uploaded image and read its GPS block. `image_id` defaults to
    /// a prefix of the content hash. Re-ingesting identical bytes under the
    /// same id is a no-op; different bytes under a used id are a conflict.
    pub fn ingest_image(
        &self,
        survey_id: &str,
        image_id: Option<&str>,
        bytes: &[u8],
    ) -> Result<IngestedImage, StoreError> {
        let img = image::load_from_memory(bytes).map_err(|e| StoreError::InvalidImage(e.to_string()))?;
        let meta = meta::read_gps(bytes);
        let hash = sha256_hex(bytes);
        let image_id = match image_id {
            Some(id) => {
                validate_id(id)?;
                id.to_string()
            }
            None => format!("img-{}", &hash[..12]),
        };
        let snap = self.snapshot();
        let survey = snap
            .surveys
            .get(survey_id)
            .ok_or_else(|| StoreError::not_found("survey", survey_id))?;
        if let Some(existing) = survey.images.get(&image_id) {
            if existing.blob == hash {
                return Ok(IngestedImage {
                    image_id,
                    width: existing.width,
                    height: existing.height,
                    meta: existing.meta.clone(),
                    added: false,
                });
            }
            return Err(StoreError::Conflict(format!(
                "image {image_id:?} already exists in survey {survey_id:?} with different content"
            )));
        }
        self.put_blob(bytes)?;
        let entry = ImageEntry {
            image_id: image_id.clone(),
            blob: hash,
            width: img.width(),
            height: img.height(),
            meta: meta.clone(),
        };
        self.mutate(|st| {
            let s = st
                .surveys
                .get_mut(survey_id)
                .ok_or_else(|| StoreError::not_found("survey", survey_id))?;
            match s.images.get(&image_id) {
                Some(e) if e.blob == entry.blob => {}
                Some(_) => return Err(StoreError::Conflict(format!("image {image_id:?} changed concurrently"))),
                None => {
                    s.images.insert(image_id.clone(), entry.clone());
                }
            }
            Ok(())
        })?;
        Ok(IngestedImage {
            image_id,
            width: entry.width,
            height: entry.height,
            meta,
            added: true,
        })
    }

    /// Images of a survey with their bytes, ready for the pipeline.
    pub fn survey_images(&self, survey_id: &str) -> Result<Vec<SurveyImage>, StoreError> {
        let survey = self.survey(survey_id)?;
        survey
            .images
            .values()
            .map(|e| {
                Ok(SurveyImage {
                    image_id: e.image_id.clone(),
                    bytes: Arc::new(self.blob(&e.blob)?),
                    meta: e.meta.clone(),
                })
            })
            .collect()
    }

    /// Replace the survey's records with a fresh detection run. Duplicate
    /// groups and corrections refer to the old records and are dropped.
    pub fn replace_records(
        &self,
        survey_id: &str,
        mut records: Vec<DebrisRecord>,
        failures: Vec<ImageFailure>,
    ) -> Result<(), StoreError> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.record_id.clone())) {
            return Err(StoreError::Conflict(format!("duplicate record id {:?}", dup.record_id)));
        }
        sort_records(&mut records);
        self.mutate(|st| {
            let taken = record_owner_map(st);
            for r in &records {
                if let Some(owner) = taken.get(r.record_id.as_str()) {
                    if owner != survey_id {
                        return Err(StoreError::Conflict(format!(
                            "record id {:?} is already used by survey {owner:?}",
                            r.record_id
                        )));
                    }
                }
            }
            let s = st
                .surveys
                .get_mut(survey_id)
                .ok_or_else(|| StoreError::not_found("survey", survey_id))?;
            for r in &records {
                if !s.schema.contains(&r.predicted_label) {
                    return Err(StoreError::UnknownLabel {
                        label: r.predicted_label.clone(),
                        valid: s.schema.labels().to_vec(),
                    });
                }
            }
            s.records = records;
            s.groups.clear();
            s.corrections.clear();
            s.failures = failures;
            s.detected = true;
            Ok(())
        })
    }

    /// Store a duplicate-removal result. The outcome must cover exactly the
    /// survey's current records.
    pub fn apply_dedup(&self, survey_id: &str, outcome: &DedupOutcome) -> Result<(), StoreError> {
        self.mutate(|st| {
            let s = st
                .surveys
                .get_mut(survey_id)
                .ok_or_else(|| StoreError::not_found("survey", survey_id))?;
            let mut annotated: HashMap<&str, &DebrisRecord> =
                outcome.records.iter().map(|r| (r.record_id.as_str(), r)).collect();
            if annotated.len() != s.records.len() {
                return Err(StoreError::Conflict("records changed while deduplicating".into()));
            }
            for r in s.records.iter_mut() {
                let a = annotated
                    .remove(r.record_id.as_str())
                    .ok_or_else(|| StoreError::Conflict("records changed while deduplicating".into()))?;
                r.duplicate_group = a.duplicate_group.clone();
                r.is_canonical = a.is_canonical;
            }
            s.groups = outcome.groups.clone();
            Ok(())
        })
    }

    /// Replace a survey's records with imported rows. Groups are rebuilt from
    /// the `duplicate_group` column.
    pub fn import_records(&self, survey_id: &str, mut records: Vec<DebrisRecord>) -> Result<(), StoreError> {
        sort_records(&mut records);
        let mut groups: BTreeMap<String, DuplicateGroup> = BTreeMap::new();
        for r in &records {
            if let Some(g) = &r.duplicate_group {
                let e = groups.entry(g.clone()).or_insert_with(|| DuplicateGroup {
                    group_id: g.clone(),
                    members: Vec::new(),
                    canonical: String::new(),
                    matches: Vec::new(),
                });
                e.members.push(r.record_id.clone());
                if r.is_canonical {
                    if !e.canonical.is_empty() {
                        return Err(StoreError::Conflict(format!("group {g:?} has two canonical records")));
                    }
                    e.canonical = r.record_id.clone();
                }
            }
        }
        if let Some(g) = groups.values().find(|g| g.canonical.is_empty()) {
            return Err(StoreError::Conflict(format!("group {:?} has no canonical record", g.group_id)));
        }
        for g in groups.values_mut() {
            g.members.sort();
        }
        self.mutate(|st| {
            let taken = record_owner_map(st);
            if let Some(r) = records
                .iter()
                .find(|r| taken.get(r.record_id.as_str()).is_some_and(|o| o != survey_id))
            {
                return Err(StoreError::Conflict(format!("record id {:?} belongs to another survey", r.record_id)));
            }
            let s = st
                .surveys
                .get_mut(survey_id)
                .ok_or_else(|| StoreError::not_found("survey", survey_id))?;
            s.records = records;
            s.groups = groups.into_values().collect();
            s.corrections.clear();
            s.detected = true;
            Ok(())
        })
    }

    /// Find the survey holding a record.
    pub fn locate_record(&self, record_id: &str) -> Result<(String, DebrisRecord), StoreError> {
        let snap = self.snapshot();
        snap.surveys
            .values()
            .find_map(|s| s.record(record_id).map(|r| (s.survey_id.clone(), r.clone())))
            .ok_or_else(|| StoreError::not_found("record", record_id))
    }

    /// Set a record's corrected label and append an audit entry. Setting the
    /// label it already has changes nothing.
    pub fn correct_label(&self, record_id: &str, label: &str) -> Result<DebrisRecord, StoreError> {
        self.mutate(|st| {
            let s = st
                .surveys
                .values_mut()
                .find(|s| s.record(record_id).is_some())
                .ok_or_else(|| StoreError::not_found("record", record_id))?;
            if !s.schema.contains(label) {
                return Err(StoreError::UnknownLabel {
                    label: label.to_string(),
                    valid: s.schema.labels().to_vec(),
                });
            }
            let r = s
                .records
                .iter_mut()
                .find(|r| r.record_id == record_id)
                .expect("found above");
            let old = r.effective_label().to_string();
            if old != label {
                r.corrected_label = Some(label.to_string());
                let updated = r.clone();
                s.corrections.push(Correction {
                    record_id: record_id.to_string(),
                    old_label: old,
                    new_label: label.to_string(),
                    timestamp: now_rfc3339(),
                });
                return Ok(updated);
            }
            Ok(r.clone())
        })
    }

    /// Grayscale crops of every record whose image is stored, keyed by record
    /// id. Each image is decoded once.
    pub fn record_crops(&self, survey_id: &str) -> Result<HashMap<String, GrayRaster>, StoreError> {
        let survey = self.survey(survey_id)?;
        let mut by_image: BTreeMap<&str, Vec<&DebrisRecord>> = BTreeMap::new();
        for r in &survey.records {
            by_image.entry(&r.source_image_id).or_default().push(r);
        }
        let parts: Vec<Vec<(String, GrayRaster)>> = by_image
            .into_par_iter()
            .filter_map(|(image_id, recs)| {
                let entry = survey.images.get(image_id)?;
                let bytes = self.blob(&entry.blob).ok()?;
                let img = image::load_from_memory(&bytes).ok()?;
                Some(
                    recs.into_iter()
                        .filter_map(|r| {
                            let b = r.bbox.crop_bounds(img.width(), img.height());
                            (!b.is_empty()).then(|| {
                                let crop = img.crop_imm(b.x0, b.y0, b.width(), b.height());
                                (r.record_id.clone(), GrayRaster::from_image(&crop))
                            })
                        })
                        .collect(),
                )
            })
            .collect();
        Ok(parts.into_iter().flatten().collect())
    }

    /// Encoded PNG crop of one record.
    pub fn crop_png(&self, record_id: &str, max_side: u32) -> Result<Vec<u8>, StoreError> {
        let (survey_id, record) = self.locate_record(record_id)?;
        let survey = self.survey(&survey_id)?;
        let entry = survey
            .images
            .get(&record.source_image_id)
            .ok_or_else(|| StoreError::not_found("image", &record.source_image_id))?;
        let img = image::load_from_memory(&self.blob(&entry.blob)?)
            .map_err(|e| StoreError::InvalidImage(e.to_string()))?;
        let b = record.bbox.crop_bounds(img.width(), img.height());
        let mut crop = img.crop_imm(b.x0, b.y0, b.width(), b.height());
        if crop.width().max(crop.height()) > max_side {
            crop = crop.thumbnail(max_side, max_side);
        }
        let mut out = std::io::Cursor::new(Vec::new());
        crop.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| StoreError::InvalidImage(e.to_string()))?;
        Ok(out.into_inner())
    }
}

fn sort_records(records: &mut [DebrisRecord]) {
    records.sort_by(|a, b| {
        a.source_image_id
            .cmp(&b.source_image_id)
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
}

fn record_owner_map(st: &StoreState) -> HashMap<&str, String> {
    st.surveys
        .values()
        .flat_map(|s| s.records.iter().map(move |r| (r.record_id.as_str(), s.survey_id.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelBox;

    fn jpeg(w: u32, h: u32, shade: u8) -> Vec<u8> {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([shade, (x * 7) as u8, (y * 5) as u8]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Jpeg).unwrap();
        out.into_inner()
    }

    fn rec(id: &str, image: &str) -> DebrisRecord {
        DebrisRecord {
            record_id: id.into(),
            source_image_id: image.into(),
            bbox: PixelBox::new(2.0, 2.0, 20.0, 12.0).unwrap(),
            detection_score: 0.5,
            predicted_label: "plastic".into(),
            corrected_label: None,
            class_distribution: None,
            geo_position: None,
            altitude: None,
            duplicate_group: None,
            is_canonical: false,
        }
    }

    fn fresh() -> (tempfile::TempDir, SurveyStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = SurveyStore::open(dir.path()).unwrap();
        (dir, store)
    }

    #[test]
    fn ingest_is_content_addressed_and_idempotent() {
        let (_d, store) = fresh();
        let s = store.create_survey(None, LabelSchema::default()).unwrap();
        assert_eq!(s, "survey-0001");
        let bytes = jpeg(32, 24, 10);
        let a = store.ingest_image(&s, Some("IMG_1"), &bytes).unwrap();
        assert!(a.added && a.meta.is_none());
        assert_eq!((a.width, a.height), (32, 24));
        let again = store.ingest_image(&s, Some("IMG_1"), &bytes).unwrap();
        assert!(!again.added);
        assert!(matches!(
            store.ingest_image(&s, Some("IMG_1"), &jpeg(32, 24, 200)),
            Err(StoreError::Conflict(_))
        ));
        let auto = store.ingest_image(&s, None, &bytes).unwrap();
        assert!(auto.image_id.starts_with("img-"));
        let survey = store.survey(&s).unwrap();
        assert_eq!(survey.images.len(), 2);
        assert_eq!(store.blob(&survey.images["IMG_1"].blob).unwrap(), bytes);
        assert!(matches!(store.ingest_image(&s, None, b"nope"), Err(StoreError::InvalidImage(_))));
    }

    #[test]
    fn state_survives_reopen() {
        let (dir, store) = fresh();
        let s = store.create_survey(Some("bay"), LabelSchema::default()).unwrap();
        store.ingest_image(&s, Some("a"), &jpeg(30, 30, 1)).unwrap();
        store.replace_records(&s, vec![rec("bay-a-000", "a")], vec![]).unwrap();
        store.correct_label("bay-a-000", "metal").unwrap();
        drop(store);
        let reopened = SurveyStore::open(dir.path()).unwrap();
        let survey = reopened.survey("bay").unwrap();
        assert_eq!(survey.records[0].corrected_label.as_deref(), Some("metal"));
        assert_eq!(survey.corrections.len(), 1);
    }

    #[test]
    fn corrections_are_audited_and_idempotent() {
        let (_d, store) = fresh();
        let s = store.create_survey(None, LabelSchema::default()).unwrap();
        store
            .replace_records(&s, vec![rec("r1", "a"), rec("r2", "a")], vec![])
            .unwrap();
        let r = store.correct_label("r1", "metal").unwrap();
        assert_eq!(r.effective_label(), "metal");
        store.correct_label("r1", "metal").unwrap();
        store.correct_label("r2", "plastic").unwrap();
        store.correct_label("r1", "wood").unwrap();
        let survey = store.survey(&s).unwrap();
        assert_eq!(survey.corrections.len(), 2);
        assert_eq!(survey.corrections[0].old_label, "plastic");
        let replay = survey.replay_corrections();
        for r in &survey.records {
            assert_eq!(replay[&r.record_id], r.effective_label());
        }
        match store.correct_label("r1", "glass") {
            Err(StoreError::UnknownLabel { valid, .. }) => assert_eq!(valid.len(), 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(store.correct_label("zz", "wood"), Err(StoreError::NotFound { .. })));
    }

    #[test]
    fn record_ids_stay_unique_across_surveys() {
        let (_d, store) = fresh();
        let a = store.create_survey(None, LabelSchema::default()).unwrap();
        let b = store.create_survey(None, LabelSchema::default()).unwrap();
        store.replace_records(&a, vec![rec("r1", "x")], vec![]).unwrap();
        assert!(store.replace_records(&b, vec![rec("r1", "x")], vec![]).is_err());
        assert!(store.replace_records(&a, vec![rec("r2", "x"), rec("r2", "y")], vec![]).is_err());
        assert!(store.create_survey(Some(&a), LabelSchema::default()).is_err());
        assert!(store.create_survey(Some("../etc"), LabelSchema::default()).is_err());
    }

    #[test]
    fn crops_round_outward() {
        let (_d, store) = fresh();
        let s = store.create_survey(None, LabelSchema::default()).unwrap();
        store.ingest_image(&s, Some("a"), &jpeg(40, 30, 9)).unwrap();
        let mut r = rec("r1", "a");
        r.bbox = PixelBox::new(1.5, 2.5, 10.2, 8.0).unwrap();
        store.replace_records(&s, vec![r, rec("orphan", "missing")], vec![]).unwrap();
        let crops = store.record_crops(&s).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!((crops["r1"].width(), crops["r1"].height()), (10, 6));
        let png = store.crop_png("r1", 256).unwrap();
        assert!(image::load_from_memory(&png).is_ok());
    }

    #[test]
    fn imported_groups_are_rebuilt() {
        let (_d, store) = fresh();
        let s = store.create_survey(None, LabelSchema::default()).unwrap();
        let mut a = rec("a", "i");
        a.duplicate_group = Some("dup-0001".into());
        a.is_canonical = true;
        let mut b = rec("b", "j");
        b.duplicate_group = Some("dup-0001".into());
        store.import_records(&s, vec![b.clone(), a.clone()]).unwrap();
        let survey = store.survey(&s).unwrap();
        assert_eq!(survey.groups.len(), 1);
        assert_eq!(survey.groups[0].canonical, "a");
        assert_eq!(survey.groups[0].members, vec!["a", "b"]);
        b.is_canonical = true;
        assert!(store.import_records(&s, vec![a, b]).is_err());
    }
}
