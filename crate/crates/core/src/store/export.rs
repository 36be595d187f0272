//! CSV and GeoJSON data products, CSV import and per-class statistics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::StoreError;
use crate::geolocate::{cluster_hotspots, GeoPoint};
use crate::geometry::PixelBox;
use crate::pipeline::DebrisRecord;
use crate::providers::LabelSchema;

pub const CSV_COLUMNS: [&str; 14] = [
    "record_id",
    "image_id",
    "x_min",
    "y_min",
    "x_max",
    "y_max",
    "score",
    "label",
    "corrected",
    "latitude",
    "longitude",
    "altitude",
    "duplicate_group",
    "is_canonical",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn sorted(records: &[DebrisRecord]) -> Vec<&DebrisRecord> {
    let mut out: Vec<&DebrisRecord> = records.iter().collect();
    out.sort_by(|a, b| {
        a.source_image_id
            .cmp(&b.source_image_id)
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
    out
}

/// One row per record, sorted by image then record id.
pub fn export_csv(records: &[DebrisRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in sorted(records) {
        let geo = r.geo_position;
        w.write_record([
            r.record_id.clone(),
            r.source_image_id.clone(),
            r.bbox.x_min.to_string(),
            r.bbox.y_min.to_string(),
            r.bbox.x_max.to_string(),
            r.bbox.y_max.to_string(),
            r.detection_score.to_string(),
            r.effective_label().to_string(),
            r.corrected_label.is_some().to_string(),
            opt(geo.map(|g| g.latitude)),
            opt(geo.map(|g| g.longitude)),
            opt(r.altitude),
            r.duplicate_group.clone().unwrap_or_default(),
            r.is_canonical.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn csv_err(line: u64, reason: impl Into<String>) -> StoreError {
    StoreError::Csv {
        line,
        reason: reason.into(),
    }
}

/// Rebuild records from an export. A corrected row's label becomes both the
/// predicted and the corrected label, since the original prediction is not
/// part of the export.
pub fn import_csv(bytes: &[u8], schema: &LabelSchema) -> Result<Vec<DebrisRecord>, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    for (i, expected) in CSV_COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *expected => {}
            Some(h) => {
                return Err(StoreError::SchemaMismatch(format!(
                    "column {} is {h:?}, expected {expected:?}",
                    i + 1
                )))
            }
            None => return Err(StoreError::SchemaMismatch(format!("missing column {expected:?}"))),
        }
    }
    if headers.len() > CSV_COLUMNS.len() {
        return Err(StoreError::SchemaMismatch(format!(
            "unexpected column {:?}",
            &headers[CSV_COLUMNS.len()]
        )));
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, StoreError> {
            row[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| csv_err(line, format!("{}: not a number: {:?}", CSV_COLUMNS[i], &row[i])))
        };
        let opt_num = |i: usize| -> Result<Option<f64>, StoreError> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let flag = |i: usize| -> Result<bool, StoreError> {
            match &row[i] {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(csv_err(line, format!("{}: expected true or false, got {other:?}", CSV_COLUMNS[i]))),
            }
        };

        let record_id = row[0].to_string();
        if record_id.is_empty() {
            return Err(csv_err(line, "empty record_id"));
        }
        if !seen.insert(record_id.clone()) {
            return Err(csv_err(line, format!("duplicate record id {record_id:?}")));
        }
        let bbox = PixelBox::new(num(2)?, num(3)?, num(4)?, num(5)?)
            .map_err(|e| csv_err(line, e.to_string()))?;
        let score = num(6)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(csv_err(line, format!("score {score} outside [0, 1]")));
        }
        let label = row[7].to_string();
        if !schema.contains(&label) {
            return Err(csv_err(
                line,
                format!("label {label:?} is not one of {}", schema.labels().join(", ")),
            ));
        }
        let corrected = flag(8)?;
        let geo_position = match (opt_num(9)?, opt_num(10)?) {
            (Some(lat), Some(lon)) => {
                let p = GeoPoint::new(lat, lon);
                p.validate().map_err(|e| csv_err(line, e.to_string()))?;
                Some(p)
            }
            (None, None) => None,
            _ => return Err(csv_err(line, "latitude and longitude must both be set or both empty")),
        };
        let group = (!row[12].is_empty()).then(|| row[12].to_string());
        let is_canonical = flag(13)?;
        if is_canonical && group.is_none() {
            return Err(csv_err(line, "canonical record without a duplicate group"));
        }
        out.push(DebrisRecord {
            record_id,
            source_image_id: row[1].to_string(),
            bbox,
            detection_score: score,
            predicted_label: label.clone(),
            corrected_label: corrected.then_some(label),
            class_distribution: None,
            geo_position,
            altitude: opt_num(11)?,
            duplicate_group: group,
            is_canonical,
        });
    }
    Ok(out)
}

/// Records shown on the map: canonical or ungrouped, with a position.
pub fn survivors(records: &[DebrisRecord]) -> Vec<&DebrisRecord> {
    sorted(records)
        .into_iter()
        .filter(|r| r.is_survivor())
        .collect()
}

/// Hotspot id per mapped survivor, in `survivors` order (unmapped skipped).
fn clusters(mapped: &[&DebrisRecord], eps_m: f64, min_pts: usize) -> Vec<Option<usize>> {
    let points: Vec<GeoPoint> = mapped.iter().filter_map(|r| r.geo_position).collect();
    cluster_hotspots(&points, eps_m, min_pts)
}

/// Parameters for map and statistics products.
#[derive(Debug, Clone)]
pub struct MapStyle<'a> {
    pub palette: &'a BTreeMap<String, String>,
    pub eps_m: f64,
    pub min_pts: usize,
}

/// FeatureCollection of surviving, geolocated records as `[lon, lat]` points.
pub fn export_geojson(records: &[DebrisRecord], style: &MapStyle<'_>) -> Value {
    let surv = survivors(records);
    let mapped: Vec<&DebrisRecord> = surv.iter().copied().filter(|r| r.geo_position.is_some()).collect();
    let unmapped = surv.len() - mapped.len();
    let ids = clusters(&mapped, style.eps_m, style.min_pts);
    let features: Vec<Value> = mapped
        .iter()
        .zip(&ids)
        .map(|(r, cluster)| {
            let p = r.geo_position.expect("filtered");
            let label = r.effective_label();
            json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [p.longitude, p.latitude]},
                "properties": {
                    "record_id": r.record_id,
                    "image_id": r.source_image_id,
                    "label": label,
                    "score": r.detection_score,
                    "corrected": r.corrected_label.is_some(),
                    "cluster_id": cluster,
                    "color": style.palette.get(label).cloned().unwrap_or_else(|| "#000000".into()),
                }
            })
        })
        .collect();
    json!({
        "type": "FeatureCollection",
        "features": features,
        "unmapped_records": unmapped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub label: String,
    pub count: usize,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    pub centroid: GeoPoint,
    /// Count per class, zero counts omitted.
    pub classes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyStats {
    pub total_records: usize,
    pub surviving_records: usize,
    pub duplicates_removed: usize,
    pub corrected_records: usize,
    pub unmapped_records: usize,
    pub classes: Vec<ClassCount>,
    pub clusters: Vec<ClusterSummary>,
    pub noise_records: usize,
}

/// Class distribution over surviving records, and hotspot summaries.
pub fn survey_stats(records: &[DebrisRecord], schema: &LabelSchema, style: &MapStyle<'_>) -> SurveyStats {
    let surv = survivors(records);
    let mapped: Vec<&DebrisRecord> = surv.iter().copied().filter(|r| r.geo_position.is_some()).collect();
    let ids = clusters(&mapped, style.eps_m, style.min_pts);

    let classes = schema
        .labels()
        .iter()
        .map(|l| ClassCount {
            label: l.clone(),
            count: surv.iter().filter(|r| r.effective_label() == l).count(),
            color: style.palette.get(l).cloned().unwrap_or_else(|| "#000000".into()),
        })
        .collect();

    let mut by_cluster: BTreeMap<usize, Vec<&DebrisRecord>> = BTreeMap::new();
    let mut noise = 0;
    for (r, id) in mapped.iter().zip(&ids) {
        match id {
            Some(c) => by_cluster.entry(*c).or_default().push(r),
            None => noise += 1,
        }
    }
    let clusters = by_cluster
        .into_iter()
        .map(|(cluster_id, members)| {
            let n = members.len() as f64;
            let (lat, lon) = members.iter().fold((0.0, 0.0), |acc, r| {
                let p = r.geo_position.expect("mapped");
                (acc.0 + p.latitude, acc.1 + p.longitude)
            });
            let mut classes = BTreeMap::new();
            for r in &members {
                *classes.entry(r.effective_label().to_string()).or_insert(0) += 1;
            }
            ClusterSummary {
                cluster_id,
                size: members.len(),
                centroid: GeoPoint::new(lat / n, lon / n),
                classes,
            }
        })
        .collect();

    SurveyStats {
        total_records: records.len(),
        surviving_records: surv.len(),
        duplicates_removed: records.len() - surv.len(),
        corrected_records: records.iter().filter(|r| r.corrected_label.is_some()).count(),
        unmapped_records: surv.len() - mapped.len(),
        classes,
        clusters,
        noise_records: noise,
    }
}
