//! Cross-frame duplicate removal.
//!
//! Overlapping drone frames show the same object more than once. Records are
//! first pruned spatially (only pairs within `radius_m` on the ground are
//! considered), then each candidate pair is compared with SIFT on the object
//! crops. Duplicate pairs are edges of a graph whose connected components
//! become [`DuplicateGroup`]s, and one canonical record survives per group.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geolocate::{haversine, GeoPoint, METERS_PER_DEGREE};
use crate::pipeline::DebrisRecord;
use crate::sift::{self, GrayRaster, SiftDescriptorSet};

pub const DEFAULT_RADIUS_M: f64 = 5.0;

/// Uniform latitude/longitude grid over a fixed list of points.
///
/// Cells are at least `cell_m` meters on a side everywhere in the indexed
/// latitude band, so a radius query only has to scan the cells overlapping
/// the query's bounding box before filtering exactly by haversine distance.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Option<GeoPoint>>,
    cell_lat_deg: f64,
    cell_lon_deg: f64,
    lon_cells: i64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

/// Relative slack on every cell and span size.
const GRID_MARGIN: f64 = 1.001;

impl SpatialIndex {
    /// Index every `Some` point; `None` entries keep their slot but are never returned.
    pub fn build(points: impl IntoIterator<Item = Option<GeoPoint>>, cell_m: f64) -> Self {
        let points: Vec<Option<GeoPoint>> = points.into_iter().collect();
        let cell_m = if cell_m.is_finite() && cell_m > 0.0 {
            cell_m
        } else {
            DEFAULT_RADIUS_M
        };
        let cell_lat_deg = cell_m / METERS_PER_DEGREE * GRID_MARGIN;
        let max_abs_lat = points
            .iter()
            .flatten()
            .map(|p| p.latitude.abs())
            .fold(0.0f64, f64::max);
        let cos_edge = (max_abs_lat + cell_lat_deg).min(90.0).to_radians().cos();
        let cell_lon_deg = if cos_edge > 1e-9 {
            (cell_lat_deg / cos_edge).min(360.0)
        } else {
            360.0
        };
        let lon_cells = ((360.0 / cell_lon_deg).ceil() as i64).max(1);

        let mut index = Self {
            points,
            cell_lat_deg,
            cell_lon_deg,
            lon_cells,
            cells: HashMap::new(),
        };
        for i in 0..index.points.len() {
            if let Some(p) = index.points[i] {
                let key = index.cell_of(&p);
                index.cells.entry(key).or_default().push(i);
            }
        }
        index
    }

    fn lat_cell(&self, lat: f64) -> i64 {
        ((lat + 90.0) / self.cell_lat_deg).floor() as i64
    }

    fn lon_cell(&self, lon: f64) -> i64 {
        (((lon + 180.0) / self.cell_lon_deg).floor() as i64).rem_euclid(self.lon_cells)
    }

    fn cell_of(&self, p: &GeoPoint) -> (i64, i64) {
        (self.lat_cell(p.latitude), self.lon_cell(p.longitude))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Option<GeoPoint> {
        self.points.get(i).copied().flatten()
    }

    /// Slots holding no position.
    pub fn unindexed(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.points[i].is_none())
            .collect()
    }

    /// Indices of every indexed point within `radius_m` (inclusive) of
    /// `query`, ascending, skipping `exclude`.
    pub fn within(&self, query: &GeoPoint, radius_m: f64, exclude: Option<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        if !(radius_m >= 0.0) {
            return out;
        }
        let lat_span = radius_m / METERS_PER_DEGREE * GRID_MARGIN;
        let cos_edge = (query.latitude.abs() + lat_span)
            .min(90.0)
            .to_radians()
            .cos();
        let lon_span = if cos_edge > 1e-9 {
            lat_span / cos_edge
        } else {
            f64::INFINITY
        };

        let lat_lo = self.lat_cell(query.latitude - lat_span);
        let lat_hi = self.lat_cell(query.latitude + lat_span);
        let lon_range: Vec<i64> = if lon_span >= 180.0 || self.lon_cells <= 3 {
            (0..self.lon_cells).collect()
        } else {
            let lo = ((query.longitude - lon_span + 180.0) / self.cell_lon_deg).floor() as i64;
            let hi = ((query.longitude + lon_span + 180.0) / self.cell_lon_deg).floor() as i64;
            let mut v: Vec<i64> = (lo..=hi).map(|c| c.rem_euclid(self.lon_cells)).collect();
            v.sort_unstable();
            v.dedup();
            v
        };

        for lat in lat_lo..=lat_hi {
            for &lon in &lon_range {
                let Some(ids) = self.cells.get(&(lat, lon)) else {
                    continue;
                };
                for &i in ids {
                    if Some(i) == exclude {
                        continue;
                    }
                    let p = self.points[i].expect("indexed points have positions");
                    if haversine(query, &p) <= radius_m {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Unordered pairs `(i, j)`, `i < j`, within `radius_m` of each other.
    pub fn pairs_within(&self, radius_m: f64) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.points.len() {
            let Some(p) = self.points[i] else { continue };
            for j in self.within(&p, radius_m, Some(i)) {
                if j > i {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

/// Record ids within `radius_m` of `query`, excluding the record `exclude_id`.
pub fn candidates_within(
    records: &[DebrisRecord],
    index: &SpatialIndex,
    query: &GeoPoint,
    radius_m: f64,
    exclude_id: Option<&str>,
) -> Vec<String> {
    let exclude = exclude_id.and_then(|id| records.iter().position(|r| r.record_id == id));
    index
        .within(query, radius_m, exclude)
        .into_iter()
        .map(|i| records[i].record_id.clone())
        .collect()
}

pub fn index_records(records: &[DebrisRecord], radius_m: f64) -> SpatialIndex {
    SpatialIndex::build(records.iter().map(|r| r.geo_position), radius_m)
}

/// Number of record pairs [`dedup_survey`] would compare.
pub fn pair_budget(records: &[DebrisRecord], radius_m: f64) -> usize {
    index_records(records, radius_m).pairs_within(radius_m).len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub radius_m: f64,
    pub min_matches: usize,
    pub ratio: f32,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_RADIUS_M,
            min_matches: sift::DEFAULT_MIN_MATCHES,
            ratio: sift::DEFAULT_RATIO,
        }
    }
}

/// Supplies the grayscale object crop for a record.
pub trait CropSource: Sync {
    fn crop(&self, record: &DebrisRecord) -> Option<GrayRaster>;
}

impl<F> CropSource for F
where
    F: Fn(&DebrisRecord) -> Option<GrayRaster> + Sync,
{
    fn crop(&self, record: &DebrisRecord) -> Option<GrayRaster> {
        self(record)
    }
}

/// Pairwise duplicate decision between records `a` and `b` (indices into the
/// survey). `None` means the pair could not be evaluated.
pub trait DuplicateJudge: Sync {
    fn judge(&self, a: usize, b: usize) -> Option<PairVerdict>;

    /// Subset of `candidates` (ascending) that can never be judged; those
    /// records are excluded up front.
    fn unavailable(&self, candidates: &[usize]) -> Vec<usize> {
        let _ = candidates;
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub duplicate: bool,
    pub match_count: usize,
}

/// SIFT-backed judge with lazily extracted, cached features and a counter of
/// comparisons actually performed.
pub struct SiftJudge<'a, C: CropSource> {
    records: &'a [DebrisRecord],
    crops: &'a C,
    config: DedupConfig,
    features: Vec<OnceLock<Option<SiftDescriptorSet>>>,
    comparisons: AtomicUsize,
}

impl<'a, C: CropSource> SiftJudge<'a, C> {
    pub fn new(records: &'a [DebrisRecord], crops: &'a C, config: DedupConfig) -> Self {
        Self {
            records,
            crops,
            config,
            features: (0..records.len()).map(|_| OnceLock::new()).collect(),
            comparisons: AtomicUsize::new(0),
        }
    }

    fn features(&self, i: usize) -> Option<&SiftDescriptorSet> {
        self.features[i]
            .get_or_init(|| {
                self.crops
                    .crop(&self.records[i])
                    .map(|raster| sift::extract(&raster).unwrap_or_default())
            })
            .as_ref()
    }

    pub fn comparisons(&self) -> usize {
        self.comparisons.load(Ordering::SeqCst)
    }

    /// Extract features for `indices` in parallel.
    pub fn warm(&self, indices: &[usize]) {
        indices.par_iter().for_each(|&i| {
            self.features(i);
        });
    }
}

impl<C: CropSource> DuplicateJudge for SiftJudge<'_, C> {
    fn judge(&self, a: usize, b: usize) -> Option<PairVerdict> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        self.comparisons.fetch_add(1, Ordering::SeqCst);
        let v = sift::duplicate_verdict(fa, fb, self.config.min_matches, self.config.ratio);
        Some(PairVerdict {
            duplicate: v.duplicate,
            match_count: v.match_count,
        })
    }

    fn unavailable(&self, candidates: &[usize]) -> Vec<usize> {
        self.warm(candidates);
        candidates
            .iter()
            .copied()
            .filter(|&i| self.features(i).is_none())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvidence {
    pub a: String,
    pub b: String,
    pub match_count: usize,
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub group_id: String,
    /// Sorted record ids.
    pub members: Vec<String>,
    pub canonical: String,
    /// Duplicate edges inside the group.
    pub matches: Vec<PairEvidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    /// Every input record, annotated with group membership.
    pub records: Vec<DebrisRecord>,
    pub groups: Vec<DuplicateGroup>,
    /// Every pair that was actually compared.
    pub comparisons: Vec<PairEvidence>,
    pub candidate_pairs: usize,
    pub warnings: Vec<String>,
}

impl DedupOutcome {
    /// Canonical and ungrouped records.
    pub fn survivors(&self) -> Vec<DebrisRecord> {
        self.records
            .iter()
            .filter(|r| r.duplicate_group.is_none() || r.is_canonical)
            .cloned()
            .collect()
    }
}

/// Full duplicate removal with the SIFT judge.
pub fn dedup_survey<C: CropSource>(
    records: &[DebrisRecord],
    crops: &C,
    config: &DedupConfig,
) -> DedupOutcome {
    let judge = SiftJudge::new(records, crops, config.clone());
    dedup_with_judge(records, &judge, config.radius_m)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so the structure does not depend on edge order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn canonical_order(a: &DebrisRecord, b: &DebrisRecord) -> std::cmp::Ordering {
    b.detection_score
        .total_cmp(&a.detection_score)
        .then_with(|| b.bbox.area().total_cmp(&a.bbox.area()))
        .then_with(|| a.record_id.cmp(&b.record_id))
}

/// Duplicate removal with an arbitrary pairwise judge. Only pairs within
/// `radius_m` are ever passed to the judge.
pub fn dedup_with_judge<J: DuplicateJudge>(
    records: &[DebrisRecord],
    judge: &J,
    radius_m: f64,
) -> DedupOutcome {
    let mut warnings = Vec::new();
    let index = index_records(records, radius_m);
    let unmapped = index.unindexed();
    if !unmapped.is_empty() {
        warnings.push(format!(
            "{} record(s) without a geo position were not considered for duplicate removal",
            unmapped.len()
        ));
    }

    let all_pairs = index.pairs_within(radius_m);
    let mut involved: Vec<usize> = all_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    involved.sort_unstable();
    involved.dedup();

    let missing = judge.unavailable(&involved);
    for &i in &missing {
        warnings.push(format!(
            "record {} has no crop available; kept as non-duplicate",
            records[i].record_id
        ));
    }
    let pairs: Vec<(usize, usize)> = all_pairs
        .iter()
        .copied()
        .filter(|(a, b)| missing.binary_search(a).is_err() && missing.binary_search(b).is_err())
        .collect();

    let verdicts: Vec<Option<PairVerdict>> =
        pairs.par_iter().map(|&(a, b)| judge.judge(a, b)).collect();

    let mut dsu = DisjointSet::new(records.len());
    let mut comparisons = Vec::new();
    for (&(a, b), verdict) in pairs.iter().zip(&verdicts) {
        let Some(v) = verdict else { continue };
        if v.duplicate {
            dsu.union(a, b);
        }
        let (ia, ib) = ordered_ids(&records[a].record_id, &records[b].record_id);
        comparisons.push(PairEvidence {
            a: ia,
            b: ib,
            match_count: v.match_count,
            duplicate: v.duplicate,
        });
    }
    comparisons.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));

    let mut components: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..records.len() {
        let root = dsu.find(i);
        components.entry(root).or_default().push(i);
    }
    let mut member_sets: Vec<Vec<usize>> = components
        .into_values()
        .filter(|m| m.len() >= 2)
        .collect();
    for m in &mut member_sets {
        m.sort_by(|&x, &y| records[x].record_id.cmp(&records[y].record_id));
    }
    member_sets.sort_by(|x, y| records[x[0]].record_id.cmp(&records[y[0]].record_id));

    let mut annotated: Vec<DebrisRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            r.duplicate_group = None;
            r.is_canonical = false;
            r
        })
        .collect();

    let mut groups = Vec::with_capacity(member_sets.len());
    for (k, members) in member_sets.iter().enumerate() {
        let group_id = format!("dup-{:04}", k + 1);
        let canonical = *members
            .iter()
            .min_by(|&&x, &&y| canonical_order(&records[x], &records[y]))
            .expect("groups are non-empty");
        let ids: Vec<String> = members.iter().map(|&i| records[i].record_id.clone()).collect();
        for &i in members {
            annotated[i].duplicate_group = Some(group_id.clone());
            annotated[i].is_canonical = i == canonical;
        }
        let matches = comparisons
            .iter()
            .filter(|c| c.duplicate && ids.binary_search(&c.a).is_ok())
            .cloned()
            .collect();
        groups.push(DuplicateGroup {
            group_id,
            members: ids,
            canonical: records[canonical].record_id.clone(),
            matches,
        });
    }

    DedupOutcome {
        records: annotated,
        groups,
        comparisons,
        candidate_pairs: all_pairs.len(),
        warnings,
    }
}

fn ordered_ids(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}
