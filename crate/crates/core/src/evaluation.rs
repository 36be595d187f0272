//! Detection and classification metrics against human annotations.
//!
//! Predictions are paired with ground-truth boxes one-to-one per image, then
//! scored with mean IoU (detection) and accuracy / macro-F1 (classification).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_unchecked, PixelBox};
use crate::pipeline::DebrisRecord;
use crate::providers::LabelSchema;

/// Column that collects ground-truth boxes no prediction was paired with.
pub const UNMATCHED_COLUMN: &str = "unmatched";

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("annotation for {image_id}: {reason}")]
    InvalidAnnotation { image_id: String, reason: String },
    #[error("label {label:?} on {image_id} is not in the schema")]
    UnknownLabel { image_id: String, label: String },
    #[error("line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error("malformed annotation document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub label: String,
}

impl From<&DebrisRecord> for Prediction {
    fn from(r: &DebrisRecord) -> Self {
        Self {
            record_id: r.record_id.clone(),
            image_id: r.source_image_id.clone(),
            bbox: r.bbox,
            label: r.effective_label().to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct AnnotationDocument {
    images: Vec<AnnotatedImage>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct AnnotatedImage {
    image_id: String,
    annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
struct Annotation {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
}

fn checked_truth(
    image_id: &str,
    bbox: [f64; 4],
    label: String,
    schema: &LabelSchema,
) -> Result<GroundTruthBox, EvaluationError> {
    let bbox = PixelBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).map_err(|e| {
        EvaluationError::InvalidAnnotation {
            image_id: image_id.to_string(),
            reason: e.to_string(),
        }
    })?;
    if !schema.contains(&label) {
        return Err(EvaluationError::UnknownLabel {
            image_id: image_id.to_string(),
            label,
        });
    }
    Ok(GroundTruthBox {
        image_id: image_id.to_string(),
        bbox,
        label,
    })
}

/// Parse the JSON annotation format:
///
/// ```json
/// {"images": [{"image_id": "IMG_0001", "annotations": [{"box": [x0, y0, x1, y1], "label": "plastic"}]}]}
/// ```
pub fn parse_truth_json(
    bytes: &[u8],
    schema: &LabelSchema,
) -> Result<Vec<GroundTruthBox>, EvaluationError> {
    let doc: AnnotationDocument = serde_json::from_slice(bytes)?;
    let mut out = Vec::new();
    for img in doc.images {
        for a in img.annotations {
            out.push(checked_truth(&img.image_id, a.bbox, a.label, schema)?);
        }
    }
    Ok(out)
}

/// Serialize truths into the JSON annotation format, grouped by image.
pub fn truth_to_json(truths: &[GroundTruthBox]) -> String {
    let mut by_image: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for t in truths {
        by_image.entry(&t.image_id).or_default().push(Annotation {
            bbox: [t.bbox.x_min, t.bbox.y_min, t.bbox.x_max, t.bbox.y_max],
            label: t.label.clone(),
        });
    }
    let doc = AnnotationDocument {
        images: by_image
            .into_iter()
            .map(|(id, annotations)| AnnotatedImage {
                image_id: id.to_string(),
                annotations,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("plain data")
}

/// Parse the CSV variant. Only `image_id`, the four box columns and `label`
/// are read, so a store export can serve as an annotation file.
pub fn parse_truth_csv(
    bytes: &[u8],
    schema: &LabelSchema,
) -> Result<Vec<GroundTruthBox>, EvaluationError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| EvaluationError::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvaluationError::Csv {
                line: 1,
                reason: format!("missing column {name:?}"),
            })
    };
    let cols = [
        col("image_id")?,
        col("x_min")?,
        col("y_min")?,
        col("x_max")?,
        col("y_max")?,
        col("label")?,
    ];
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| EvaluationError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let mut coords = [0.0; 4];
        for (k, c) in coords.iter_mut().enumerate() {
            *c = field(cols[k + 1]).parse().map_err(|_| EvaluationError::Csv {
                line,
                reason: format!("bad coordinate {:?}", field(cols[k + 1])),
            })?;
        }
        let truth = checked_truth(field(cols[0]), coords, field(cols[5]).to_string(), schema)
            .map_err(|e| EvaluationError::Csv {
                line,
                reason: e.to_string(),
            })?;
        out.push(truth);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingStrategy {
    /// Repeatedly take the highest-IoU remaining pair.
    #[default]
    Greedy,
    /// Assignment maximizing total IoU per image.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    /// Unmatched ground truth contributes an IoU of 0.
    #[default]
    CountMissed,
    /// Average over matched pairs only.
    MatchedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub image_id: String,
    pub record_id: String,
    pub iou: f64,
    pub predicted_label: String,
    pub true_label: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pairing {
    pub matched: Vec<MatchedPair>,
    pub unmatched_predictions: Vec<Prediction>,
    pub unmatched_truths: Vec<GroundTruthBox>,
}

fn box_key(b: &PixelBox) -> [f64; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

fn cmp_boxes(a: &PixelBox, b: &PixelBox) -> Ordering {
    box_key(a)
        .iter()
        .zip(box_key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Pair predictions with truths one-to-one within each image. Pairs with zero
/// overlap are never formed. Output is independent of input order.
pub fn match_boxes(
    preds: &[Prediction],
    truths: &[GroundTruthBox],
    strategy: MatchingStrategy,
) -> Pairing {
    let mut images: BTreeMap<&str, (Vec<&Prediction>, Vec<&GroundTruthBox>)> = BTreeMap::new();
    for p in preds {
        images.entry(&p.image_id).or_default().0.push(p);
    }
    for t in truths {
        images.entry(&t.image_id).or_default().1.push(t);
    }
    let mut out = Pairing::default();
    for (_, (mut ps, mut ts)) in images {
        ps.sort_by(|a, b| {
            cmp_boxes(&a.bbox, &b.bbox)
                .then_with(|| a.record_id.cmp(&b.record_id))
                .then_with(|| a.label.cmp(&b.label))
        });
        ts.sort_by(|a, b| cmp_boxes(&a.bbox, &b.bbox).then_with(|| a.label.cmp(&b.label)));
        let overlap: Vec<Vec<f64>> = ps
            .iter()
            .map(|p| ts.iter().map(|t| iou_unchecked(&p.bbox, &t.bbox)).collect())
            .collect();
        let pairs = match strategy {
            MatchingStrategy::Greedy => greedy_pairs(&overlap),
            MatchingStrategy::Optimal => optimal_pairs(&overlap),
        };
        let mut pred_used = vec![false; ps.len()];
        let mut truth_used = vec![false; ts.len()];
        for (i, j) in pairs {
            pred_used[i] = true;
            truth_used[j] = true;
            out.matched.push(MatchedPair {
                image_id: ps[i].image_id.clone(),
                record_id: ps[i].record_id.clone(),
                iou: overlap[i][j],
                predicted_label: ps[i].label.clone(),
                true_label: ts[j].label.clone(),
            });
        }
        out.unmatched_predictions.extend(
            ps.iter()
                .zip(&pred_used)
                .filter(|(_, used)| !**used)
                .map(|(p, _)| (*p).clone()),
        );
        out.unmatched_truths.extend(
            ts.iter()
                .zip(&truth_used)
                .filter(|(_, used)| !**used)
                .map(|(t, _)| (*t).clone()),
        );
    }
    out
}

/// Highest IoU first; ties go to the earlier prediction, then the earlier truth.
fn greedy_pairs(overlap: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = overlap
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(move |(j, v)| (*v, i, j))
        })
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let rows = overlap.len();
    let cols = overlap.first().map_or(0, Vec::len);
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Maximum-total-IoU assignment via the Hungarian method on a padded square
/// cost matrix. Zero-overlap assignments are dropped afterwards.
fn optimal_pairs(overlap: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = overlap.len();
    let cols = overlap.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -overlap[i][j]
        } else {
            0.0
        }
    };
    // potentials and matching, 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .filter(|&(i, j)| i < rows && j < cols && overlap[i][j] > 0.0)
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Mean IoU, or `None` when the denominator would be zero.
pub fn mean_iou(pairing: &Pairing, mode: IouMode) -> Option<f64> {
    let total: f64 = pairing.matched.iter().map(|p| p.iou).sum();
    let denom = match mode {
        IouMode::CountMissed => pairing.matched.len() + pairing.unmatched_truths.len(),
        IouMode::MatchedOnly => pairing.matched.len(),
    };
    (denom > 0).then(|| total / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// False when the class appears in neither predictions nor truths of the
    /// matched pairs; such classes are left out of the macro average.
    pub in_macro_average: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Ground-truth classes, one per row.
    pub rows: Vec<String>,
    /// Predicted classes followed by the unmatched column.
    pub columns: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
    pub truths: usize,
    pub predictions: usize,
    pub matched: usize,
    pub matching: MatchingStrategy,
    pub iou_mode: IouMode,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and per-class scores over matched pairs, plus the confusion matrix
/// over all ground truth. Labels outside the schema are not counted.
pub fn classification_metrics(
    pairing: &Pairing,
    schema: &LabelSchema,
    iou_mode: IouMode,
    matching: MatchingStrategy,
) -> MetricsReport {
    let k = schema.len();
    let mut counts = vec![vec![0usize; k + 1]; k];
    let mut correct = 0;
    let mut scored = 0;
    for p in &pairing.matched {
        let (Some(t), Some(q)) = (schema.position(&p.true_label), schema.position(&p.predicted_label))
        else {
            continue;
        };
        counts[t][q] += 1;
        scored += 1;
        correct += usize::from(t == q);
    }
    for t in &pairing.unmatched_truths {
        if let Some(row) = schema.position(&t.label) {
            counts[row][k] += 1;
        }
    }

    let per_class: Vec<ClassScores> = schema
        .labels()
        .iter()
        .enumerate()
        .map(|(c, label)| {
            let tp = counts[c][c];
            let predicted: usize = (0..k).map(|r| counts[r][c]).sum();
            let actual: usize = counts[c][..k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                label: label.clone(),
                precision,
                recall,
                f1,
                true_positives: tp,
                false_positives: predicted - tp,
                false_negatives: actual - tp,
                in_macro_average: predicted + actual > 0,
            }
        })
        .collect();

    let included: Vec<f64> = per_class
        .iter()
        .filter(|c| c.in_macro_average)
        .map(|c| c.f1)
        .collect();
    let macro_f1 = (!included.is_empty()).then(|| included.iter().sum::<f64>() / included.len() as f64);

    let mut columns: Vec<String> = schema.labels().to_vec();
    columns.push(UNMATCHED_COLUMN.to_string());
    MetricsReport {
        mean_iou: mean_iou(pairing, iou_mode),
        accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
        macro_f1,
        per_class,
        confusion: ConfusionMatrix {
            rows: schema.labels().to_vec(),
            columns,
            counts,
        },
        truths: pairing.matched.len() + pairing.unmatched_truths.len(),
        predictions: pairing.matched.len() + pairing.unmatched_predictions.len(),
        matched: pairing.matched.len(),
        matching,
        iou_mode,
    }
}

/// Match and score in one step.
pub fn evaluate(
    preds: &[Prediction],
    truths: &[GroundTruthBox],
    schema: &LabelSchema,
    matching: MatchingStrategy,
    iou_mode: IouMode,
) -> MetricsReport {
    let pairing = match_boxes(preds, truths, matching);
    classification_metrics(&pairing, schema, iou_mode, matching)
}

impl MetricsReport {
    /// Plain-text summary, three decimals.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut s = format!(
            "mean_iou  {}\naccuracy  {}\nmacro_f1  {}\nmatched   {} of {} truths, {} predictions\n\n",
            fmt(self.mean_iou),
            fmt(self.accuracy),
            fmt(self.macro_f1),
            self.matched,
            self.truths,
            self.predictions
        );
        s.push_str(&format!(
            "{:<14}{:>10}{:>10}{:>10}{:>6}{:>6}{:>6}\n",
            "class", "precision", "recall", "f1", "tp", "fp", "fn"
        ));
        for c in &self.per_class {
            let mark = if c.in_macro_average { "" } else { " *" };
            s.push_str(&format!(
                "{:<14}{:>10.3}{:>10.3}{:>10.3}{:>6}{:>6}{:>6}{}\n",
                c.label, c.precision, c.recall, c.f1, c.true_positives, c.false_positives,
                c.false_negatives, mark
            ));
        }
        if self.per_class.iter().any(|c| !c.in_macro_average) {
            s.push_str("* absent, excluded from macro_f1\n");
        }
        s
    }
}
