//! Independent reference implementations for the evaluation metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use debris_core::evaluation::{GroundTruthBox, Pairing, Prediction};
use debris_core::geometry::PixelBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LABELS: [&str; 7] = ["wood", "cage", "fishing gear", "nature", "plastic", "metal", "wheel"];

pub fn random_box(rng: &mut ChaCha8Rng) -> PixelBox {
    // a coarse grid makes exact ties and zero overlaps common
    let x0 = rng.random_range(0..8) as f64 * 5.0;
    let y0 = rng.random_range(0..8) as f64 * 5.0;
    let w = rng.random_range(1..5) as f64 * 5.0;
    let h = rng.random_range(1..5) as f64 * 5.0;
    PixelBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

pub fn instance(rng: &mut ChaCha8Rng, max_per_image: usize) -> (Vec<Prediction>, Vec<GroundTruthBox>) {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let images = rng.random_range(1..4);
    // only a few labels so that some classes are absent
    let label_pool = rng.random_range(2..=LABELS.len());
    for img in 0..images {
        let image_id = format!("img{img}");
        for k in 0..rng.random_range(0..=max_per_image) {
            preds.push(Prediction {
                record_id: format!("{image_id}-{k:03}"),
                image_id: image_id.clone(),
                bbox: random_box(rng),
                label: LABELS[rng.random_range(0..label_pool)].into(),
            });
        }
        for _ in 0..rng.random_range(0..=max_per_image) {
            truths.push(GroundTruthBox {
                image_id: image_id.clone(),
                bbox: random_box(rng),
                label: LABELS[rng.random_range(0..label_pool)].into(),
            });
        }
    }
    (preds, truths)
}

pub fn oracle_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &PixelBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    inter / (area(a) + area(b) - inter)
}

pub fn shuffled<T: Clone>(v: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out = v.to_vec();
    for i in (1..out.len()).rev() {
        out.swap(i, rng.random_range(0..=i));
    }
    out
}

/// Best achievable total IoU per image by trying every injective assignment.
pub fn brute_force_best_total(preds: &[Prediction], truths: &[GroundTruthBox]) -> f64 {
    fn go(i: usize, ps: &[&Prediction], ts: &[&GroundTruthBox], used: &mut Vec<bool>) -> f64 {
        if i == ps.len() {
            return 0.0;
        }
        let mut best = go(i + 1, ps, ts, used);
        for j in 0..ts.len() {
            if !used[j] {
                let v = oracle_iou(&ps[i].bbox, &ts[j].bbox);
                if v > 0.0 {
                    used[j] = true;
                    best = best.max(v + go(i + 1, ps, ts, used));
                    used[j] = false;
                }
            }
        }
        best
    }
    let images: HashSet<&str> = preds.iter().map(|p| p.image_id.as_str()).collect();
    images
        .into_iter()
        .map(|img| {
            let ps: Vec<_> = preds.iter().filter(|p| p.image_id == img).collect();
            let ts: Vec<_> = truths.iter().filter(|t| t.image_id == img).collect();
            go(0, &ps, &ts, &mut vec![false; ts.len()])
        })
        .sum()
}

pub struct OracleMetrics {
    pub mean_iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub confusion: BTreeMap<(String, String), usize>,
}

/// Metrics recomputed from scratch: IoU from box coordinates, scores from
/// explicit label counts over the matched pairs.
pub fn oracle_metrics(p: &Pairing, preds: &[Prediction], truths: &[GroundTruthBox]) -> OracleMetrics {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|x| (x.record_id.as_str(), x)).collect();
    let mut ious = Vec::new();
    for m in &p.matched {
        let pr = by_id[m.record_id.as_str()];
        let t = truths
            .iter()
            .filter(|t| t.image_id == m.image_id && t.label == m.true_label)
            .map(|t| oracle_iou(&pr.bbox, &t.bbox))
            .find(|v| (v - m.iou).abs() < 1e-12)
            .expect("matched pair refers to a real truth box");
        ious.push(t);
    }
    let mean_iou = (!truths.is_empty()).then(|| ious.iter().sum::<f64>() / truths.len() as f64);
    let n = p.matched.len();
    let correct = p.matched.iter().filter(|m| m.predicted_label == m.true_label).count();
    let accuracy = (n > 0).then(|| correct as f64 / n as f64);
    let mut f1s = Vec::new();
    for label in LABELS {
        let tp = p.matched.iter().filter(|m| m.predicted_label == label && m.true_label == label).count();
        let predicted = p.matched.iter().filter(|m| m.predicted_label == label).count();
        let actual = p.matched.iter().filter(|m| m.true_label == label).count();
        if predicted == 0 && actual == 0 {
            continue;
        }
        let prec = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let rec = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
        f1s.push(if tp == 0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) });
    }
    let macro_f1 = (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64);
    let mut confusion = BTreeMap::new();
    for m in &p.matched {
        *confusion.entry((m.true_label.clone(), m.predicted_label.clone())).or_insert(0) += 1;
    }
    for t in &p.unmatched_truths {
        *confusion.entry((t.label.clone(), "unmatched".to_string())).or_insert(0) += 1;
    }
    OracleMetrics { mean_iou, accuracy, macro_f1, confusion }
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

pub fn check_pairing_shape(p: &Pairing, preds: &[Prediction], truths: &[GroundTruthBox]) {
    assert_eq!(p.matched.len() + p.unmatched_predictions.len(), preds.len());
    assert_eq!(p.matched.len() + p.unmatched_truths.len(), truths.len());
    assert!(p.matched.iter().all(|m| m.iou > 0.0));
    let ids: HashSet<_> = p.matched.iter().map(|m| &m.record_id).collect();
    assert_eq!(ids.len(), p.matched.len());
}

/// Textbook greedy matching: scan all remaining pairs, take the largest IoU.
/// Used on continuous coordinates where ties have probability zero.
pub fn oracle_greedy(preds: &[Prediction], truths: &[GroundTruthBox]) -> HashSet<(String, usize)> {
    let mut out = HashSet::new();
    let mut pred_free = vec![true; preds.len()];
    let mut truth_free = vec![true; truths.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, p) in preds.iter().enumerate().filter(|(i, _)| pred_free[*i]) {
            for (j, t) in truths.iter().enumerate().filter(|(j, _)| truth_free[*j]) {
                if p.image_id != t.image_id {
                    continue;
                }
                let v = oracle_iou(&p.bbox, &t.bbox);
                if v > 0.0 && best.is_none_or(|b| v > b.0) {
                    best = Some((v, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        pred_free[i] = false;
        truth_free[j] = false;
        out.insert((preds[i].record_id.clone(), j));
    }
    out
}

/// Instance with continuous coordinates, so IoU ties have probability zero.
pub fn continuous_instance(rng: &mut ChaCha8Rng, max_per_image: usize) -> (Vec<Prediction>, Vec<GroundTruthBox>) {
    let (mut preds, mut truths) = instance(rng, max_per_image);
    let mut jitter = |b: &mut PixelBox| {
        b.x_min += rng.random_range(0.0..1.0);
        b.y_max += rng.random_range(0.0..1.0);
    };
    preds.iter_mut().for_each(|p| jitter(&mut p.bbox));
    truths.iter_mut().for_each(|t| jitter(&mut t.bbox));
    (preds, truths)
}

/// Metrics from the textbook greedy pairing alone, sharing no code with the
/// crate's matcher.
pub fn independent_metrics(preds: &[Prediction], truths: &[GroundTruthBox]) -> OracleMetrics {
    let pairs = oracle_greedy(preds, truths);
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|x| (x.record_id.as_str(), x)).collect();
    let matched: Vec<(&Prediction, &GroundTruthBox)> =
        pairs.iter().map(|(id, j)| (by_id[id.as_str()], &truths[*j])).collect();
    let iou_sum: f64 = matched.iter().map(|(p, t)| oracle_iou(&p.bbox, &t.bbox)).sum();
    let mean_iou = (!truths.is_empty()).then(|| iou_sum / truths.len() as f64);
    let correct = matched.iter().filter(|(p, t)| p.label == t.label).count();
    let accuracy = (!matched.is_empty()).then(|| correct as f64 / matched.len() as f64);
    let mut f1s = Vec::new();
    for label in LABELS {
        let tp = matched.iter().filter(|(p, t)| p.label == label && t.label == label).count();
        let predicted = matched.iter().filter(|(p, _)| p.label == label).count();
        let actual = matched.iter().filter(|(_, t)| t.label == label).count();
        if predicted + actual == 0 {
            continue;
        }
        f1s.push(2.0 * tp as f64 / (predicted + actual) as f64);
    }
    let macro_f1 = (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64);
    let mut confusion = BTreeMap::new();
    for (p, t) in &matched {
        *confusion.entry((t.label.clone(), p.label.clone())).or_insert(0) += 1;
    }
    let used: HashSet<usize> = pairs.iter().map(|(_, j)| *j).collect();
    for (j, t) in truths.iter().enumerate() {
        if !used.contains(&j) {
            *confusion.entry((t.label.clone(), "unmatched".to_string())).or_insert(0) += 1;
        }
    }
    OracleMetrics { mean_iou, accuracy, macro_f1, confusion }
}
