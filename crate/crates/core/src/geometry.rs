//! Axis-aligned pixel boxes and the detection filtering rules applied to raw
//! detector output: overlap suppression, oversized-box removal and
//! subtraction of trash boxes that sit on detected rocks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]: requires x_min < x_max and y_min < y_max")]
    Degenerate(f64, f64, f64, f64),
    #[error("box [{0}, {1}, {2}, {3}] has negative or non-finite coordinates")]
    OutOfRange(f64, f64, f64, f64),
}

/// Image-space rectangle in continuous pixel coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let Self {
            x_min,
            y_min,
            x_max,
            y_max,
        } = *self;
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(GeometryError::OutOfRange(x_min, y_min, x_max, y_max));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clamp to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<PixelBox> {
        let b = PixelBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        b.validate().ok().map(|_| b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Integer pixel bounds rounded outward and clamped to the image.
    pub fn crop_bounds(&self, width: u32, height: u32) -> CropBounds {
        let x0 = (self.x_min.floor().max(0.0) as u32).min(width);
        let y0 = (self.y_min.floor().max(0.0) as u32).min(height);
        let x1 = (self.x_max.ceil().max(0.0) as u32).min(width);
        let y1 = (self.y_max.ceil().max(0.0) as u32).min(height);
        CropBounds { x0, y0, x1, y1 }
    }
}

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBounds {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl CropBounds {
    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn as_box(&self) -> PixelBox {
        PixelBox {
            x_min: self.x0 as f64,
            y_min: self.y0 as f64,
            x_max: self.x1 as f64,
            y_max: self.y1 as f64,
        }
    }
}

/// A box returned by a detector for one text query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub query_label: String,
    pub score: f64,
    pub source_image_id: String,
}

/// Overlap measure used by [`suppress_overlaps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMeasure {
    #[default]
    Iou,
    /// Intersection divided by the area of the smaller box.
    IntersectionOverSmaller,
}

impl OverlapMeasure {
    pub fn apply(self, a: &PixelBox, b: &PixelBox) -> f64 {
        match self {
            OverlapMeasure::Iou => iou_unchecked(a, b),
            OverlapMeasure::IntersectionOverSmaller => {
                let inter = a.intersection_area(b);
                if inter == 0.0 {
                    0.0
                } else {
                    (inter / a.area().min(b.area())).min(1.0)
                }
            }
        }
    }
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score, then larger area, lower `x_min`, lower `y_min`.
pub fn detection_order(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.bbox.area().total_cmp(&a.bbox.area()))
        .then_with(|| a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then_with(|| a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then_with(|| a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then_with(|| a.bbox.y_max.total_cmp(&b.bbox.y_max))
        .then_with(|| a.query_label.cmp(&b.query_label))
        .then_with(|| a.source_image_id.cmp(&b.source_image_id))
}

pub fn sort_detections(dets: &mut [ScoredDetection]) {
    dets.sort_by(detection_order);
}

/// Greedy suppression: walk detections by descending score and keep one only
/// if its overlap with every kept detection is below `threshold`.
pub fn suppress_overlaps(dets: &[ScoredDetection], threshold: f64) -> Vec<ScoredDetection> {
    suppress_overlaps_with(dets, threshold, OverlapMeasure::Iou)
}

pub fn suppress_overlaps_with(
    dets: &[ScoredDetection],
    threshold: f64,
    measure: OverlapMeasure,
) -> Vec<ScoredDetection> {
    let mut ordered: Vec<&ScoredDetection> = dets.iter().collect();
    ordered.sort_by(|a, b| detection_order(a, b));

    let mut kept: Vec<ScoredDetection> = Vec::with_capacity(ordered.len());
    for det in ordered {
        if kept
            .iter()
            .all(|k| measure.apply(&k.bbox, &det.bbox) < threshold)
        {
            kept.push(det.clone());
        }
    }
    kept
}

/// Drop detections whose box area exceeds `max_area_fraction` of the image.
pub fn filter_oversized(
    dets: &[ScoredDetection],
    image_width: f64,
    image_height: f64,
    max_area_fraction: f64,
) -> Vec<ScoredDetection> {
    let cap = max_area_fraction * image_width * image_height;
    dets.iter()
        .filter(|d| d.bbox.area() <= cap)
        .cloned()
        .collect()
}

/// Fraction of `trash`'s area covered by `rock`.
pub fn containment(trash: &PixelBox, rock: &PixelBox) -> f64 {
    let area = trash.area();
    if area <= 0.0 {
        return 0.0;
    }
    (trash.intersection_area(rock) / area).min(1.0)
}

/// Remove every trash detection covered by some rock box at or above
/// `containment_threshold` of the trash box's own area.
pub fn subtract_overlapping(
    trash: &[ScoredDetection],
    rocks: &[ScoredDetection],
    containment_threshold: f64,
) -> Vec<ScoredDetection> {
    trash
        .iter()
        .filter(|t| {
            !rocks
                .iter()
                .any(|r| containment(&t.bbox, &r.bbox) >= containment_threshold)
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> PixelBox {
        PixelBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: PixelBox, score: f64) -> ScoredDetection {
        ScoredDetection {
            bbox: b,
            query_label: "all trash".into(),
            score,
            source_image_id: "img".into(),
        }
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        assert_eq!(iou(&a, &bx(5.0, 0.0, 15.0, 10.0)).unwrap(), 50.0 / 150.0);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(matches!(
            PixelBox::new(5.0, 0.0, 5.0, 10.0),
            Err(GeometryError::Degenerate(..))
        ));
        assert!(matches!(
            PixelBox::new(-1.0, 0.0, 5.0, 10.0),
            Err(GeometryError::OutOfRange(..))
        ));
        let flat = PixelBox {
            x_min: 0.0,
            y_min: 3.0,
            x_max: 4.0,
            y_max: 3.0,
        };
        assert!(iou(&flat, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn suppression_hand_cases() {
        assert!(suppress_overlaps(&[], 0.4).is_empty());

        let d1 = det(bx(0.0, 0.0, 10.0, 10.0), 0.9);
        let d2 = det(bx(1.0, 1.0, 11.0, 11.0), 0.5);
        assert_eq!(iou(&d1.bbox, &d2.bbox).unwrap(), 81.0 / 119.0);
        let kept = suppress_overlaps(&[d2.clone(), d1.clone()], 0.4);
        assert_eq!(kept, vec![d1.clone()]);

        let d3 = det(bx(20.0, 0.0, 30.0, 10.0), 0.5);
        let kept = suppress_overlaps(&[d3.clone(), d1.clone()], 0.4);
        assert_eq!(kept, vec![d1, d3]);
    }

    #[test]
    fn suppression_tie_break_prefers_larger_then_left_then_top() {
        let small = det(bx(0.0, 0.0, 10.0, 10.0), 0.5);
        let large = det(bx(0.0, 0.0, 11.0, 11.0), 0.5);
        assert_eq!(
            suppress_overlaps(&[small.clone(), large.clone()], 0.4),
            vec![large]
        );

        let left = det(bx(0.0, 0.0, 10.0, 10.0), 0.5);
        let right = det(bx(2.0, 0.0, 12.0, 10.0), 0.5);
        assert_eq!(
            suppress_overlaps(&[right.clone(), left.clone()], 0.4),
            vec![left]
        );
    }

    #[test]
    fn intersection_over_smaller_measure() {
        let big = det(bx(0.0, 0.0, 100.0, 100.0), 0.9);
        let inner = det(bx(10.0, 10.0, 20.0, 20.0), 0.5);
        // IoU is 0.01 so both survive; containment of the small box is 1.0
        assert_eq!(suppress_overlaps(&[big.clone(), inner.clone()], 0.4).len(), 2);
        assert_eq!(
            suppress_overlaps_with(
                &[big.clone(), inner],
                0.4,
                OverlapMeasure::IntersectionOverSmaller
            ),
            vec![big]
        );
    }

    #[test]
    fn oversized_hand_cases() {
        let d = det(bx(0.0, 0.0, 80.0, 70.0), 0.5);
        assert!(filter_oversized(&[d], 100.0, 100.0, 0.5).is_empty());
        let d = det(bx(0.0, 0.0, 50.0, 50.0), 0.5);
        assert_eq!(filter_oversized(std::slice::from_ref(&d), 100.0, 100.0, 0.5), vec![d]);
        let full = det(bx(0.0, 0.0, 5472.0, 3648.0), 0.7);
        assert!(filter_oversized(&[full], 5472.0, 3648.0, 0.5).is_empty());
        // exactly half is not larger than half
        let half = det(bx(0.0, 0.0, 50.0, 100.0), 0.5);
        assert_eq!(filter_oversized(std::slice::from_ref(&half), 100.0, 100.0, 0.5), vec![half]);
    }

    #[test]
    fn rock_subtraction_hand_cases() {
        let trash = det(bx(2.0, 2.0, 4.0, 4.0), 0.6);
        let rock = det(bx(0.0, 0.0, 10.0, 10.0), 0.6);
        assert!(subtract_overlapping(std::slice::from_ref(&trash), std::slice::from_ref(&rock), 0.5).is_empty());

        let far = det(bx(50.0, 50.0, 60.0, 60.0), 0.6);
        assert_eq!(
            subtract_overlapping(std::slice::from_ref(&far), &[rock], 0.5),
            vec![far]
        );

        let t = det(bx(0.0, 0.0, 10.0, 10.0), 0.6);
        let r = det(bx(5.0, 0.0, 15.0, 10.0), 0.6);
        assert_eq!(containment(&t.bbox, &r.bbox), 0.5);
        assert!(subtract_overlapping(&[t], &[r], 0.5).is_empty());
    }

    #[test]
    fn crop_bounds_round_outward() {
        let b = bx(10.2, 10.7, 20.1, 20.3);
        assert_eq!(
            b.crop_bounds(100, 100),
            CropBounds {
                x0: 10,
                y0: 10,
                x1: 21,
                y1: 21
            }
        );
        let edge = bx(95.5, 0.0, 100.0, 3.2);
        assert_eq!(
            edge.crop_bounds(100, 100),
            CropBounds {
                x0: 95,
                y0: 0,
                x1: 100,
                y1: 4
            }
        );
    }

    fn arb_box() -> impl Strategy<Value = PixelBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| PixelBox::new(x, y, x + w, y + h).unwrap())
    }

    fn arb_dets() -> impl Strategy<Value = Vec<ScoredDetection>> {
        prop::collection::vec((arb_box(), 0.0..=1.0f64), 0..20)
            .prop_map(|v| v.into_iter().map(|(b, s)| det(b, s)).collect())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 0.0, a.intersection_area(&b) == 0.0);
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn suppression_output_pairwise_below_threshold(dets in arb_dets(), t in 0.05..0.95f64) {
            let kept = suppress_overlaps(&dets, t);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox).unwrap() < t);
                }
            }
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            prop_assert_eq!(suppress_overlaps(&kept, t), kept.clone());
        }

        #[test]
        fn oversize_idempotent(dets in arb_dets()) {
            let once = filter_oversized(&dets, 120.0, 90.0, 0.5);
            prop_assert_eq!(filter_oversized(&once, 120.0, 90.0, 0.5), once.clone());
            prop_assert!(once.iter().all(|d| d.bbox.area() <= 0.5 * 120.0 * 90.0));
        }

        #[test]
        fn subtraction_only_removes(trash in arb_dets(), rocks in arb_dets()) {
            let before = trash.clone();
            let out = subtract_overlapping(&trash, &rocks, 0.5);
            prop_assert!(out.len() <= trash.len());
            prop_assert!(out.iter().all(|d| trash.contains(d)));
            prop_assert_eq!(before, trash);
        }
    }
}
