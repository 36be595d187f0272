#![allow(dead_code)]

use debris_core::geolocate::GeoPoint;
use debris_core::geometry::PixelBox;
use debris_core::pipeline::DebrisRecord;

pub fn sample_records() -> Vec<DebrisRecord> {
    let labels = ["plastic", "metal", "wood", "fishing gear"];
    (0..6)
        .map(|i| DebrisRecord {
            record_id: format!("s-IMG_{:04}-{:03}", i / 2 + 1, i % 2),
            source_image_id: format!("IMG_{:04}", i / 2 + 1),
            bbox: PixelBox::new(10.0 * i as f64, 20.0, 10.0 * i as f64 + 35.5, 61.0).unwrap(),
            detection_score: 0.9 - 0.1 * i as f64,
            predicted_label: labels[i % labels.len()].into(),
            corrected_label: (i == 3).then(|| "cage".to_string()),
            class_distribution: None,
            geo_position: (i != 5).then(|| GeoPoint::new(43.85 + 1e-5 * i as f64, -69.63)),
            altitude: Some(44.7),
            duplicate_group: None,
            is_canonical: false,
        })
        .collect()
}
