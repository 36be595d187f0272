//! Regenerates the synthetic coastal survey under `fixtures/coastal-survey`:
//! twelve JPEG frames with GPS EXIF, one sidecar detection document per
//! frame, ground-truth annotations and the expected metrics report.
//!
//!     cargo run -p debris-core --example make_fixture -- fixtures/coastal-survey

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use debris_core::config::SurveyConfig;
use debris_core::evaluation::{truth_to_json, GroundTruthBox};
use debris_core::geolocate::{gsd, offset_point, CameraModel, GeoPoint, ImageMeta};
use debris_core::geometry::PixelBox;
use debris_core::interface::{self, Providers};
use debris_core::providers::{FixtureClassification, FixtureDocument, WireDetection};
use debris_core::store::meta::embed_gps_jpeg;
use debris_core::store::SurveyStore;
use debris_core::synth::textured_patch;

const WIDTH: u32 = 1200;
const HEIGHT: u32 = 900;
const ALTITUDE: f64 = 44.7;
const OBJECT_PX: usize = 96;
const TRASH: &str = "all trash";
const ROCKS: &str = "all rocks";
const LABELS: [&str; 7] = ["wood", "cage", "fishing gear", "nature", "plastic", "metal", "wheel"];

struct Frame {
    east: f64,
    north: f64,
    heading: f64,
    gps: bool,
}

struct Instance {
    frame: usize,
    east: f64,
    north: f64,
    seed: u64,
    label: &'static str,
    predicted: &'static str,
    score: f64,
    rotation: f64,
    scale: f64,
}

#[allow(clippy::too_many_arguments)]
fn inst(
    frame: usize,
    east: f64,
    north: f64,
    seed: u64,
    label: &'static str,
    predicted: &'static str,
    score: f64,
    rotation: f64,
    scale: f64,
) -> Instance {
    Instance { frame, east, north, seed, label, predicted, score, rotation, scale }
}

fn frames() -> Vec<Frame> {
    // two passes, the second flown back the other way
    let mut out = Vec::new();
    for k in 0..6 {
        out.push(Frame { east: 40.0 * k as f64, north: 0.0, heading: 0.0, gps: true });
    }
    for k in 0..6 {
        out.push(Frame { east: 200.0 - 40.0 * k as f64, north: -120.0, heading: 180.0, gps: k != 5 });
    }
    out
}

fn instances() -> Vec<Instance> {
    vec![
        inst(0, 0.0, 12.0, 101, "plastic", "plastic", 0.62, 0.0, 1.0),
        inst(0, -3.0, -12.0, 102, "wood", "wood", 0.48, 15.0, 1.0),
        // duplicate pair A, seen from consecutive frames
        inst(0, 20.0, 0.0, 201, "fishing gear", "fishing gear", 0.71, 0.0, 1.0),
        inst(1, 22.5, 1.0, 201, "fishing gear", "fishing gear", 0.66, 25.0, 1.1),
        inst(1, 40.0, -15.0, 103, "wheel", "metal", 0.44, 0.0, 1.0),
        inst(2, 80.0, 10.0, 104, "metal", "metal", 0.57, 40.0, 0.9),
        // duplicate pair B
        inst(2, 100.0, -5.0, 202, "plastic", "plastic", 0.52, 0.0, 1.0),
        inst(3, 102.0, -3.5, 202, "plastic", "plastic", 0.58, -20.0, 0.9),
        inst(3, 120.0, 15.0, 105, "cage", "cage", 0.46, 0.0, 1.0),
        // decoy pair 1: two identical objects 6 m apart, plus a third nearby
        inst(4, 157.0, 0.0, 301, "plastic", "plastic", 0.55, 0.0, 1.0),
        inst(4, 163.0, 0.0, 301, "plastic", "plastic", 0.53, 0.0, 1.0),
        inst(4, 160.0, -8.0, 106, "nature", "nature", 0.22, 0.0, 0.9),
        inst(5, 200.0, 5.0, 107, "wood", "wood", 0.61, 0.0, 1.0),
        // too faint for either threshold pair: a miss
        inst(5, 200.0, -15.0, 108, "metal", "metal", 0.10, 0.0, 1.0),
        inst(6, 200.0, -110.0, 109, "plastic", "plastic", 0.50, 0.0, 1.0),
        inst(6, 198.0, -132.0, 110, "fishing gear", "fishing gear", 0.45, 30.0, 1.0),
        // duplicate pair C
        inst(7, 140.0, -120.0, 203, "metal", "metal", 0.64, 0.0, 1.0),
        inst(8, 141.5, -118.0, 203, "metal", "metal", 0.60, 35.0, 1.15),
        inst(7, 160.0, -108.0, 111, "cage", "fishing gear", 0.40, 0.0, 1.0),
        inst(8, 120.0, -130.0, 112, "wheel", "wheel", 0.50, 0.0, 1.0),
        inst(9, 80.0, -120.0, 113, "wood", "wood", 0.47, 0.0, 1.0),
        // decoy pair 2
        inst(10, 37.0, -125.0, 302, "wheel", "wheel", 0.50, 0.0, 1.0),
        inst(10, 43.0, -125.0, 302, "wheel", "wheel", 0.49, 0.0, 1.0),
        inst(11, 0.0, -115.0, 114, "plastic", "plastic", 0.56, 0.0, 1.0),
    ]
}

fn camera() -> CameraModel {
    CameraModel { image_width_px: WIDTH, image_height_px: HEIGHT, ..CameraModel::phantom4pro() }
}

fn meters_per_px() -> f64 {
    gsd(&ImageMeta::new(0.0, 0.0, ALTITUDE), &camera()).unwrap()
}

/// Ground offset from the frame center to image pixel coordinates.
fn world_to_pixel(frame: &Frame, east: f64, north: f64) -> (f64, f64) {
    let (de, dn) = (east - frame.east, north - frame.north);
    let (s, c) = frame.heading.to_radians().sin_cos();
    let right = de * c - dn * s;
    let up = de * s + dn * c;
    let g = meters_per_px();
    (WIDTH as f64 / 2.0 + right / g, HEIGHT as f64 / 2.0 - up / g)
}

fn background(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p1, p2, p3) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
    RgbImage::from_fn(WIDTH, HEIGHT, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let v = 0.66
            + 0.035 * (xf / 97.0 + p1).sin()
            + 0.03 * (yf / 71.0 + p2).sin()
            + 0.02 * ((xf + yf) / 53.0 + p3).sin();
        let sand = [0.95, 0.87, 0.70];
        Rgb(sand.map(|c| (c * v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Paint a rotated, scaled texture centered at `(cx, cy)`; returns its
/// axis-aligned bounds.
fn paint_patch(img: &mut RgbImage, cx: f64, cy: f64, seed: u64, rotation: f64, scale: f64, tint: [f64; 3]) -> PixelBox {
    let tex = textured_patch(OBJECT_PX, OBJECT_PX, seed);
    let half = OBJECT_PX as f64 / 2.0 * scale;
    let (s, c) = rotation.to_radians().sin_cos();
    let reach = half * (s.abs() + c.abs());
    let x0 = (cx - reach).floor().max(0.0) as u32;
    let y0 = (cy - reach).floor().max(0.0) as u32;
    let x1 = ((cx + reach).ceil() as u32).min(WIDTH);
    let y1 = ((cy + reach).ceil() as u32).min(HEIGHT);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // back into texture coordinates
            let u = (c * dx + s * dy) / scale + OBJECT_PX as f64 / 2.0 - 0.5;
            let v = (-s * dx + c * dy) / scale + OBJECT_PX as f64 / 2.0 - 0.5;
            if u < 0.0 || v < 0.0 || u > (OBJECT_PX - 1) as f64 || v > (OBJECT_PX - 1) as f64 {
                continue;
            }
            let t = tex.sample(u as f32, v as f32) as f64;
            img.put_pixel(x, y, Rgb(tint.map(|k| ((0.15 + 0.85 * t) * k * 255.0).round().clamp(0.0, 255.0) as u8)));
        }
    }
    PixelBox::new(cx - reach, cy - reach, cx + reach, cy + reach)
        .unwrap()
        .clamp_to(WIDTH as f64, HEIGHT as f64)
        .unwrap()
}

fn jitter(b: &PixelBox, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let mut j = || rng.random_range(-3i32..=3) as f64;
    [
        (b.x_min + j()).max(0.0),
        (b.y_min + j()).max(0.0),
        (b.x_max + j()).min(WIDTH as f64),
        (b.y_max + j()).min(HEIGHT as f64),
    ]
}

fn distribution(predicted: &str, runner_up: &str) -> HashMap<String, f64> {
    LABELS
        .iter()
        .map(|l| {
            let p = if *l == predicted {
                0.55
            } else if *l == runner_up {
                0.2
            } else {
                0.05
            };
            (l.to_string(), p)
        })
        .collect()
}

fn det(b: [f64; 4], score: f64, prompt: &str) -> WireDetection {
    WireDetection {
        x_min: b[0],
        y_min: b[1],
        x_max: b[2],
        y_max: b[3],
        score,
        prompt: prompt.into(),
        text_score: None,
    }
}

fn encode_jpeg(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut out, 92).encode_image(img).unwrap();
    out.into_inner()
}

const CONFIG: &str = r#"# Synthetic coastal survey: 1200x900 frames at 44.7 m.
[camera]
profile = "phantom4pro"
image_width_px = 1200
image_height_px = 900

[provider]
kind = "file"
dir = "detections"
"#;

fn main() {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "fixtures/coastal-survey".into()).into();
    let images_dir = out.join("images");
    let det_dir = out.join("detections");
    std::fs::create_dir_all(&images_dir).unwrap();
    std::fs::create_dir_all(&det_dir).unwrap();
    let origin = GeoPoint::new(43.8542, -69.6291);
    let frames = frames();
    let all = instances();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut truths = Vec::new();

    for (fi, frame) in frames.iter().enumerate() {
        let image_id = format!("IMG_{:04}", fi + 1);
        let mut img = background(1000 + fi as u64);
        let mut doc = FixtureDocument::default();

        for o in all.iter().filter(|o| o.frame == fi) {
            let (cx, cy) = world_to_pixel(frame, o.east, o.north);
            let shade = 0.6 + 0.4 * ((o.seed * 37 % 11) as f64 / 10.0);
            let tint = [shade, 0.55 + 0.3 * ((o.seed % 5) as f64 / 4.0), 1.0 - 0.5 * shade + 0.2];
            let bounds = paint_patch(&mut img, cx, cy, o.seed, o.rotation, o.scale, tint);
            truths.push(GroundTruthBox { image_id: image_id.clone(), bbox: bounds, label: o.label.into() });
            let b = jitter(&bounds, &mut rng);
            doc.detections.push(det(b, o.score, TRASH));
            let runner_up = if o.predicted == "plastic" { "metal" } else { "plastic" };
            doc.classifications.push(FixtureClassification {
                bbox: b,
                labels: None,
                probabilities: None,
                distribution: Some(distribution(o.predicted, runner_up)),
            });
        }

        match fi {
            3 => {
                // a rock outcrop with a trash proposal on top of it
                let (cx, cy) = world_to_pixel(frame, 118.0, -12.0);
                let rock = paint_patch(&mut img, cx, cy, 900, 0.0, 2.0, [0.45, 0.45, 0.48]);
                doc.detections.push(det([rock.x_min, rock.y_min, rock.x_max, rock.y_max], 0.5, ROCKS));
                doc.detections.push(det([cx - 30.0, cy - 30.0, cx + 30.0, cy + 30.0], 0.41, TRASH));
            }
            5 => doc.detections.push(det([0.0, 0.0, WIDTH as f64, HEIGHT as f64], 0.33, TRASH)),
            8 => {
                // a second, weaker proposal on the same object
                let (cx, cy) = world_to_pixel(frame, 120.0, -130.0);
                let b = [cx - 44.0, cy - 40.0, cx + 52.0, cy + 56.0];
                doc.detections.push(det(b, 0.30, TRASH));
            }
            9 => {
                // proposal on empty sand
                let (cx, cy) = world_to_pixel(frame, 88.0, -110.0);
                let b = [cx - 35.0, cy - 35.0, cx + 35.0, cy + 35.0];
                doc.detections.push(det(b, 0.32, TRASH));
                doc.classifications.push(FixtureClassification {
                    bbox: b,
                    labels: None,
                    probabilities: None,
                    distribution: Some(distribution("nature", "wood")),
                });
            }
            _ => {}
        }
        doc.default_classification = Some(FixtureClassification {
            bbox: [0.0, 0.0, 1.0, 1.0],
            labels: None,
            probabilities: None,
            distribution: Some(distribution("plastic", "wood")),
        });

        let mut jpeg = encode_jpeg(&img);
        if frame.gps {
            let pos = offset_point(&origin, frame.east, frame.north);
            let meta = ImageMeta {
                latitude: pos.latitude,
                longitude: pos.longitude,
                altitude: ALTITUDE,
                heading: frame.heading,
                captured_at: Some(format!("2023:07:14 10:{:02}:{:02}", 20 + fi / 6, (fi * 7) % 60)),
            };
            jpeg = embed_gps_jpeg(&jpeg, &meta).unwrap();
        }
        std::fs::write(images_dir.join(format!("{image_id}.jpg")), jpeg).unwrap();
        let doc_json = serde_json::to_string_pretty(&sorted_doc(&doc)).unwrap();
        std::fs::write(det_dir.join(format!("{image_id}.json")), doc_json + "\n").unwrap();
    }

    std::fs::write(out.join("truth.json"), truth_to_json(&truths) + "\n").unwrap();
    std::fs::write(out.join("survey.toml"), CONFIG).unwrap();
    write_expected(&out);
}

/// Distribution maps come out of a `HashMap`; going through `Value` sorts
/// their keys so the documents are stable.
fn sorted_doc(doc: &FixtureDocument) -> serde_json::Value {
    serde_json::to_value(doc).unwrap()
}

fn write_expected(out: &Path) {
    let tmp = tempfile::tempdir().unwrap();
    let store = SurveyStore::open(tmp.path()).unwrap();
    let cfg = SurveyConfig::load(&out.join("survey.toml")).unwrap();
    interface::ingest_dir(&store, Some("coastal"), &out.join("images"), &cfg).unwrap();
    let providers = Providers::from_config(&cfg);
    let run = interface::detect_survey(&store, "coastal", &cfg, &providers).unwrap();
    let report = interface::evaluate_stored(&store, "coastal", &out.join("truth.json"), &cfg).unwrap();
    let dedup = interface::dedup_stored(&store, "coastal", &cfg).unwrap();
    std::fs::create_dir_all(out.join("expected")).unwrap();
    let text = serde_json::to_string_pretty(&report).unwrap() + "\n";
    std::fs::write(out.join("expected").join("metrics.json"), text).unwrap();
    eprintln!(
        "{} records, {} groups, {} comparisons, mean IoU {:?}, accuracy {:?}, macro F1 {:?}",
        run.records,
        dedup.groups.len(),
        dedup.sift_comparisons,
        report.mean_iou,
        report.accuracy,
        report.macro_f1
    );
    for g in &dedup.groups {
        eprintln!("  {} {:?} {:?}", g.group_id, g.members, g.matches.iter().map(|m| m.match_count).collect::<Vec<_>>());
    }
    for c in &dedup.comparisons {
        eprintln!("  compared {} {} -> {}", c.a, c.b, c.match_count);
    }
}
