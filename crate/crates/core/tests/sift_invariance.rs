use debris_core::sift::{
    duplicate_verdict, extract, match_descriptors, SiftDescriptorSet, SiftKeypoint,
    DEFAULT_MIN_MATCHES, DEFAULT_RATIO,
};
use debris_core::synth::{blob_field, jitter, rotate, rotate90, scale, textured_patch, white_noise};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::time::{Duration, Instant};

fn crop() -> debris_core::sift::GrayRaster {
    textured_patch(128, 128, 11)
}

fn matches(a: &SiftDescriptorSet, b: &SiftDescriptorSet) -> usize {
    duplicate_verdict(a, b, DEFAULT_MIN_MATCHES, DEFAULT_RATIO).match_count
}

#[test]
fn crop_matches_itself_and_warped_copies() {
    let base = extract(&crop()).unwrap();
    assert!(base.len() >= 100, "only {} keypoints", base.len());
    assert!(matches(&base, &base) >= 50);

    let rotated = extract(&rotate(&crop(), 30.0, 0.45)).unwrap();
    let scaled = extract(&scale(&crop(), 1.5)).unwrap();
    let noisy = extract(&jitter(&crop(), 0.02, 5)).unwrap();
    for (name, other) in [("rot30", &rotated), ("scale1.5", &scaled), ("jitter", &noisy)] {
        let v = duplicate_verdict(&base, other, DEFAULT_MIN_MATCHES, DEFAULT_RATIO);
        assert!(v.duplicate, "{name}: {} matches", v.match_count);
    }
}

#[test]
fn unrelated_textures_are_not_duplicates() {
    let a = extract(&textured_patch(128, 128, 11)).unwrap();
    for seed in 20..24 {
        let b = extract(&textured_patch(128, 128, seed)).unwrap();
        assert!(matches(&a, &b) < 50);
    }
}

#[test]
fn seeded_noise_pairs_are_not_duplicates() {
    for s in 0..20u64 {
        let a = extract(&white_noise(96, 96, 2 * s)).unwrap();
        let b = extract(&white_noise(96, 96, 2 * s + 1)).unwrap();
        let v = duplicate_verdict(&a, &b, DEFAULT_MIN_MATCHES, DEFAULT_RATIO);
        assert!(!v.duplicate, "pair {s}: {}", v.match_count);
    }
}

#[test]
fn blob_centers_are_localized() {
    let centers = [(20.0, 20.0), (60.0, 25.0), (40.0, 50.0), (15.0, 70.0), (70.0, 70.0)];
    let feats = extract(&blob_field(90, 90, &centers, 3.0)).unwrap();
    for (cx, cy) in centers {
        let nearest = feats
            .keypoints
            .iter()
            .map(|k| (k.x - cx).hypot(k.y - cy))
            .fold(f32::INFINITY, f32::min);
        assert!(nearest < 2.0, "blob at ({cx}, {cy}) missed by {nearest}");
    }
}

#[test]
fn quarter_turn_keeps_keypoint_count() {
    let a = extract(&crop()).unwrap().len() as f64;
    let b = extract(&rotate90(&crop())).unwrap().len() as f64;
    assert!((a - b).abs() / a <= 0.2, "{a} vs {b}");
}

#[test]
fn upscaled_keypoints_scale_with_image() {
    let base = extract(&crop()).unwrap();
    let big = extract(&scale(&crop(), 2.0)).unwrap();
    let fwd = match_descriptors(&base, &big, DEFAULT_RATIO);
    assert!(fwd.match_count >= 30);
    let mut ratios: Vec<f32> = fwd
        .pairs
        .iter()
        .map(|&(i, j)| big.keypoints[j].scale / base.keypoints[i].scale)
        .collect();
    ratios.sort_by(f32::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!((median - 2.0).abs() < 0.3, "median scale ratio {median}");
}

#[test]
fn extraction_is_deterministic() {
    assert_eq!(extract(&crop()).unwrap(), extract(&crop()).unwrap());
}

#[test]
fn descriptors_are_unit_clamped_vectors() {
    let feats = extract(&crop()).unwrap();
    for d in feats.descriptors() {
        assert_eq!(d.len(), 128);
        assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0));
        let norm: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-4);
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> SiftDescriptorSet {
    let kps = (0..n)
        .map(|i| SiftKeypoint { x: i as f32, y: 0.0, scale: 1.0, orientation: 0.0 })
        .collect();
    let descs = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..128).map(|_| rng.random::<f32>()).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    SiftDescriptorSet::from_parts(kps, descs).unwrap()
}

/// Straightforward ratio test with one-to-one resolution.
fn oracle_matches(a: &SiftDescriptorSet, b: &SiftDescriptorSet, ratio: f64) -> HashSet<(usize, usize)> {
    let dist = |x: &[f32], y: &[f32]| -> f64 {
        x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut best_claim: Vec<Option<(f64, usize)>> = vec![None; b.len()];
    for i in 0..a.len() {
        let mut ds: Vec<(f64, usize)> =
            (0..b.len()).map(|j| (dist(a.descriptor(i), b.descriptor(j)), j)).collect();
        ds.sort_by(|x, y| x.0.total_cmp(&y.0));
        if ds.len() < 2 || ds[0].0 >= ratio * ds[1].0 {
            continue;
        }
        let (d, j) = ds[0];
        if best_claim[j].is_none_or(|(cur, _)| d < cur) {
            best_claim[j] = Some((d, i));
        }
    }
    best_claim
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.map(|(_, i)| (i, j)))
        .collect()
}

#[test]
fn matcher_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..30 {
        let a = random_set(&mut rng, 20 + trial);
        // b mixes perturbed copies of a with fresh vectors so the ratio test bites
        let mut b = random_set(&mut rng, 25);
        let mut kps = b.keypoints.clone();
        let mut descs: Vec<Vec<f32>> = b.descriptors().map(|d| d.to_vec()).collect();
        for i in (0..a.len()).step_by(2) {
            let d: Vec<f32> = a
                .descriptor(i)
                .iter()
                .map(|v| (v + rng.random_range(-0.02..0.02f32)).max(0.0))
                .collect();
            descs.push(d);
            kps.push(SiftKeypoint { x: 0.0, y: 0.0, scale: 1.0, orientation: 0.0 });
        }
        b = SiftDescriptorSet::from_parts(kps, descs).unwrap();
        let got = match_descriptors(&a, &b, 0.75);
        let got_set: HashSet<_> = got.pairs.iter().cloned().collect();
        assert_eq!(got_set, oracle_matches(&a, &b, 0.75), "trial {trial}");
        assert_eq!(got.match_count, got.pairs.len());
    }
}

#[test]
fn matches_are_one_to_one() {
    let base = extract(&crop()).unwrap();
    let other = extract(&scale(&rotate(&crop(), 30.0, 0.45), 1.5)).unwrap();
    let v = duplicate_verdict(&base, &other, DEFAULT_MIN_MATCHES, DEFAULT_RATIO);
    for m in [&v.forward, &v.backward] {
        let left: HashSet<_> = m.pairs.iter().map(|p| p.0).collect();
        let right: HashSet<_> = m.pairs.iter().map(|p| p.1).collect();
        assert_eq!(left.len(), m.pairs.len());
        assert_eq!(right.len(), m.pairs.len());
    }
    assert_eq!(v.match_count, v.forward.match_count.max(v.backward.match_count));
    let swapped = duplicate_verdict(&other, &base, DEFAULT_MIN_MATCHES, DEFAULT_RATIO);
    assert_eq!(swapped.match_count, v.match_count);
}

#[test]
fn self_matching_recovers_most_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let set = random_set(&mut rng, 200);
    let m = match_descriptors(&set, &set, DEFAULT_RATIO);
    assert!(m.match_count as f64 >= 0.9 * 200.0);
    assert!(m.pairs.iter().all(|(i, j)| i == j));
}

fn median_time(side: usize) -> Duration {
    let img = textured_patch(side, side, 3);
    let mut runs: Vec<Duration> = (0..3)
        .map(|_| {
            let t = Instant::now();
            extract(&img).unwrap();
            t.elapsed()
        })
        .collect();
    runs.sort();
    runs[1]
}

#[test]
fn extraction_time_grows_linearly_with_area() {
    // each step doubles the pixel count
    let small = median_time(181);
    let large = median_time(362);
    let ratio = large.as_secs_f64() / small.as_secs_f64();
    assert!(ratio < 2.6 * 2.0, "4x area took {ratio:.2}x");
}
