//! Deterministic synthetic imagery: textured debris-like crops, Gaussian blob
//! fields, white noise and geometric warps. Used to build the shipped fixture
//! survey and by the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sift::GrayRaster;

/// Piecewise-constant texture of overlapping ellipses, bars and speckles on a
/// mid-gray background, lightly blurred. Different seeds give unrelated
/// textures.
pub fn textured_patch(width: usize, height: usize, seed: u64) -> GrayRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.45f32; width * height];
    let area = (width * height) as f32;
    let shapes = (area / 90.0).max(12.0) as usize;
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let value = rng.random_range(0.0..1.0f32);
        match rng.random_range(0..3) {
            0 => {
                let rx = rng.random_range(2.0..9.0f32);
                let ry = rng.random_range(2.0..9.0f32);
                let theta = rng.random_range(0.0..std::f32::consts::PI);
                let (s, c) = theta.sin_cos();
                paint(&mut img, width, height, cx, cy, rx.max(ry), |dx, dy| {
                    let u = (dx * c + dy * s) / rx;
                    let v = (-dx * s + dy * c) / ry;
                    u * u + v * v <= 1.0
                }, value);
            }
            1 => {
                let len = rng.random_range(4.0..14.0f32);
                let half_w = rng.random_range(1.0..2.5f32);
                let theta = rng.random_range(0.0..std::f32::consts::PI);
                let (s, c) = theta.sin_cos();
                paint(&mut img, width, height, cx, cy, len, |dx, dy| {
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    u.abs() <= len && v.abs() <= half_w
                }, value);
            }
            _ => {
                let r = rng.random_range(1.0..2.5f32);
                paint(&mut img, width, height, cx, cy, r, |dx, dy| dx * dx + dy * dy <= r * r, value);
            }
        }
    }
    let raster = GrayRaster::new(width, height, img).expect("sized buffer");
    smooth3(&raster)
}

fn paint(
    img: &mut [f32],
    width: usize,
    height: usize,
    cx: f32,
    cy: f32,
    reach: f32,
    inside: impl Fn(f32, f32) -> bool,
    value: f32,
) {
    let x0 = (cx - reach - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - reach - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + reach + 1.0).ceil() as usize).min(width);
    let y1 = ((cy + reach + 1.0).ceil() as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy) {
                img[y * width + x] = value;
            }
        }
    }
}

/// 3x3 box filter, edges replicated.
fn smooth3(src: &GrayRaster) -> GrayRaster {
    let (w, h) = (src.width(), src.height());
    GrayRaster::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                acc += src.get(sx, sy);
            }
        }
        acc / 9.0
    })
}

/// Bright isotropic Gaussian blobs on a flat background.
pub fn blob_field(width: usize, height: usize, centers: &[(f32, f32)], sigma: f32) -> GrayRaster {
    GrayRaster::from_fn(width, height, |x, y| {
        let mut v = 0.2;
        for &(cx, cy) in centers {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            v += 0.7 * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        v.min(1.0)
    })
}

/// Independent uniform noise in `[0, 1]`.
pub fn white_noise(width: usize, height: usize, seed: u64) -> GrayRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayRaster::from_fn(width, height, |_, _| rng.random::<f32>())
}

/// Rotate by `degrees` (clockwise on screen) about the center, keeping the
/// canvas size. Uncovered pixels take `fill`.
pub fn rotate(src: &GrayRaster, degrees: f32, fill: f32) -> GrayRaster {
    let (w, h) = (src.width(), src.height());
    let (cx, cy) = ((w as f32 - 1.0) * 0.5, (h as f32 - 1.0) * 0.5);
    let (s, c) = degrees.to_radians().sin_cos();
    GrayRaster::from_fn(w, h, |x, y| {
        let dx = x as f32 - cx;
        let dy = y as f32 - cy;
        // inverse rotation maps the destination back into the source
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
            fill
        } else {
            src.sample(sx, sy)
        }
    })
}

/// Exact 90° clockwise rotation (a pixel permutation).
pub fn rotate90(src: &GrayRaster) -> GrayRaster {
    let (w, h) = (src.width(), src.height());
    GrayRaster::from_fn(h, w, |x, y| src.get(y, h - 1 - x))
}

/// Bilinear rescale by `factor`.
pub fn scale(src: &GrayRaster, factor: f32) -> GrayRaster {
    let w = ((src.width() as f32) * factor).round().max(1.0) as usize;
    let h = ((src.height() as f32) * factor).round().max(1.0) as usize;
    GrayRaster::from_fn(w, h, |x, y| {
        src.sample((x as f32 + 0.5) / factor - 0.5, (y as f32 + 0.5) / factor - 0.5)
    })
}

/// Add seeded uniform noise of amplitude `amp`, clamped to `[0, 1]`.
pub fn jitter(src: &GrayRaster, amp: f32, seed: u64) -> GrayRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (src.width(), src.height());
    GrayRaster::from_fn(w, h, |x, y| {
        (src.get(x, y) + rng.random_range(-amp..=amp)).clamp(0.0, 1.0)
    })
}
