//! Scale-invariant feature transform: keypoint detection, 128-d descriptors and
//! ratio-test matching.
//!
//! The pipeline follows Lowe (2004) with the usual canonical parameters:
//! the input is doubled, a Gaussian pyramid with 3 scales per octave is built
//! starting from sigma 1.6, extrema of the difference-of-Gaussians are refined
//! with a quadratic fit and rejected on low contrast or high edge response,
//! every survivor gets one keypoint per dominant orientation and a 4x4x8
//! gradient histogram descriptor (trilinear interpolation, normalize, clamp
//! at 0.2, renormalize).
//!
//! Angles use image coordinates (y down), so orientations grow clockwise on
//! screen. Descriptors are computed in the same frame and are therefore
//! rotation invariant regardless of the handedness convention.

use std::f32::consts::PI;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DESCRIPTOR_LEN: usize = 128;

const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const ORI_RADIUS_FACTOR: f32 = 3.0 * ORI_SIGMA_FACTOR;
const DESC_SCALE_FACTOR: f32 = 3.0;
pub const DESC_MAG_CLAMP: f32 = 0.2;
const IMAGE_BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
/// Blur already present in the input image, in input pixels.
const INPUT_SIGMA: f32 = 0.5;
/// Smallest octave side length that is still processed.
const MIN_OCTAVE_SIZE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SiftError {
    #[error("image {0}x{1} too small: at least 8x8 pixels are required")]
    TooSmall(usize, usize),
    #[error("raster buffer of {got} values does not match {width}x{height}")]
    BadBuffer {
        width: usize,
        height: usize,
        got: usize,
    },
}

/// Single-channel floating point image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayRaster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, SiftError> {
        if data.len() != width * height {
            return Err(SiftError::BadBuffer {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Luminance conversion `0.299 R + 0.587 G + 0.114 B`, scaled to `[0, 1]`.
    pub fn from_image(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .pixels()
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample; coordinates outside the image are clamped to the edge.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn upsample2(&self) -> Self {
        let (w, h) = (self.width * 2, self.height * 2);
        Self::from_fn(w, h, |x, y| self.sample(x as f32 * 0.5, y as f32 * 0.5))
    }

    fn downsample2(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        Self::from_fn(w, h, |x, y| self.get(2 * x, 2 * y))
    }

    fn blur(&self, sigma: f32) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (4.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect101(x as isize + k as isize - radius, w);
                    acc += kv * row[sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0f32; w * h];
        for (k, &kv) in kernel.iter().enumerate() {
            for y in 0..h {
                let sy = reflect101(y as isize + k as isize - radius, h);
                let src = &tmp[sy * w..(sy + 1) * w];
                let dst = &mut out[y * w..(y + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += kv * s;
                }
            }
        }
        Self {
            width: w,
            height: h,
            data: out,
        }
    }

    fn sub(&self, other: &Self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftParams {
    pub scales_per_octave: usize,
    pub base_sigma: f32,
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftKeypoint {
    /// Input-image pixel coordinates.
    pub x: f32,
    pub y: f32,
    /// Blur level in input-image pixels.
    pub scale: f32,
    /// Radians in `[0, 2π)`.
    pub orientation: f32,
}

/// Keypoints with their index-aligned descriptors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiftDescriptorSet {
    pub keypoints: Vec<SiftKeypoint>,
    data: Vec<f32>,
}

impl SiftDescriptorSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * DESCRIPTOR_LEN..(i + 1) * DESCRIPTOR_LEN]
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(DESCRIPTOR_LEN)
    }

    /// Build a set from raw parts. Fails if the lengths are not aligned.
    pub fn from_parts(keypoints: Vec<SiftKeypoint>, descriptors: Vec<Vec<f32>>) -> Option<Self> {
        if keypoints.len() != descriptors.len()
            || descriptors.iter().any(|d| d.len() != DESCRIPTOR_LEN)
        {
            return None;
        }
        Some(Self {
            keypoints,
            data: descriptors.into_iter().flatten().collect(),
        })
    }

    /// JSON debug document: keypoints plus descriptors as nested arrays.
    pub fn to_debug_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Doc<'a> {
            keypoints: &'a [SiftKeypoint],
            descriptors: Vec<&'a [f32]>,
        }
        serde_json::to_value(Doc {
            keypoints: &self.keypoints,
            descriptors: self.descriptors().collect(),
        })
        .expect("descriptor set serializes")
    }
}

struct Octave {
    gaussians: Vec<GrayRaster>,
    dogs: Vec<GrayRaster>,
}

fn build_pyramid(base: &GrayRaster, params: &SiftParams) -> Vec<Octave> {
    let s = params.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    let mut sigmas = vec![0.0f32; s + 3];
    for (i, sig) in sigmas.iter_mut().enumerate().skip(1) {
        let prev = params.base_sigma * k.powi(i as i32 - 1);
        let total = prev * k;
        *sig = (total * total - prev * prev).sqrt();
    }

    let mut octaves = Vec::new();
    let mut first = base.clone();
    while first.width.min(first.height) >= MIN_OCTAVE_SIZE {
        let mut gaussians = Vec::with_capacity(s + 3);
        gaussians.push(first);
        for sig in &sigmas[1..] {
            let next = gaussians.last().unwrap().blur(*sig);
            gaussians.push(next);
        }
        let dogs = gaussians.windows(2).map(|w| w[1].sub(&w[0])).collect();
        first = gaussians[s].downsample2();
        octaves.push(Octave { gaussians, dogs });
    }
    octaves
}

/// Detect keypoints and compute descriptors with the default parameters.
pub fn extract(img: &GrayRaster) -> Result<SiftDescriptorSet, SiftError> {
    extract_with(img, &SiftParams::default())
}

pub fn extract_with(img: &GrayRaster, params: &SiftParams) -> Result<SiftDescriptorSet, SiftError> {
    if img.width < MIN_OCTAVE_SIZE / 2 || img.height < MIN_OCTAVE_SIZE / 2 {
        return Err(SiftError::TooSmall(img.width, img.height));
    }
    let doubled = img.upsample2();
    let pre_blur = 2.0 * INPUT_SIGMA;
    let first_sigma = (params.base_sigma.powi(2) - pre_blur.powi(2)).max(0.01).sqrt();
    let base = doubled.blur(first_sigma);
    let octaves = build_pyramid(&base, params);

    let mut set = SiftDescriptorSet::default();
    for (o, octave) in octaves.iter().enumerate() {
        for candidate in find_extrema(octave, params) {
            let Some(refined) = refine(octave, candidate, params) else {
                continue;
            };
            let gauss = &octave.gaussians[refined.layer];
            for angle in orientations(gauss, &refined) {
                let Some(desc) = descriptor(gauss, &refined, angle) else {
                    continue;
                };
                // octave 0 is the doubled image
                let to_input = 2f32.powi(o as i32) * 0.5;
                let kp = SiftKeypoint {
                    x: (refined.x * to_input).clamp(0.0, (img.width - 1) as f32),
                    y: (refined.y * to_input).clamp(0.0, (img.height - 1) as f32),
                    scale: refined.sigma * to_input,
                    orientation: angle,
                };
                set.keypoints.push(kp);
                set.data.extend_from_slice(&desc);
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    layer: usize,
    x: usize,
    y: usize,
}

#[derive(Debug, Clone, Copy)]
struct Refined {
    layer: usize,
    /// Subpixel octave coordinates.
    x: f32,
    y: f32,
    /// Blur relative to the octave's sampling grid.
    sigma: f32,
}

fn find_extrema(octave: &Octave, params: &SiftParams) -> Vec<Candidate> {
    let s = params.scales_per_octave;
    let threshold = 0.5 * params.contrast_threshold / s as f32;
    let (w, h) = (octave.dogs[0].width, octave.dogs[0].height);
    let mut out = Vec::new();
    if w <= 2 * IMAGE_BORDER || h <= 2 * IMAGE_BORDER {
        return out;
    }
    for layer in 1..=s {
        let (prev, cur, next) = (
            &octave.dogs[layer - 1],
            &octave.dogs[layer],
            &octave.dogs[layer + 1],
        );
        for y in IMAGE_BORDER..h - IMAGE_BORDER {
            for x in IMAGE_BORDER..w - IMAGE_BORDER {
                let v = cur.get(x, y);
                if v.abs() <= threshold {
                    continue;
                }
                let mut is_max = v > 0.0;
                let mut is_min = v < 0.0;
                'scan: for img in [prev, cur, next] {
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            let n = img.get(xx, yy);
                            is_max &= v >= n;
                            is_min &= v <= n;
                            if !is_max && !is_min {
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max || is_min {
                    out.push(Candidate { layer, x, y });
                }
            }
        }
    }
    out
}

fn solve3(h: [[f32; 3]; 3], b: [f32; 3]) -> Option<[f32; 3]> {
    let mut m = [
        [h[0][0] as f64, h[0][1] as f64, h[0][2] as f64, b[0] as f64],
        [h[1][0] as f64, h[1][1] as f64, h[1][2] as f64, b[1] as f64],
        [h[2][0] as f64, h[2][1] as f64, h[2][2] as f64, b[2] as f64],
    ];
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([
        (m[0][3] / m[0][0]) as f32,
        (m[1][3] / m[1][1]) as f32,
        (m[2][3] / m[2][2]) as f32,
    ])
}

fn refine(octave: &Octave, c: Candidate, params: &SiftParams) -> Option<Refined> {
    let s = params.scales_per_octave;
    let (w, h) = (octave.dogs[0].width, octave.dogs[0].height);
    let (mut layer, mut x, mut y) = (c.layer, c.x, c.y);
    let mut offset = [0.0f32; 3];
    let mut grad = [0.0f32; 3];
    let mut converged = false;

    for _ in 0..MAX_INTERP_STEPS {
        let d = |l: usize, xx: usize, yy: usize| octave.dogs[l].get(xx, yy);
        let v = d(layer, x, y);
        grad = [
            0.5 * (d(layer, x + 1, y) - d(layer, x - 1, y)),
            0.5 * (d(layer, x, y + 1) - d(layer, x, y - 1)),
            0.5 * (d(layer + 1, x, y) - d(layer - 1, x, y)),
        ];
        let dxx = d(layer, x + 1, y) + d(layer, x - 1, y) - 2.0 * v;
        let dyy = d(layer, x, y + 1) + d(layer, x, y - 1) - 2.0 * v;
        let dss = d(layer + 1, x, y) + d(layer - 1, x, y) - 2.0 * v;
        let dxy = 0.25
            * (d(layer, x + 1, y + 1) - d(layer, x - 1, y + 1) - d(layer, x + 1, y - 1)
                + d(layer, x - 1, y - 1));
        let dxs = 0.25
            * (d(layer + 1, x + 1, y) - d(layer + 1, x - 1, y) - d(layer - 1, x + 1, y)
                + d(layer - 1, x - 1, y));
        let dys = 0.25
            * (d(layer + 1, x, y + 1) - d(layer + 1, x, y - 1) - d(layer - 1, x, y + 1)
                + d(layer - 1, x, y - 1));
        let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        let sol = solve3(hess, grad)?;
        offset = [-sol[0], -sol[1], -sol[2]];

        if offset.iter().all(|o| o.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|o| o.abs() > 1e6) {
            return None;
        }
        let nx = x as isize + offset[0].round() as isize;
        let ny = y as isize + offset[1].round() as isize;
        let nl = layer as isize + offset[2].round() as isize;
        if nl < 1
            || nl > s as isize
            || nx < IMAGE_BORDER as isize
            || nx >= (w - IMAGE_BORDER) as isize
            || ny < IMAGE_BORDER as isize
            || ny >= (h - IMAGE_BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }

    let dog = &octave.dogs[layer];
    let v = dog.get(x, y);
    let contrast = v + 0.5 * (grad[0] * offset[0] + grad[1] * offset[1] + grad[2] * offset[2]);
    if contrast.abs() * (s as f32) < params.contrast_threshold {
        return None;
    }

    let dxx = dog.get(x + 1, y) + dog.get(x - 1, y) - 2.0 * v;
    let dyy = dog.get(x, y + 1) + dog.get(x, y - 1) - 2.0 * v;
    let dxy = 0.25
        * (dog.get(x + 1, y + 1) - dog.get(x - 1, y + 1) - dog.get(x + 1, y - 1)
            + dog.get(x - 1, y - 1));
    let trace = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = params.edge_ratio;
    if det <= 0.0 || trace * trace * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }

    Some(Refined {
        layer,
        x: x as f32 + offset[0],
        y: y as f32 + offset[1],
        sigma: params.base_sigma * 2f32.powf((layer as f32 + offset[2]) / s as f32),
    })
}

#[inline]
fn gradient(img: &GrayRaster, x: usize, y: usize) -> (f32, f32) {
    (
        img.get(x + 1, y) - img.get(x - 1, y),
        img.get(x, y + 1) - img.get(x, y - 1),
    )
}

fn orientations(gauss: &GrayRaster, kp: &Refined) -> Vec<f32> {
    let sigma = ORI_SIGMA_FACTOR * kp.sigma;
    let radius = (ORI_RADIUS_FACTOR * kp.sigma).round() as isize;
    let cx = kp.x.round() as isize;
    let cy = kp.y.round() as isize;
    let weight_scale = -1.0 / (2.0 * sigma * sigma);

    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        let y = cy + dy;
        if y <= 0 || y >= gauss.height as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let x = cx + dx;
            if x <= 0 || x >= gauss.width as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(gauss, x as usize, y as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).rem_euclid(2.0 * PI);
            let weight = (((dx * dx + dy * dy) as f32) * weight_scale).exp();
            let bin = ((angle * ORI_BINS as f32 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }

    let n = ORI_BINS;
    let smooth: Vec<f32> = (0..n)
        .map(|i| {
            let at = |o: isize| hist[(i as isize + o).rem_euclid(n as isize) as usize];
            (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0
        })
        .collect();
    let max = smooth.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }

    let mut out = Vec::new();
    for i in 0..n {
        let left = smooth[(i + n - 1) % n];
        let right = smooth[(i + 1) % n];
        let c = smooth[i];
        if c > left && c > right && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (left - right) / (left - 2.0 * c + right);
            let bin = (i as f32 + shift).rem_euclid(n as f32);
            let mut angle = bin * 2.0 * PI / n as f32;
            if angle >= 2.0 * PI {
                angle -= 2.0 * PI;
            }
            out.push(angle);
        }
    }
    out
}

/// Normalize to unit length, clamp components at 0.2 and renormalize.
/// Returns the clamped intermediate.
pub fn normalize_clamp(v: &mut [f32]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x / norm).min(DESC_MAG_CLAMP));
    }
    let clamped = v.to_vec();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    clamped
}

fn descriptor(gauss: &GrayRaster, kp: &Refined, angle: f32) -> Option<[f32; DESCRIPTOR_LEN]> {
    let d = DESC_WIDTH;
    let n = DESC_BINS;
    let hist_width = DESC_SCALE_FACTOR * kp.sigma;
    let diag = ((gauss.width * gauss.width + gauss.height * gauss.height) as f32).sqrt();
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5)
        .round()
        .min(diag) as isize;
    let (sin_t, cos_t) = angle.sin_cos();
    let cx = kp.x.round() as isize;
    let cy = kp.y.round() as isize;
    let bins_per_rad = n as f32 / (2.0 * PI);
    let exp_scale = -1.0 / (d as f32 * d as f32 * 0.5);

    let stride_c = n + 2;
    let stride_r = (d + 2) * stride_c;
    let mut hist = vec![0.0f32; (d + 2) * stride_r];

    for i in -radius..=radius {
        for j in -radius..=radius {
            // sample offset expressed in the keypoint's rotated frame, in bin units
            let c_rot = (j as f32 * cos_t + i as f32 * sin_t) / hist_width;
            let r_rot = (-(j as f32) * sin_t + i as f32 * cos_t) / hist_width;
            let rbin = r_rot + d as f32 / 2.0 - 0.5;
            let cbin = c_rot + d as f32 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f32 || cbin <= -1.0 || cbin >= d as f32 {
                continue;
            }
            let y = cy + i;
            let x = cx + j;
            if y <= 0 || y >= gauss.height as isize - 1 || x <= 0 || x >= gauss.width as isize - 1
            {
                continue;
            }
            let (gx, gy) = gradient(gauss, x as usize, y as usize);
            let mag = (gx * gx + gy * gy).sqrt()
                * ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let obin = (gy.atan2(gx) - angle).rem_euclid(2.0 * PI) * bins_per_rad;

            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0 = obin.floor();
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let o0 = (o0 as usize) % n;
            let base = ((r0 as isize + 1) as usize) * stride_r
                + ((c0 as isize + 1) as usize) * stride_c
                + o0;

            let v_r1 = mag * fr;
            let v_r0 = mag - v_r1;
            for (dr, vr) in [(0, v_r0), (1, v_r1)] {
                let v_c1 = vr * fc;
                let v_c0 = vr - v_c1;
                for (dc, vc) in [(0, v_c0), (1, v_c1)] {
                    let v_o1 = vc * fo;
                    let v_o0 = vc - v_o1;
                    let idx = base + dr * stride_r + dc * stride_c;
                    hist[idx] += v_o0;
                    hist[idx + 1] += v_o1;
                }
            }
        }
    }

    let mut out = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..d {
        for c in 0..d {
            let idx = (r + 1) * stride_r + (c + 1) * stride_c;
            // fold the wrap-around orientation bins back into range
            hist[idx] += hist[idx + n];
            hist[idx + 1] += hist[idx + n + 1];
            for o in 0..n {
                out[(r * d + c) * n + o] = hist[idx + o];
            }
        }
    }
    if out.iter().all(|v| *v == 0.0) {
        return None;
    }
    normalize_clamp(&mut out);
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub match_count: usize,
    /// `(index in a, index in b)`, sorted by the first index.
    pub pairs: Vec<(usize, usize)>,
}

/// Distance matrix with per-row and per-column best/second-best entries.
struct NearestTable {
    rows: Vec<Option<(usize, f32, f32)>>,
    cols: Vec<Option<(usize, f32, f32)>>,
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            let d = ca[k] - cb[k];
            acc[k] += d * d;
        }
    }
    acc.iter().sum()
}

fn push_candidate(slot: &mut (usize, f32, f32), idx: usize, dist: f32) {
    if dist < slot.1 {
        slot.2 = slot.1;
        slot.1 = dist;
        slot.0 = idx;
    } else if dist < slot.2 {
        slot.2 = dist;
    }
}

fn nearest_table(a: &SiftDescriptorSet, b: &SiftDescriptorSet) -> NearestTable {
    let init = (usize::MAX, f32::INFINITY, f32::INFINITY);
    let mut rows = vec![init; a.len()];
    let mut cols = vec![init; b.len()];
    for (i, da) in a.descriptors().enumerate() {
        for (j, db) in b.descriptors().enumerate() {
            let dist = squared_distance(da, db);
            push_candidate(&mut rows[i], j, dist);
            push_candidate(&mut cols[j], i, dist);
        }
    }
    let finish = |v: Vec<(usize, f32, f32)>| {
        v.into_iter()
            .map(|(i, d1, d2)| (i != usize::MAX).then_some((i, d1, d2)))
            .collect()
    };
    NearestTable {
        rows: finish(rows),
        cols: finish(cols),
    }
}

fn ratio_matches(best: &[Option<(usize, f32, f32)>], ratio: f32) -> MatchResult {
    let ratio_sq = ratio * ratio;
    // target index -> (distance, source index) of the closest accepted claim
    let mut claims: std::collections::BTreeMap<usize, (f32, usize)> = Default::default();
    for (src, entry) in best.iter().enumerate() {
        let Some((dst, d1, d2)) = *entry else {
            continue;
        };
        if !d2.is_finite() || d1 >= ratio_sq * d2 {
            continue;
        }
        claims
            .entry(dst)
            .and_modify(|cur| {
                if d1 < cur.0 {
                    *cur = (d1, src);
                }
            })
            .or_insert((d1, src));
    }
    let mut pairs: Vec<(usize, usize)> = claims.into_iter().map(|(dst, (_, src))| (src, dst)).collect();
    pairs.sort_unstable();
    MatchResult {
        match_count: pairs.len(),
        pairs,
    }
}

/// Lowe ratio-test matching of `a` against `b`, made one-to-one by keeping the
/// closest claim on each descriptor of `b`.
pub fn match_descriptors(a: &SiftDescriptorSet, b: &SiftDescriptorSet, ratio: f32) -> MatchResult {
    if a.is_empty() || b.is_empty() {
        return MatchResult::default();
    }
    ratio_matches(&nearest_table(a, b).rows, ratio)
}

/// Both matching directions from a single distance computation:
/// `(a -> b, b -> a)`, where the second result's pairs are `(index in b, index in a)`.
pub fn match_both_ways(
    a: &SiftDescriptorSet,
    b: &SiftDescriptorSet,
    ratio: f32,
) -> (MatchResult, MatchResult) {
    if a.is_empty() || b.is_empty() {
        return (MatchResult::default(), MatchResult::default());
    }
    let table = nearest_table(a, b);
    (
        ratio_matches(&table.rows, ratio),
        ratio_matches(&table.cols, ratio),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateVerdict {
    pub duplicate: bool,
    /// The larger of the two directional match counts.
    pub match_count: usize,
    pub forward: MatchResult,
    pub backward: MatchResult,
}

pub const DEFAULT_MIN_MATCHES: usize = 50;
pub const DEFAULT_RATIO: f32 = 0.75;

/// Duplicate verdict on precomputed features. Symmetric in its arguments.
pub fn duplicate_verdict(
    a: &SiftDescriptorSet,
    b: &SiftDescriptorSet,
    min_matches: usize,
    ratio: f32,
) -> DuplicateVerdict {
    let (forward, backward) = match_both_ways(a, b, ratio);
    let match_count = forward.match_count.max(backward.match_count);
    DuplicateVerdict {
        duplicate: match_count >= min_matches && match_count > 0,
        match_count,
        forward,
        backward,
    }
}

/// Whether two crops show the same object. Crops too small for feature
/// extraction are never duplicates.
pub fn is_duplicate(a: &GrayRaster, b: &GrayRaster, min_matches: usize) -> DuplicateVerdict {
    let fa = extract(a).unwrap_or_default();
    let fb = extract(b).unwrap_or_default();
    duplicate_verdict(&fa, &fb, min_matches, DEFAULT_RATIO)
}
