//! Depth-image degradation pipeline bridging rendered and sensor depth.
//!
//! Stages, in order:
//!
//! 1. clip to `[0.15, 3.0]` m
//! 2. contour drop: pixels on a depth discontinuity are pushed to max range
//! 3. crop 20 px left, 5 right, 16 bottom, 0 top
//! 4. random max-depth rectangles
//! 5. 3×3 Gaussian blur with a per-image sigma
//! 6. bilinear resize to 87×58
//! 7. affine map of `[clip_min, clip_max]` onto `[-0.5, 0.5]`
//!
//! Deploy mode skips stages 2 and 4.

pub mod io;

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Clipped,
    Contoured,
    Cropped,
    Artifacted,
    Blurred,
    Resized,
    Normalized,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Clipped => "clipped",
            Stage::Contoured => "contoured",
            Stage::Cropped => "cropped",
            Stage::Artifacted => "artifacted",
            Stage::Blurred => "blurred",
            Stage::Resized => "resized",
            Stage::Normalized => "normalized",
        }
    }
}

/// Row-major depth image in meters (or normalized units after stage 7).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    stage: Stage,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                op: "DepthImage::new",
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
            stage: Stage::Raw,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            stage: Stage::Raw,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineMode {
    Train,
    /// On-robot processing: no contour drop, no artifacts.
    Deploy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropMargins {
    pub left: usize,
    pub right: usize,
    pub bottom: usize,
    pub top: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub clip_min: f32,
    pub clip_max: f32,
    pub contour_grad_threshold: f32,
    pub contour_drop_prob: f64,
    pub crop: CropMargins,
    pub artifact_prob: f64,
    /// Mean and sigma of the Gaussian artifact width and height, in pixels.
    pub artifact_size: (f64, f64),
    pub blur_kernel: usize,
    pub blur_sigma_range: (f64, f64),
    /// Fixes the blur sigma instead of sampling it.
    pub blur_sigma: Option<f64>,
    pub target_width: usize,
    pub target_height: usize,
    pub mode: PipelineMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_width: 160,
            input_height: 120,
            clip_min: 0.15,
            clip_max: 3.0,
            contour_grad_threshold: 1.0,
            contour_drop_prob: 0.1,
            crop: CropMargins {
                left: 20,
                right: 5,
                bottom: 16,
                top: 0,
            },
            artifact_prob: 0.001,
            artifact_size: (3.0, 3.0),
            blur_kernel: 3,
            blur_sigma_range: (0.1, 2.0),
            blur_sigma: None,
            target_width: 87,
            target_height: 58,
            mode: PipelineMode::Train,
        }
    }
}

impl PipelineConfig {
    pub fn deploy() -> Self {
        Self {
            mode: PipelineMode::Deploy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_min < self.clip_max) {
            return Err(Error::invalid("clip_min must be below clip_max"));
        }
        for (name, p) in [
            ("contour_drop_prob", self.contour_drop_prob),
            ("artifact_prob", self.artifact_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.blur_kernel != 3 {
            return Err(Error::invalid("only a 3x3 blur kernel is supported"));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi) || self.blur_sigma.is_some_and(|s| s <= 0.0) {
            return Err(Error::invalid("blur sigma must be positive"));
        }
        if self.target_width == 0 || self.target_height == 0 {
            return Err(Error::invalid("target size must be positive"));
        }
        Ok(())
    }
}

/// Stage 1. Non-finite readings are treated as out of range (max depth).
pub fn clip(img: &DepthImage, cfg: &PipelineConfig) -> DepthImage {
    let data = img
        .data
        .iter()
        .map(|&v| {
            if v.is_nan() {
                cfg.clip_max
            } else {
                v.clamp(cfg.clip_min, cfg.clip_max)
            }
        })
        .collect();
    DepthImage {
        data,
        ..img.clone()
    }
    .with_stage(Stage::Clipped)
}

/// Pixels whose forward difference to the right or downward neighbour
/// exceeds the threshold.
pub fn contour_mask(img: &DepthImage, threshold: f32) -> Vec<bool> {
    let (w, h) = (img.width, img.height);
    let mut mask = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let v = img.get(c, r);
            let dx = if c + 1 < w { (img.get(c + 1, r) - v).abs() } else { 0.0 };
            let dy = if r + 1 < h { (img.get(c, r + 1) - v).abs() } else { 0.0 };
            mask[r * w + c] = dx.max(dy) > threshold;
        }
    }
    mask
}

/// Stage 2. Each contour pixel is set to max depth with probability
/// `contour_drop_prob`.
pub fn contour_drop(img: &DepthImage, cfg: &PipelineConfig, rng: &mut Rng) -> DepthImage {
    let mask = contour_mask(img, cfg.contour_grad_threshold);
    let mut out = img.clone();
    for (v, hit) in out.data.iter_mut().zip(mask) {
        if hit && rng.bernoulli(cfg.contour_drop_prob) {
            *v = cfg.clip_max;
        }
    }
    out.with_stage(Stage::Contoured)
}

/// Stage 3.
pub fn crop(img: &DepthImage, cfg: &PipelineConfig) -> Result<DepthImage> {
    let m = cfg.crop;
    if m.left + m.right >= img.width || m.top + m.bottom >= img.height {
        return Err(Error::invalid(format!(
            "{}x{} image is too small for crop margins {m:?}",
            img.width, img.height
        )));
    }
    let width = img.width - m.left - m.right;
    let height = img.height - m.top - m.bottom;
    let mut data = Vec::with_capacity(width * height);
    for r in m.top..m.top + height {
        let start = r * img.width + m.left;
        data.extend_from_slice(&img.data[start..start + width]);
    }
    Ok(DepthImage {
        width,
        height,
        data,
        stage: Stage::Cropped,
    })
}

/// Stage 4, also returning how many rectangles were painted.
pub fn add_artifacts_counted(img: &DepthImage, cfg: &PipelineConfig, rng: &mut Rng) -> (DepthImage, usize) {
    let mut out = img.clone();
    let (w, h) = (img.width as i64, img.height as i64);
    let (mean, sigma) = cfg.artifact_size;
    let mut count = 0;
    for r in 0..h {
        for c in 0..w {
            if !rng.bernoulli(cfg.artifact_prob) {
                continue;
            }
            count += 1;
            let aw = (rng.gaussian(mean, sigma).round() as i64).max(1);
            let ah = (rng.gaussian(mean, sigma).round() as i64).max(1);
            let (c0, r0) = (c - aw / 2, r - ah / 2);
            for rr in r0.max(0)..(r0 + ah).min(h) {
                for cc in c0.max(0)..(c0 + aw).min(w) {
                    out.set(cc as usize, rr as usize, cfg.clip_max);
                }
            }
        }
    }
    (out.with_stage(Stage::Artifacted), count)
}

/// Stage 4. With probability `artifact_prob` per pixel, paint a max-depth
/// rectangle centred there with Gaussian width and height (at least 1 px,
/// clipped to the image).
pub fn add_artifacts(img: &DepthImage, cfg: &PipelineConfig, rng: &mut Rng) -> DepthImage {
    add_artifacts_counted(img, cfg, rng).0
}

/// Normalized 3-tap Gaussian; the 2-D kernel is its outer product.
pub fn gaussian_kernel_1d(sigma: f64) -> [f64; 3] {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let sum = 1.0 + 2.0 * side;
    [side / sum, 1.0 / sum, side / sum]
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// 3×3 Gaussian blur with reflect padding (edge pixel not repeated).
pub fn blur_with_sigma(img: &DepthImage, sigma: f64) -> DepthImage {
    let k = gaussian_kernel_1d(sigma);
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f64;
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for (dr, kr) in k.iter().enumerate() {
                let rr = reflect(r as i64 + dr as i64 - 1, h);
                for (dc, kc) in k.iter().enumerate() {
                    let v = img.get(reflect(c as i64 + dc as i64 - 1, w), rr);
                    acc += kr * kc * v as f64;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            out.set(c, r, (acc as f32).clamp(lo, hi));
        }
    }
    out.with_stage(Stage::Blurred)
}

/// Stage 5: the sigma is pinned by the config or drawn per image.
pub fn blur(img: &DepthImage, cfg: &PipelineConfig, rng: &mut Rng) -> DepthImage {
    let sigma = cfg
        .blur_sigma
        .unwrap_or_else(|| rng.uniform_range(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1));
    blur_with_sigma(img, sigma)
}

/// Stage 6: bilinear downsampling with half-pixel centres.
pub fn resize(img: &DepthImage, cfg: &PipelineConfig) -> Result<DepthImage> {
    let (tw, th) = (cfg.target_width, cfg.target_height);
    if tw > img.width || th > img.height {
        return Err(Error::invalid(format!(
            "resize would upscale {}x{} to {tw}x{th}",
            img.width, img.height
        )));
    }
    let sx = img.width as f64 / tw as f64;
    let sy = img.height as f64 / th as f64;
    let src = |dst: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let p = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut data = Vec::with_capacity(tw * th);
    for r in 0..th {
        let (r0, r1, fy) = src(r, sy, img.height);
        for c in 0..tw {
            let (c0, c1, fx) = src(c, sx, img.width);
            let q = [img.get(c0, r0), img.get(c1, r0), img.get(c0, r1), img.get(c1, r1)];
            let top = q[0] as f64 * (1.0 - fx) + q[1] as f64 * fx;
            let bottom = q[2] as f64 * (1.0 - fx) + q[3] as f64 * fx;
            let v = (top * (1.0 - fy) + bottom * fy) as f32;
            let lo = q.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = q.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            data.push(v.clamp(lo, hi));
        }
    }
    Ok(DepthImage {
        width: tw,
        height: th,
        data,
        stage: Stage::Resized,
    })
}

/// Stage 7: `(d − min)/(max − min) − 0.5`.
pub fn normalize(img: &DepthImage, cfg: &PipelineConfig) -> Result<DepthImage> {
    let (lo, hi) = (cfg.clip_min, cfg.clip_max);
    if let Some(&bad) = img.data.iter().find(|&&v| !(lo..=hi).contains(&v)) {
        return Err(Error::OutOfRange {
            op: "normalize",
            value: bad as f64,
            min: lo as f64,
            max: hi as f64,
        });
    }
    let range = (hi - lo) as f64;
    let data = img
        .data
        .iter()
        .map(|&v| (((v - lo) as f64 / range) - 0.5).clamp(-0.5, 0.5) as f32)
        .collect();
    Ok(DepthImage {
        data,
        ..img.clone()
    }
    .with_stage(Stage::Normalized))
}

/// Runs all stages and returns every intermediate image, raw input first.
pub fn run_pipeline_stages(img: &DepthImage, cfg: &PipelineConfig, rng: &mut Rng) -> Result<Vec<DepthImage>> {
    cfg.validate()?;
    if img.width != cfg.input_width || img.height != cfg.input_height {
        return Err(Error::invalid(format!(
            "expected a {}x{} input, got {}x{}",
            cfg.input_width, cfg.input_height, img.width, img.height
        )));
    }
    let train = cfg.mode == PipelineMode::Train;
    let mut stages = vec![img.clone()];
    let mut cur = clip(img, cfg);
    if train {
        stages.push(cur.clone());
        cur = contour_drop(&cur, cfg, rng);
    }
    stages.push(cur.clone());
    cur = crop(&cur, cfg)?;
    if train {
        stages.push(cur.clone());
        cur = add_artifacts(&cur, cfg, rng);
    }
    stages.push(cur.clone());
    cur = blur(&cur, cfg, rng);
    stages.push(cur.clone());
    cur = resize(&cur, cfg)?;
    stages.push(cur.clone());
    stages.push(normalize(&cur, cfg)?);
    Ok(stages)
}

pub fn run_pipeline(img: &DepthImage, cfg: &PipelineConfig, rng: &mut Rng) -> Result<DepthImage> {
    Ok(run_pipeline_stages(img, cfg, rng)?
        .pop()
        .expect("pipeline produces at least one image"))
}
