//! Decomposing scale sets and seeded crop sampling.
//!
//! A scale is an area fraction of the image. Crops keep the image aspect
//! ratio, so a crop at scale `s` measures `round(W·√s) × round(H·√s)` and is
//! placed uniformly at random over all valid integer offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VcrError};
use crate::rng::{self, Stream};

/// The `n` decomposing scales `{1/n, 2/n, …, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    n: usize,
    alpha_min: f64,
    alpha_max: f64,
    gamma: f64,
    scales: Vec<f64>,
}

impl ScaleSet {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha_min(&self) -> f64 {
        self.alpha_min
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// Partition ratio `(alpha_max - alpha_min) / n`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// The first `n - 1` scales.
    pub fn local_scales(&self) -> &[f64] {
        &self.scales[..self.n - 1]
    }

    pub fn global_scale(&self) -> f64 {
        self.scales[self.n - 1]
    }

    pub fn position(&self, scale: f64) -> Option<usize> {
        self.scales.iter().position(|&s| (s - scale).abs() < 1e-9)
    }
}

pub fn build_scale_set(n: usize) -> Result<ScaleSet> {
    if n == 0 {
        return Err(VcrError::invalid("number of scales must be at least 1"));
    }
    let (alpha_min, alpha_max) = (0.0, 1.0);
    let gamma = (alpha_max - alpha_min) / n as f64;
    let mut scales: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
    // assigned rather than accumulated
    scales[n - 1] = alpha_max;
    Ok(ScaleSet {
        n,
        alpha_min,
        alpha_max,
        gamma,
        scales,
    })
}

/// Axis-aligned pixel rectangle inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }

    /// The rectangle reflected about the vertical center line of the image.
    pub fn mirrored(&self, width: u32) -> Self {
        Self::new(width - self.x - self.w, self.y, self.w, self.h)
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// What a backend is asked to encode for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    /// The whole image, unmodified.
    Global,
    Crop(CropRect),
    /// A crop followed by a horizontal flip of its pixels.
    FlippedCrop(CropRect),
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            View::Global => write!(f, "global"),
            View::Crop(r) => write!(f, "[{},{},{},{}]", r.x, r.y, r.w, r.h),
            View::FlippedCrop(r) => write!(f, "flip[{},{},{},{}]", r.x, r.y, r.w, r.h),
        }
    }
}

fn round_half_up(v: f64) -> u32 {
    (v + 0.5).floor() as u32
}

/// Crop dimensions for a scale: aspect-preserving, rounded half up and
/// clamped to `[1, dimension]`.
pub fn crop_size(width: u32, height: u32, scale: f64) -> (u32, u32) {
    let side = scale.sqrt();
    let w = round_half_up(f64::from(width) * side).clamp(1, width);
    let h = round_half_up(f64::from(height) * side).clamp(1, height);
    (w, h)
}

fn check_sampling_args(width: u32, height: u32, scale: f64, m: usize) -> Result<()> {
    if width < 2 || height < 2 {
        return Err(VcrError::invalid(format!(
            "image must be at least 2x2, got {width}x{height}"
        )));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(VcrError::invalid(format!("scale {scale} outside (0, 1]")));
    }
    if m == 0 {
        return Err(VcrError::invalid("number of views m must be at least 1"));
    }
    Ok(())
}

/// Samples `m` crops at `scale` from stream 0 of `seed`.
pub fn sample_crops(width: u32, height: u32, scale: f64, m: usize, seed: u64) -> Result<Vec<CropRect>> {
    sample_crops_stream(width, height, scale, m, seed, 0)
}

/// Samples `m` crops at `scale` from the given stream of `seed`.
///
/// Each crop consumes two bounded draws, `x` then `y`.
pub fn sample_crops_stream(
    width: u32,
    height: u32,
    scale: f64,
    m: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<CropRect>> {
    check_sampling_args(width, height, scale, m)?;
    if scale == 1.0 {
        return Ok(vec![CropRect::full(width, height); m]);
    }
    let (w, h) = crop_size(width, height, scale);
    let mut rng = Stream::new(seed, stream);
    Ok((0..m)
        .map(|_| {
            let x = rng.inclusive(u64::from(width - w)) as u32;
            let y = rng.inclusive(u64::from(height - h)) as u32;
            CropRect::new(x, y, w, h)
        })
        .collect())
}

/// Crops sampled at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleViews {
    pub scale: f64,
    pub crops: Vec<CropRect>,
}

/// The multi-scale decomposition of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub per_scale: Vec<ScaleViews>,
}

impl ViewSet {
    pub fn local(&self) -> &[ScaleViews] {
        &self.per_scale[..self.per_scale.len() - 1]
    }

    pub fn global(&self) -> &ScaleViews {
        &self.per_scale[self.per_scale.len() - 1]
    }
}

/// Decomposes one image into `m` crops per local scale plus the full image.
///
/// The image seed is `FNV-1a(image_id) XOR global_seed` and scale `i` draws
/// from stream `i`, so the result does not depend on evaluation order.
pub fn decompose(
    image_id: &str,
    width: u32,
    height: u32,
    scale_set: &ScaleSet,
    m: usize,
    global_seed: u64,
) -> Result<ViewSet> {
    let seed = rng::image_seed(global_seed, image_id);
    let mut per_scale = Vec::with_capacity(scale_set.n());
    for (i, &scale) in scale_set.local_scales().iter().enumerate() {
        let crops = sample_crops_stream(width, height, scale, m, seed, i as u64)?;
        per_scale.push(ScaleViews { scale, crops });
    }
    if width < 2 || height < 2 {
        return Err(VcrError::invalid(format!(
            "image `{image_id}` must be at least 2x2, got {width}x{height}"
        )));
    }
    per_scale.push(ScaleViews {
        scale: scale_set.global_scale(),
        crops: vec![CropRect::full(width, height)],
    });
    Ok(ViewSet {
        image_id: image_id.to_string(),
        width,
        height,
        per_scale,
    })
}

/// Side fraction of the classical ten-crop protocol (224 out of 256).
pub const TEN_CROP_FRACTION: f64 = 224.0 / 256.0;

/// The five ten-crop rectangles: four corners then center. Each is also
/// evaluated horizontally flipped, giving ten views.
pub fn ten_crop_rects(width: u32, height: u32) -> Vec<CropRect> {
    let w = round_half_up(f64::from(width) * TEN_CROP_FRACTION).clamp(1, width);
    let h = round_half_up(f64::from(height) * TEN_CROP_FRACTION).clamp(1, height);
    let (dx, dy) = (width - w, height - h);
    vec![
        CropRect::new(0, 0, w, h),
        CropRect::new(dx, 0, w, h),
        CropRect::new(0, dy, w, h),
        CropRect::new(dx, dy, w, h),
        CropRect::new(dx / 2, dy / 2, w, h),
    ]
}

pub fn ten_crop_views(width: u32, height: u32) -> Vec<View> {
    let rects = ten_crop_rects(width, height);
    rects
        .iter()
        .map(|&r| View::Crop(r))
        .chain(rects.iter().map(|&r| View::FlippedCrop(r)))
        .collect()
}
