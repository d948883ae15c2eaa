//! HDR/LDR image containers and the radiometric transforms shared by the
//! rest of the crate: μ-law compression, exposure scaling, luminance and
//! working-range normalization.

mod pfm;
mod png16;

pub use pfm::{read_pfm, read_pfm_raw, write_pfm, write_pfm_raw, PfmImage};
pub use png16::{read_ldr_png, read_mask_png, write_ldr_png, write_mask_png};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Rec. 709 luminance weights for linear RGB.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Luminance percentile used as the robust maximum of the working range.
pub const ROBUST_MAX_QUANTILE: f64 = 0.999;

/// Linear-radiance RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl HdrImage {
    /// Builds an image, rejecting non-finite or negative values.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width * height * 3 != data.len() {
            return Err(Error::Shape(format!(
                "{width}x{height}x3 image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!(
                "HDR value at index {i} is {} (must be finite and >= 0)",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Builds an image from a per-pixel closure. Negative or non-finite
    /// values are clamped to zero.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for v in f(x, y) {
                    data.push(if v.is_finite() && v > 0.0 { v } else { 0.0 });
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Multiplies every value by `k` (`k >= 0`).
    pub fn scaled(&self, k: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v).max(0.0)).collect(),
        }
    }

    /// Planar (channel-major) copy: `[R..., G..., B...]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.pixel_count();
        let mut out = vec![0.0; n * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        out
    }

    /// Inverse of [`HdrImage::to_planar`]; negatives are clamped to zero.
    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<Self> {
        let n = width * height;
        if planar.len() != n * 3 {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for {width}x{height}x3",
                planar.len()
            )));
        }
        let mut data = vec![0.0; n * 3];
        for i in 0..n {
            for c in 0..3 {
                let v = planar[c * n + i];
                if !v.is_finite() {
                    return Err(Error::Contract(format!("non-finite value at planar index {}", c * n + i)));
                }
                data[i * 3 + c] = v.max(0.0);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Display-encoded image quantized to `bit_depth` bits, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    bit_depth: u8,
}

impl LdrImage {
    /// Quantizes arbitrary values: clip to `[0, 1]`, round to the nearest
    /// code `k / (2^b - 1)`.
    pub fn quantize(width: usize, height: usize, values: &[f32], bit_depth: u8) -> Result<Self> {
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::Config(format!("bit depth {bit_depth} outside 1..=16")));
        }
        if values.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for {width}x{height}x3 LDR image",
                values.len()
            )));
        }
        let levels = max_code(bit_depth) as f32;
        let data = values
            .iter()
            .map(|v| {
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                (v * levels).round() / levels
            })
            .collect();
        Ok(Self {
            width,
            height,
            data,
            bit_depth,
        })
    }

    /// Builds an LDR image from integer codes.
    pub fn from_codes(width: usize, height: usize, codes: &[u16], bit_depth: u8) -> Result<Self> {
        let levels = max_code(bit_depth);
        if let Some(i) = codes.iter().position(|&c| u32::from(c) > levels) {
            return Err(Error::Validation(format!(
                "code {} at index {i} exceeds {bit_depth}-bit range",
                codes[i]
            )));
        }
        let values: Vec<f32> = codes.iter().map(|&c| f32::from(c) / levels as f32).collect();
        Self::quantize(width, height, &values, bit_depth)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    /// Integer codes `k` with `value = k / (2^b - 1)`.
    pub fn codes(&self) -> Vec<u16> {
        let levels = max_code(self.bit_depth) as f32;
        self.data.iter().map(|v| (v * levels).round() as u16).collect()
    }

    /// Checks that every value is exactly a representable code.
    pub fn check_invariants(&self) -> Result<()> {
        let levels = max_code(self.bit_depth) as f32;
        for (i, v) in self.data.iter().enumerate() {
            if !(0.0..=1.0).contains(v) || ((v * levels).round() / levels) != *v {
                return Err(Error::Validation(format!("LDR value {v} at index {i} is not a {}-bit code", self.bit_depth)));
            }
        }
        Ok(())
    }
}

pub(crate) fn max_code(bit_depth: u8) -> u32 {
    (1u32 << bit_depth) - 1
}

/// μ-law compressor parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneMapParams {
    pub mu: f64,
}

impl Default for ToneMapParams {
    fn default() -> Self {
        Self { mu: 5000.0 }
    }
}

impl ToneMapParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be > 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Result of [`mu_law`]: the compressed value and whether the input had to
/// be clamped into `[0, 1]` first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuLaw {
    pub value: f64,
    pub clamped: bool,
}

/// `T(x) = ln(1 + μx) / ln(1 + μ)` on `[0, 1]`.
pub fn mu_law(x: f64, p: ToneMapParams) -> MuLaw {
    let clamped = !(0.0..=1.0).contains(&x);
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    MuLaw {
        value: (p.mu * x).ln_1p() / p.mu.ln_1p(),
        clamped,
    }
}

/// Inverse of [`mu_law`] on `[0, 1]`.
pub fn mu_law_inverse(y: f64, p: ToneMapParams) -> f64 {
    ((y.clamp(0.0, 1.0) * p.mu.ln_1p()).exp() - 1.0) / p.mu
}

/// Applies [`mu_law`] per value; returns the image and the clamp count.
pub fn mu_law_image(img: &HdrImage, p: ToneMapParams) -> (HdrImage, usize) {
    let mut clamped = 0;
    let data = img
        .data
        .iter()
        .map(|&v| {
            let t = mu_law(f64::from(v), p);
            clamped += usize::from(t.clamped);
            t.value as f32
        })
        .collect();
    (
        HdrImage {
            width: img.width,
            height: img.height,
            data,
        },
        clamped,
    )
}

/// Scales radiance by `2^ev`. No clipping.
pub fn apply_exposure(img: &HdrImage, ev: f64) -> HdrImage {
    img.scaled(ev.exp2() as f32)
}

/// Single-channel luminance map.
#[derive(Debug, Clone, PartialEq)]
pub struct Luminance {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Luminance {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Rec. 709 luminance per pixel.
pub fn luminance(img: &HdrImage) -> Luminance {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            LUMA_WEIGHTS[0] * f64::from(p[0]) + LUMA_WEIGHTS[1] * f64::from(p[1]) + LUMA_WEIGHTS[2] * f64::from(p[2])
        })
        .collect();
    Luminance {
        width: img.width,
        height: img.height,
        data,
    }
}

/// 99.9th luminance percentile across a set of frames.
pub fn robust_max(frames: &[HdrImage]) -> f64 {
    let mut all: Vec<f64> = frames.iter().flat_map(|f| luminance(f).data).collect();
    if all.is_empty() {
        return 0.0;
    }
    all.sort_by(f64::total_cmp);
    stats::quantile_sorted(&all, ROBUST_MAX_QUANTILE)
}

/// Divides by `scale` and clips into the `[0, 1]` working range.
pub fn to_working_range(img: &HdrImage, scale: f64) -> HdrImage {
    if scale <= 0.0 {
        return img.clone();
    }
    let k = (1.0 / scale) as f32;
    img.map(|v| (v * k).min(1.0))
}

/// Normalizes a whole sequence by its shared robust maximum. Returns the
/// normalized frames and the scale that was divided out.
pub fn normalize_frames(frames: &[HdrImage]) -> (Vec<HdrImage>, f64) {
    let scale = robust_max(frames);
    (frames.iter().map(|f| to_working_range(f, scale)).collect(), scale)
}

/// Horizontal mirror (left-right).
pub fn flip_h(img: &HdrImage) -> HdrImage {
    let (w, h) = (img.width, img.height);
    HdrImage::from_fn(w, h, |x, y| img.pixel(w - 1 - x, y))
}

/// Vertical mirror (top-bottom).
pub fn flip_v(img: &HdrImage) -> HdrImage {
    let (w, h) = (img.width, img.height);
    HdrImage::from_fn(w, h, |x, y| img.pixel(x, h - 1 - y))
}
