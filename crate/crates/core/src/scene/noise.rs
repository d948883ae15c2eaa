//! Gradient (Perlin) noise in one and two dimensions, fractal sums of it,
//! and the camera-shake trajectories built on top.
//!
//! Gradients are hashed from `(seed, lattice index)`, so the lattice is
//! unbounded and evaluation needs no permutation table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, splitmix64};

/// Upper bound of `|d/dx|` for [`perlin1`]: the raw 1-D noise slope is at
/// most `1 + max fade'(t) = 1 + 30/16`, doubled by the normalization.
pub const PERLIN1_SLOPE_BOUND: f64 = 2.0 * (1.0 + 30.0 / 16.0);

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn grad1(seed: u64, i: i64) -> f64 {
    2.0 * unit_from_hash(splitmix64(seed ^ splitmix64(i as u64))) - 1.0
}

fn grad2(seed: u64, i: i64, j: i64) -> (f64, f64) {
    let h = splitmix64(seed ^ splitmix64((i as u64).wrapping_mul(0x9E37_79B9) ^ splitmix64(j as u64)));
    let angle = unit_from_hash(h) * std::f64::consts::TAU;
    (angle.cos(), angle.sin())
}

/// 1-D Perlin noise scaled to `[-1, 1]`. Zero at integer lattice points.
pub fn perlin1(seed: u64, x: f64) -> f64 {
    let i = x.floor();
    let f = x - i;
    let i = i as i64;
    let a = grad1(seed, i) * f;
    let b = grad1(seed, i + 1) * (f - 1.0);
    2.0 * (a + fade(f) * (b - a))
}

/// 2-D Perlin noise scaled to `[-1, 1]`.
pub fn perlin2(seed: u64, x: f64, y: f64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (x - xi, y - yi);
    let (xi, yi) = (xi as i64, yi as i64);
    let dot = |i: i64, j: i64, dx: f64, dy: f64| {
        let (gx, gy) = grad2(seed, i, j);
        gx * dx + gy * dy
    };
    let n00 = dot(xi, yi, fx, fy);
    let n10 = dot(xi + 1, yi, fx - 1.0, fy);
    let n01 = dot(xi, yi + 1, fx, fy - 1.0);
    let n11 = dot(xi + 1, yi + 1, fx - 1.0, fy - 1.0);
    let (u, v) = (fade(fx), fade(fy));
    let top = n00 + u * (n10 - n00);
    let bottom = n01 + u * (n11 - n01);
    (std::f64::consts::SQRT_2 * (top + v * (bottom - top))).clamp(-1.0, 1.0)
}

/// Fractal sum of [`perlin1`] octaves (persistence 1/2, lacunarity 2),
/// normalized by the weight total so the result stays in `[-1, 1]`.
pub fn fbm1(seed: u64, x: f64, octaves: u32) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for k in 0..octaves.max(1) {
        sum += amp * perlin1(derive_seed(seed, "octave", u64::from(k)), x * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

pub fn fbm2(seed: u64, x: f64, y: f64, octaves: u32) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for k in 0..octaves.max(1) {
        sum += amp * perlin2(derive_seed(seed, "octave", u64::from(k)), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// Camera jitter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShakeSpec {
    /// Maximum translation per axis, pixels.
    pub amplitude_px: f64,
    /// Maximum rotation, degrees.
    pub amplitude_rot: f64,
    /// Base noise frequency in lattice cells per frame.
    pub frequency: f64,
    pub octaves: u32,
}

impl Default for ShakeSpec {
    fn default() -> Self {
        Self {
            amplitude_px: 3.0,
            amplitude_rot: 0.5,
            frequency: 0.15,
            octaves: 2,
        }
    }
}

impl ShakeSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude_px >= 0.0
            && self.amplitude_rot >= 0.0
            && self.frequency.is_finite()
            && self.frequency >= 0.0
            && self.octaves >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shake spec {self:?}")))
        }
    }
}

/// Camera offset for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShakeSample {
    pub dx: f64,
    pub dy: f64,
    /// Degrees.
    pub dtheta: f64,
}

/// Per-frame camera jitter: three independent fractal-noise channels
/// (x, y, rotation), each with its own random phase.
pub fn perlin_shake(spec: &ShakeSpec, num_frames: usize, seed: u64) -> Vec<ShakeSample> {
    let channel = |label: &str, amp: f64, t: f64| {
        if amp == 0.0 {
            return 0.0;
        }
        let s = derive_seed(seed, label, 0);
        let phase = 1000.0 * unit_from_hash(derive_seed(seed, label, 1));
        amp * fbm1(s, phase + t * spec.frequency, spec.octaves)
    };
    (0..num_frames)
        .map(|t| {
            let t = t as f64;
            ShakeSample {
                dx: channel("shake-x", spec.amplitude_px, t),
                dy: channel("shake-y", spec.amplitude_px, t),
                dtheta: channel("shake-rot", spec.amplitude_rot, t),
            }
        })
        .collect()
}
