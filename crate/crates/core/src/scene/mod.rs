//! Procedural dynamic HDR sequences with exact optical flow and occlusion
//! masks.
//!
//! Everything in a scene is an analytic function of world coordinates:
//! backgrounds, textured sprites and a camera that may jitter. Each frame is
//! rendered by mapping 2x2 sub-pixel samples through the camera transform,
//! so flow and occlusion follow directly from the trajectories instead of
//! being estimated from pixels.

mod io;
mod noise;
mod sampler;

pub use io::{export_sequence, import_sequence, read_reference_frame, DatasetManifest, ManifestEntry};
pub use noise::{fbm1, fbm2, perlin1, perlin2, perlin_shake, ShakeSample, ShakeSpec, PERLIN1_SLOPE_BOUND};
pub use sampler::{DomainStyle, LightingPreset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::HdrImage;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    GradientSky,
    SunDisk,
    NightLights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpriteShape {
    Disk,
    Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Trajectory {
    /// Constant velocity.
    Linear,
    /// Constant velocity plus a sinusoidal sway.
    Oscillating { amplitude: [f64; 2], period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Pattern {
    Solid,
    Stripes { period: f64, contrast: f64 },
    Checker { cell: f64, contrast: f64 },
}

/// A moving object. Sprites later in the list are drawn on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub shape: SpriteShape,
    /// Width and height in pixels (a disk uses `size[0]` as diameter).
    pub size: [f64; 2],
    /// Linear RGB radiance before the scene lighting scale.
    pub radiance: [f64; 3],
    /// Center position at frame 0, pixels.
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub trajectory: Trajectory,
    pub pattern: Pattern,
}

/// Background texture: fractal noise modulating background radiance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub strength: f64,
    /// Noise cells per pixel.
    pub frequency: f64,
    pub octaves: u32,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            strength: 0.3,
            frequency: 0.08,
            octaves: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub background: Background,
    #[serde(default)]
    pub sprites: Vec<SpriteSpec>,
    /// Global radiance multiplier (daylight / twilight / night).
    pub lighting_scale: f64,
    /// Per-channel illuminant color.
    #[serde(default = "unit_tint")]
    pub tint: [f64; 3],
    #[serde(default)]
    pub texture: TextureSpec,
    #[serde(default)]
    pub shake: Option<ShakeSpec>,
    pub seed: u64,
}

fn unit_tint() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl SceneSpec {
    /// Static scene with no sprites and no shake.
    pub fn still(width: usize, height: usize, num_frames: usize, background: Background, seed: u64) -> Self {
        Self {
            width,
            height,
            num_frames,
            background,
            sprites: Vec::new(),
            lighting_scale: 1.0,
            tint: unit_tint(),
            texture: TextureSpec::default(),
            shake: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::Config(format!("resolution {}x{} below 4x4", self.width, self.height)));
        }
        if self.num_frames < 3 {
            return Err(Error::Config(format!("num_frames {} < 3", self.num_frames)));
        }
        if !(self.lighting_scale.is_finite() && self.lighting_scale > 0.0) {
            return Err(Error::Config(format!("lighting_scale {} must be > 0", self.lighting_scale)));
        }
        if self.tint.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config(format!("tint {:?} must be >= 0", self.tint)));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if s.radiance.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(Error::Config(format!("sprite {i} radiance {:?} must be >= 0", s.radiance)));
            }
            let (w, h) = match s.shape {
                SpriteShape::Disk => (s.size[0], s.size[0]),
                SpriteShape::Rect => (s.size[0], s.size[1]),
            };
            if !(w > 0.0 && h > 0.0) || w > self.width as f64 || h > self.height as f64 {
                return Err(Error::Config(format!(
                    "sprite {i} of size {w}x{h} does not fit a {}x{} frame",
                    self.width, self.height
                )));
            }
        }
        if let Some(shake) = &self.shake {
            shake.validate()?;
        }
        Ok(())
    }
}

/// Dense per-pixel displacement from frame `t` to frame `t + 1`, pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    /// Interleaved `(dx, dy)`.
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }
}

/// Non-occlusion mask: 1 where the pixel is visible in both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<HdrImage>,
    /// `flow[t]` maps frame `t` onto frame `t + 1`.
    pub flow: Vec<FlowField>,
    pub occlusion: Vec<Mask>,
    /// Frame whose clean radiance is the ground truth.
    pub reference_index: usize,
    pub spec: SceneSpec,
}

const SUBSAMPLES: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Background,
    Sprite(usize),
}

#[derive(Clone, Copy)]
struct Camera {
    dx: f64,
    dy: f64,
    cos: f64,
    sin: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    fn new(s: ShakeSample, width: usize, height: usize) -> Self {
        let th = s.dtheta.to_radians();
        Self {
            dx: s.dx,
            dy: s.dy,
            cos: th.cos(),
            sin: th.sin(),
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    fn to_pixel(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (x, y) = (wx - self.cx, wy - self.cy);
        (
            self.cos * x - self.sin * y + self.cx + self.dx,
            self.sin * x + self.cos * y + self.cy + self.dy,
        )
    }

    fn to_world(&self, px: f64, py: f64) -> (f64, f64) {
        let (x, y) = (px - self.cx - self.dx, py - self.cy - self.dy);
        (
            self.cos * x + self.sin * y + self.cx,
            -self.sin * x + self.cos * y + self.cy,
        )
    }
}

struct Renderer<'a> {
    spec: &'a SceneSpec,
    cameras: Vec<Camera>,
    lights: Vec<(f64, f64, f64)>,
    texture_seed: u64,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        let shake = match &spec.shake {
            Some(s) => perlin_shake(s, spec.num_frames, derive_seed(spec.seed, "shake", 0)),
            None => vec![ShakeSample::default(); spec.num_frames],
        };
        let cameras = shake.iter().map(|s| Camera::new(*s, spec.width, spec.height)).collect();
        let (w, h) = (spec.width as f64, spec.height as f64);
        let lights = if spec.background == Background::NightLights {
            (0..6u64)
                .map(|k| {
                    let u = |i| (derive_seed(spec.seed, "night-light", 2 * k + i) >> 11) as f64 / (1u64 << 53) as f64;
                    (w * (0.1 + 0.8 * u(0)), h * (0.1 + 0.6 * u(1)), (0.03 * w.min(h)).max(1.5))
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            spec,
            cameras,
            lights,
            texture_seed: derive_seed(spec.seed, "texture", 0),
        }
    }

    fn sprite_center(&self, k: usize, t: f64) -> (f64, f64) {
        let s = &self.spec.sprites[k];
        let (mut x, mut y) = (s.start[0] + s.velocity[0] * t, s.start[1] + s.velocity[1] * t);
        if let Trajectory::Oscillating { amplitude, period } = s.trajectory {
            let phase = (std::f64::consts::TAU * t / period).sin();
            x += amplitude[0] * phase;
            y += amplitude[1] * phase;
        }
        (x, y)
    }

    fn sprite_local(&self, k: usize, t: usize, wx: f64, wy: f64) -> Option<(f64, f64)> {
        let s = &self.spec.sprites[k];
        let (cx, cy) = self.sprite_center(k, t as f64);
        let (lx, ly) = (wx - cx, wy - cy);
        let inside = match s.shape {
            SpriteShape::Disk => lx * lx + ly * ly <= 0.25 * s.size[0] * s.size[0],
            SpriteShape::Rect => lx.abs() <= 0.5 * s.size[0] && ly.abs() <= 0.5 * s.size[1],
        };
        inside.then_some((lx, ly))
    }

    fn layer_at(&self, t: usize, wx: f64, wy: f64) -> Layer {
        (0..self.spec.sprites.len())
            .rev()
            .find(|&k| self.sprite_local(k, t, wx, wy).is_some())
            .map_or(Layer::Background, Layer::Sprite)
    }

    fn background(&self, wx: f64, wy: f64) -> [f64; 3] {
        let spec = self.spec;
        let (w, h) = (spec.width as f64, spec.height as f64);
        let tex = spec.texture.strength
            * fbm2(
                self.texture_seed,
                wx * spec.texture.frequency,
                wy * spec.texture.frequency,
                spec.texture.octaves,
            );
        let v = wy / h;
        let horizon = 0.6;
        match spec.background {
            Background::GradientSky | Background::SunDisk => {
                let mut rgb = if v < horizon {
                    let s = (v.max(0.0) / horizon).powf(1.5);
                    let top = [0.35, 0.55, 1.0];
                    let bottom = [1.6, 1.45, 1.2];
                    let k = (1.0 + 0.3 * tex).max(0.05);
                    [0, 1, 2].map(|c| (top[c] + s * (bottom[c] - top[c])) * k)
                } else {
                    let k = (1.0 + tex).max(0.05);
                    [0.10 * k, 0.08 * k, 0.06 * k]
                };
                if spec.background == Background::SunDisk {
                    let (sx, sy) = (0.7 * w, 0.22 * h);
                    let r = (0.12 * w.min(h)).max(2.5);
                    let d2 = (wx - sx).powi(2) + (wy - sy).powi(2);
                    if d2 <= r * r {
                        rgb = [2500.0, 2325.0, 2000.0];
                    } else if v < horizon {
                        let glow = 3.0 * (-d2 / (2.0 * (3.0 * r).powi(2))).exp();
                        rgb = [rgb[0] + glow, rgb[1] + 0.9 * glow, rgb[2] + 0.7 * glow];
                    }
                }
                rgb
            }
            Background::NightLights => {
                let k = (1.0 + tex).max(0.05);
                let mut rgb = if v < horizon {
                    [0.02 * k, 0.02 * k, 0.035 * k]
                } else {
                    [0.012 * k, 0.01 * k, 0.008 * k]
                };
                for &(lx, ly, r) in &self.lights {
                    if (wx - lx).powi(2) + (wy - ly).powi(2) <= r * r {
                        rgb = [40.0, 30.0, 18.0];
                    }
                }
                rgb
            }
        }
    }

    fn sprite_radiance(&self, k: usize, lx: f64, ly: f64) -> [f64; 3] {
        let s = &self.spec.sprites[k];
        let m = match s.pattern {
            Pattern::Solid => 1.0,
            Pattern::Stripes { period, contrast } => {
                if (lx / period).rem_euclid(1.0) < 0.5 {
                    1.0 + contrast
                } else {
                    (1.0 - contrast).max(0.0)
                }
            }
            Pattern::Checker { cell, contrast } => {
                let parity = ((lx / cell).floor() + (ly / cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    1.0 + contrast
                } else {
                    (1.0 - contrast).max(0.0)
                }
            }
        };
        s.radiance.map(|r| r * m)
    }

    fn sample(&self, t: usize, wx: f64, wy: f64) -> ([f64; 3], Layer) {
        let layer = self.layer_at(t, wx, wy);
        let rgb = match layer {
            Layer::Background => self.background(wx, wy),
            Layer::Sprite(k) => {
                let (lx, ly) = self.sprite_local(k, t, wx, wy).expect("layer_at found sprite");
                self.sprite_radiance(k, lx, ly)
            }
        };
        (rgb, layer)
    }

    fn render(&self, t: usize) -> HdrImage {
        let spec = self.spec;
        let cam = self.cameras[t];
        let gain = spec.tint.map(|c| c * spec.lighting_scale);
        HdrImage::from_fn(spec.width, spec.height, |x, y| {
            let mut acc = [0.0f64; 3];
            for (ox, oy) in SUBSAMPLES {
                let (wx, wy) = cam.to_world(x as f64 + ox, y as f64 + oy);
                let (rgb, _) = self.sample(t, wx, wy);
                for c in 0..3 {
                    acc[c] += rgb[c];
                }
            }
            [0, 1, 2].map(|c| (acc[c] * 0.25 * gain[c]) as f32)
        })
    }

    /// World-space displacement of `layer` between `t` and `t + 1`.
    fn layer_motion(&self, layer: Layer, t: usize) -> (f64, f64) {
        match layer {
            Layer::Background => (0.0, 0.0),
            Layer::Sprite(k) => {
                let (x0, y0) = self.sprite_center(k, t as f64);
                let (x1, y1) = self.sprite_center(k, t as f64 + 1.0);
                (x1 - x0, y1 - y0)
            }
        }
    }

    fn flow_and_mask(&self, t: usize) -> (FlowField, Mask) {
        let spec = self.spec;
        let (w, h) = (spec.width, spec.height);
        let (cam0, cam1) = (self.cameras[t], self.cameras[t + 1]);
        let mut flow = Vec::with_capacity(w * h * 2);
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (qx, qy) = (x as f64 + 0.5, y as f64 + 0.5);
                let (wx, wy) = cam0.to_world(qx, qy);
                let layer = self.layer_at(t, wx, wy);
                let (mx, my) = self.layer_motion(layer, t);
                let (px, py) = cam1.to_pixel(wx + mx, wy + my);
                flow.push((px - qx) as f32);
                flow.push((py - qy) as f32);

                let visible = SUBSAMPLES.iter().all(|&(ox, oy)| {
                    let (sx, sy) = cam0.to_world(x as f64 + ox, y as f64 + oy);
                    if self.layer_at(t, sx, sy) != layer {
                        return false;
                    }
                    let (nx, ny) = (sx + mx, sy + my);
                    let (tx, ty) = cam1.to_pixel(nx, ny);
                    let in_frame = tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64;
                    in_frame && self.layer_at(t + 1, nx, ny) == layer
                });
                mask.push(u8::from(visible));
            }
        }
        (
            FlowField {
                width: w,
                height: h,
                data: flow,
            },
            Mask {
                width: w,
                height: h,
                data: mask,
            },
        )
    }
}

/// Renders a sequence. Deterministic in `spec` (including its seed).
pub fn generate_sequence(spec: &SceneSpec) -> Result<SceneSequence> {
    spec.validate()?;
    let renderer = Renderer::new(spec);
    let frames = (0..spec.num_frames).map(|t| renderer.render(t)).collect();
    let (flow, occlusion) = (0..spec.num_frames - 1).map(|t| renderer.flow_and_mask(t)).unzip();
    Ok(SceneSequence {
        frames,
        flow,
        occlusion,
        reference_index: spec.num_frames / 2,
        spec: spec.clone(),
    })
}
