//! Random scene specs for the two procedural domains used in the
//! adaptation experiments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Background, Pattern, SceneSpec, ShakeSpec, SpriteShape, SpriteSpec, TextureSpec, Trajectory};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightingPreset {
    Daylight,
    Twilight,
    Night,
}

impl LightingPreset {
    pub fn scale(self) -> f64 {
        match self {
            LightingPreset::Daylight => 1.0,
            LightingPreset::Twilight => 0.2,
            LightingPreset::Night => 0.03,
        }
    }
}

/// Scene family. `Synthetic` plays the clean source domain, `Shifted` a
/// target domain with warm illumination, heavier texture and faster motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainStyle {
    #[serde(rename = "A")]
    Synthetic,
    #[serde(rename = "B")]
    Shifted,
}

impl DomainStyle {
    pub fn tag(self) -> &'static str {
        match self {
            DomainStyle::Synthetic => "A",
            DomainStyle::Shifted => "B",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "A" => Some(DomainStyle::Synthetic),
            "B" => Some(DomainStyle::Shifted),
            _ => None,
        }
    }

    /// Draws a random scene. Camera shake is enabled for 30% of scenes.
    pub fn sample_scene(self, width: usize, height: usize, num_frames: usize, seed: u64) -> SceneSpec {
        let mut rng = substream(seed, "scene-sampler", 0);
        let shifted = self == DomainStyle::Shifted;
        let background = match rng.random_range(0..3) {
            0 => Background::GradientSky,
            1 => Background::SunDisk,
            _ => Background::NightLights,
        };
        let lighting = match background {
            Background::NightLights => LightingPreset::Night,
            _ if rng.random_bool(0.3) => LightingPreset::Twilight,
            _ => LightingPreset::Daylight,
        };
        let (w, h) = (width as f64, height as f64);
        let dim = w.min(h);
        let max_speed = if shifted { 3.0 } else { 2.0 };
        let n_sprites = rng.random_range(1..=3);
        let sprites = (0..n_sprites)
            .map(|_| {
                let shape = if rng.random_bool(0.5) {
                    SpriteShape::Disk
                } else {
                    SpriteShape::Rect
                };
                let size = [dim * rng.random_range(0.12..0.35), dim * rng.random_range(0.12..0.35)];
                let level = if rng.random_bool(0.2) {
                    rng.random_range(4.0..20.0)
                } else {
                    rng.random_range(0.05..1.2)
                };
                let radiance = [0; 3].map(|_| level * rng.random_range(0.3..1.0));
                let trajectory = if rng.random_bool(0.4) {
                    Trajectory::Oscillating {
                        amplitude: [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)],
                        period: rng.random_range(6.0..16.0),
                    }
                } else {
                    Trajectory::Linear
                };
                let pattern = match rng.random_range(0..if shifted { 4 } else { 3 }) {
                    0 => Pattern::Solid,
                    1 => Pattern::Stripes {
                        period: rng.random_range(2.0..6.0),
                        contrast: rng.random_range(0.2..0.6),
                    },
                    _ => Pattern::Checker {
                        cell: rng.random_range(1.5..5.0),
                        contrast: rng.random_range(0.2..0.7),
                    },
                };
                SpriteSpec {
                    shape,
                    size,
                    radiance,
                    start: [rng.random_range(0.15..0.85) * w, rng.random_range(0.25..0.9) * h],
                    velocity: [
                        rng.random_range(-max_speed..max_speed),
                        rng.random_range(-max_speed..max_speed) * 0.5,
                    ],
                    trajectory,
                    pattern,
                }
            })
            .collect();
        let shake = rng.random_bool(0.3).then(ShakeSpec::default);
        let (tint, texture) = if shifted {
            (
                [1.15, 1.0, 0.75],
                TextureSpec {
                    strength: 0.6,
                    frequency: 0.18,
                    octaves: 4,
                },
            )
        } else {
            ([1.0, 1.0, 1.0], TextureSpec::default())
        };
        SceneSpec {
            width,
            height,
            num_frames,
            background,
            sprites,
            lighting_scale: lighting.scale(),
            tint,
            texture,
            shake,
            seed,
        }
    }
}
