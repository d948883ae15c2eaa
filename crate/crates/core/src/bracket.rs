//! Multi-exposure LDR brackets synthesized from linear HDR sequences, and
//! the inverse mapping back to linear radiance used as network input.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{apply_exposure, normalize_frames, read_ldr_png, read_pfm, write_ldr_png, write_pfm, HdrImage, LdrImage};
use crate::rng::substream;
use crate::scene::SceneSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BracketConfig {
    /// Candidate EV triples; one is drawn uniformly per bracket.
    pub ev_sets: Vec<[f64; 3]>,
    /// Camera response exponent used to encode the LDR frames.
    pub crf_gamma: f64,
    /// Exponent assumed when linearizing. Defaults to `crf_gamma`; setting
    /// it differently models a miscalibrated camera response.
    #[serde(default)]
    pub linearize_gamma: Option<f64>,
    pub bit_depth: u8,
    /// Noise σ range for the short exposure.
    pub sigma_low: [f64; 2],
    /// Noise σ range for the middle exposure.
    pub sigma_mid: [f64; 2],
    /// Frames between consecutive exposures.
    pub frame_stride: usize,
    pub seed: u64,
}

impl Default for BracketConfig {
    fn default() -> Self {
        Self {
            ev_sets: vec![[-2.0, 0.0, 2.0], [-3.0, 0.0, 3.0]],
            crf_gamma: 2.2,
            linearize_gamma: None,
            bit_depth: 16,
            sigma_low: [1e-4, 1e-3],
            sigma_mid: [1e-5, 1e-4],
            frame_stride: 1,
            seed: 0,
        }
    }
}

impl BracketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ev_sets.is_empty() {
            return Err(Error::Config("ev_sets is empty".into()));
        }
        for ev in &self.ev_sets {
            if !(ev.iter().all(|e| e.is_finite()) && ev[0] < ev[1] && ev[1] < ev[2]) {
                return Err(Error::Config(format!("ev offsets {ev:?} must be strictly increasing")));
            }
        }
        let gamma_ok = |g: f64| g.is_finite() && g > 0.0;
        if !gamma_ok(self.crf_gamma) || !self.linearize_gamma.is_none_or(gamma_ok) {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        for (name, r) in [("sigma_low", self.sigma_low), ("sigma_mid", self.sigma_mid)] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::Config(format!("{name} {r:?} must satisfy 0 <= lo <= hi")));
            }
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::Config(format!("bit depth {} outside 1..=16", self.bit_depth)));
        }
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_linearize_gamma(&self) -> f64 {
        self.linearize_gamma.unwrap_or(self.crf_gamma)
    }
}

/// Short, middle and long exposures (in that order) with their linearized
/// companions and the clean ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrBracket {
    pub ldr: [LdrImage; 3],
    pub linearized: [HdrImage; 3],
    pub gt: HdrImage,
    pub ev_offsets: [f64; 3],
    /// Noise σ actually drawn for each exposure.
    pub sigmas: [f64; 3],
    /// Gamma used for linearization.
    pub gamma: f64,
    pub frame_indices: [usize; 3],
    pub config: BracketConfig,
}

impl LdrBracket {
    pub fn short(&self) -> &LdrImage {
        &self.ldr[0]
    }

    pub fn mid(&self) -> &LdrImage {
        &self.ldr[1]
    }

    pub fn long(&self) -> &LdrImage {
        &self.ldr[2]
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    /// Rebuilds the linearized companions from the LDR frames.
    pub fn relinearize(&mut self) {
        for i in 0..3 {
            self.linearized[i] = ldr_to_linear(&self.ldr[i], self.ev_offsets[i], self.gamma);
        }
    }
}

/// Inverse response: `img^gamma / 2^ev`.
pub fn ldr_to_linear(img: &LdrImage, ev: f64, gamma: f64) -> HdrImage {
    let k = (-ev).exp2();
    let data = img.data().iter().map(|&v| (f64::from(v).powf(gamma) * k) as f32).collect();
    HdrImage::new(img.width(), img.height(), data).expect("powers of values in [0, 1] are finite and nonnegative")
}

/// Adds i.i.d. `N(0, σ²)` per value, clips to `[0, 1]` and requantizes.
pub fn add_gaussian_noise(img: &LdrImage, sigma: f64, seed: u64) -> LdrImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = substream(seed, "gaussian-noise", 0);
    add_noise_with(img, sigma, &mut rng)
}

fn add_noise_with(img: &LdrImage, sigma: f64, rng: &mut impl Rng) -> LdrImage {
    let values: Vec<f32> = img
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            (f64::from(v) + sigma * n) as f32
        })
        .collect();
    LdrImage::quantize(img.width(), img.height(), &values, img.bit_depth()).expect("same shape and depth")
}

fn draw_sigma(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Frame indices (short, mid, long) centered on the reference frame and
/// shifted inward when the stride would leave the sequence.
pub fn exposure_frames(num_frames: usize, reference: usize, stride: usize) -> Result<[usize; 3]> {
    if num_frames < 3 {
        return Err(Error::Input(format!("sequence has {num_frames} frames, need >= 3")));
    }
    let stride = stride.min((num_frames - 1) / 2).max(1);
    let mid = reference.clamp(stride, num_frames - 1 - stride);
    Ok([mid - stride, mid, mid + stride])
}

/// Builds a bracket from a sequence whose frames are already in the
/// `[0, 1]` working range.
pub fn synth_bracket(seq: &SceneSequence, cfg: &BracketConfig) -> Result<LdrBracket> {
    cfg.validate()?;
    let idx = exposure_frames(seq.frames.len(), seq.reference_index, cfg.frame_stride)?;
    for &i in &idx {
        let max = seq.frames[i].max_value();
        if max > 1.0 {
            return Err(Error::Validation(format!(
                "frame {i} has value {max} outside the [0, 1] working range"
            )));
        }
    }
    let mut draw = substream(cfg.seed, "bracket-draw", 0);
    let ev_offsets = cfg.ev_sets[draw.random_range(0..cfg.ev_sets.len())];
    let sigmas = [draw_sigma(cfg.sigma_low, &mut draw), draw_sigma(cfg.sigma_mid, &mut draw), 0.0];
    let gamma = cfg.effective_linearize_gamma();
    let inv_crf = 1.0 / cfg.crf_gamma;

    let mut ldr = Vec::with_capacity(3);
    for k in 0..3 {
        let frame = &seq.frames[idx[k]];
        let exposed = apply_exposure(frame, ev_offsets[k]);
        let encoded: Vec<f32> = exposed
            .data()
            .iter()
            .map(|&v| f64::from(v.min(1.0)).powf(inv_crf) as f32)
            .collect();
        let mut rng = substream(cfg.seed, "bracket-noise", idx[k] as u64);
        let values: Vec<f32> = if sigmas[k] > 0.0 {
            encoded
                .iter()
                .map(|&v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (f64::from(v) + sigmas[k] * n) as f32
                })
                .collect()
        } else {
            encoded
        };
        ldr.push(LdrImage::quantize(frame.width(), frame.height(), &values, cfg.bit_depth)?);
    }
    let ldr: [LdrImage; 3] = ldr.try_into().expect("three exposures");
    let linearized = [0, 1, 2].map(|k| ldr_to_linear(&ldr[k], ev_offsets[k], gamma));
    Ok(LdrBracket {
        ldr,
        linearized,
        gt: seq.frames[idx[1]].clone(),
        ev_offsets,
        sigmas,
        gamma,
        frame_indices: idx,
        config: cfg.clone(),
    })
}

/// Normalizes the sequence by its robust maximum, then synthesizes.
pub fn bracket_from_raw(seq: &SceneSequence, cfg: &BracketConfig) -> Result<LdrBracket> {
    let (frames, _) = normalize_frames(&seq.frames);
    let normalized = SceneSequence {
        frames,
        flow: Vec::new(),
        occlusion: Vec::new(),
        reference_index: seq.reference_index,
        spec: seq.spec.clone(),
    };
    synth_bracket(&normalized, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BracketMeta {
    ev_offsets: [f64; 3],
    gamma: f64,
    sigmas: [f64; 3],
    frame_indices: [usize; 3],
    config: BracketConfig,
}

const EXPOSURE_FILES: [&str; 3] = ["short.png", "mid.png", "long.png"];

/// Writes `short.png`, `mid.png`, `long.png`, `gt.pfm` and `meta.json`.
pub fn export_bracket(b: &LdrBracket, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (img, name) in b.ldr.iter().zip(EXPOSURE_FILES) {
        write_ldr_png(img, dir.join(name))?;
    }
    write_pfm(&b.gt, dir.join("gt.pfm"))?;
    let meta = BracketMeta {
        ev_offsets: b.ev_offsets,
        gamma: b.gamma,
        sigmas: b.sigmas,
        frame_indices: b.frame_indices,
        config: b.config.clone(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn import_bracket(dir: impl AsRef<Path>) -> Result<LdrBracket> {
    let dir = dir.as_ref();
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: BracketMeta = serde_json::from_str(&text)?;
    let ldr = EXPOSURE_FILES
        .iter()
        .map(|name| read_ldr_png(dir.join(name), meta.config.bit_depth))
        .collect::<Result<Vec<_>>>()?;
    let ldr: [LdrImage; 3] = ldr.try_into().expect("three exposures");
    let gt = read_pfm(dir.join("gt.pfm"))?;
    if ldr.iter().any(|l| l.width() != gt.width() || l.height() != gt.height()) {
        return Err(Error::Shape(format!("{}: exposures and gt differ in size", dir.display())));
    }
    let linearized = [0, 1, 2].map(|k| ldr_to_linear(&ldr[k], meta.ev_offsets[k], meta.gamma));
    Ok(LdrBracket {
        ldr,
        linearized,
        gt,
        ev_offsets: meta.ev_offsets,
        sigmas: meta.sigmas,
        gamma: meta.gamma,
        frame_indices: meta.frame_indices,
        config: meta.config,
    })
}
