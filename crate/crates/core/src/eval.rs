//! PSNR and SSIM in linear and μ-law domains.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bracket::BracketConfig;
use crate::error::{Error, Result};
use crate::image::{mu_law, read_pfm, robust_max, to_working_range, HdrImage, ToneMapParams};
use crate::model::load_brackets;
use crate::scene::DatasetManifest;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Linear,
    Mu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub tone: ToneMapParams,
    /// Replaces the μ-law compressor by the identity (test hook).
    #[serde(default)]
    pub identity_tonemap: bool,
    /// Divide prediction and ground truth by the ground truth's robust max.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tone: ToneMapParams::default(),
            identity_tonemap: false,
            normalize: true,
        }
    }
}

fn check_shapes(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn to_domain(img: &HdrImage, domain: Domain, cfg: &EvalConfig) -> Vec<f64> {
    match domain {
        Domain::Mu if !cfg.identity_tonemap => {
            img.data().iter().map(|&v| mu_law(f64::from(v), cfg.tone).value).collect()
        }
        _ => img.data().iter().map(|&v| f64::from(v)).collect(),
    }
}

/// `10 log10(1 / MSE)`; identical inputs give `+inf`.
pub fn psnr(pred: &HdrImage, gt: &HdrImage, domain: Domain, cfg: &EvalConfig) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (a, b) = (to_domain(pred, domain, cfg), to_domain(gt, domain, cfg));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of one plane over all fully contained windows.
pub fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ow, oh) = (width + 1 - SSIM_WINDOW, height + 1 - SSIM_WINDOW);
    let mut total = 0.0;
    for y0 in 0..oh {
        for x0 in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, gy) in g.iter().enumerate() {
                for (i, gx) in g.iter().enumerate() {
                    let w = gy * gx;
                    let k = (y0 + j) * width + x0 + i;
                    ma += w * a[k];
                    mb += w * b[k];
                    saa += w * a[k] * a[k];
                    sbb += w * b[k] * b[k];
                    sab += w * a[k] * b[k];
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (ow * oh) as f64
}

/// Gaussian-window SSIM per channel, averaged over channels.
pub fn ssim(pred: &HdrImage, gt: &HdrImage, domain: Domain, cfg: &EvalConfig) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (w, h) = (gt.width(), gt.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if pred == gt {
        return Ok(1.0);
    }
    let (a, b) = (to_domain(pred, domain, cfg), to_domain(gt, domain, cfg));
    let plane = |v: &[f64], c: usize| -> Vec<f64> { v.iter().skip(c).step_by(3).copied().collect() };
    let s: f64 = (0..3).map(|c| ssim_plane(&plane(&a, c), &plane(&b, c), w, h)).sum();
    Ok(s / 3.0)
}

mod float_or_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad float {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub name: String,
    #[serde(with = "float_or_inf")]
    pub psnr_mu: f64,
    #[serde(with = "float_or_inf")]
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "float_or_inf")]
    pub psnr_mu: f64,
    #[serde(with = "float_or_inf")]
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
    pub per_sample: Vec<SampleScores>,
}

/// Divides both images by the ground truth's robust max and clips them to
/// `[0, 1]`, unless normalization is off.
pub fn normalized_pair(pred: &HdrImage, gt: &HdrImage, cfg: &EvalConfig) -> Result<(HdrImage, HdrImage)> {
    check_shapes(pred, gt)?;
    if !cfg.normalize {
        return Ok((pred.clone(), gt.clone()));
    }
    let s = robust_max(std::slice::from_ref(gt));
    Ok((to_working_range(pred, s), to_working_range(gt, s)))
}

/// PSNR after [`normalized_pair`].
pub fn psnr_normalized(pred: &HdrImage, gt: &HdrImage, domain: Domain, cfg: &EvalConfig) -> Result<f64> {
    let (p, g) = normalized_pair(pred, gt, cfg)?;
    psnr(&p, &g, domain, cfg)
}

/// Scores one prediction against its ground truth. Both are divided by the
/// ground truth's robust max (when enabled) and clipped to `[0, 1]`.
pub fn score_pair(name: &str, pred: &HdrImage, gt: &HdrImage, cfg: &EvalConfig) -> Result<SampleScores> {
    let (p, g) = normalized_pair(pred, gt, cfg)?;
    Ok(SampleScores {
        name: name.to_string(),
        psnr_mu: psnr(&p, &g, Domain::Mu, cfg)?,
        psnr_l: psnr(&p, &g, Domain::Linear, cfg)?,
        ssim_mu: ssim(&p, &g, Domain::Mu, cfg)?,
        ssim_l: ssim(&p, &g, Domain::Linear, cfg)?,
    })
}

impl EvalReport {
    pub fn from_scores(per_sample: Vec<SampleScores>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Input("nothing to evaluate".into()));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleScores) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr_mu: mean(|s| s.psnr_mu),
            psnr_l: mean(|s| s.psnr_l),
            ssim_mu: mean(|s| s.ssim_mu),
            ssim_l: mean(|s| s.ssim_l),
            per_sample,
        })
    }

    /// Scores `(name, prediction, ground truth)` triples in parallel.
    pub fn from_pairs(pairs: &[(String, HdrImage, HdrImage)], cfg: &EvalConfig) -> Result<Self> {
        let scores = pairs
            .par_iter()
            .map(|(n, p, g)| score_pair(n, p, g, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(scores)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,PSNR-mu,PSNR-l,SSIM-mu,SSIM-l\n");
        let row = |name: &str, a: f64, b: f64, c: f64, d: f64| format!("{name},{a:.4},{b:.4},{c:.6},{d:.6}\n");
        for s in &self.per_sample {
            out += &row(&s.name, s.psnr_mu, s.psnr_l, s.ssim_mu, s.ssim_l);
        }
        out += &row("mean", self.psnr_mu, self.psnr_l, self.ssim_mu, self.ssim_l);
        out
    }

    /// Writes `eval.json` and `eval.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("eval.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("eval.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// File name of the prediction for the `index`-th manifest entry.
pub fn prediction_name(index: usize) -> String {
    format!("pred_{index:03}.pfm")
}

/// Scores `pred_dir/pred_NNN.pfm` against the ground truth of each manifest
/// entry.
pub fn evaluate(
    pred_dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    bracket: &BracketConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let brackets = load_brackets(manifest, bracket)?;
    let pairs = brackets
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let pred = read_pfm(pred_dir.as_ref().join(prediction_name(i)))?;
            Ok((manifest.entries[i].path.clone(), pred, b.gt))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(&pairs, cfg)
}
