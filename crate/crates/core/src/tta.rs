//! Single-pass test-time adaptation with a mean-teacher pair.
//!
//! Per sample: the teacher's spread over augmented inputs gives an
//! uncertainty `u`, the adapter scales are set to `(1 - u, 1 + u)`, the
//! student takes one step towards the teacher's pseudo-label, and the
//! teacher follows the student by an exponential moving average.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{is_adapter_param, is_alpha_param, set_alphas};
use crate::autodiff::{adam_step, flip, AdamConfig, AdamState, Graph, Tensor};
use crate::bracket::LdrBracket;
use crate::error::{Error, Result};
use crate::eval::{prediction_name, psnr_normalized, Domain, EvalConfig, EvalReport, SampleScores};
use crate::image::{write_pfm, HdrImage, ToneMapParams};
use crate::model::{bracket_input, stack, tensor_to_image, ForwardOptions, FusionNet};
use crate::rng::{derive_seed, substream};
use crate::stats::quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Stops applied to the linearized exposures, one augmentation each.
    pub exposure_offsets: Vec<f64>,
    pub flips: bool,
    /// Per-channel white-balance gain range.
    pub wb_gain_range: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            exposure_offsets: vec![-0.1, -0.5, 0.0, 0.5, 1.0],
            flips: true,
            wb_gain_range: [0.9, 1.1],
            noise_sigma: 1e-4,
            seed: 0,
        }
    }
}

/// One concrete input transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub exposure: f64,
    pub gains: [f64; 3],
    pub flip_h: bool,
    pub flip_v: bool,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.exposure_offsets.is_empty() || !self.exposure_offsets.contains(&0.0) {
            return Err(Error::Config("exposure_offsets must be nonempty and contain 0".into()));
        }
        if self.exposure_offsets.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("exposure offsets must be finite".into()));
        }
        let [lo, hi] = self.wb_gain_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("wb_gain_range {:?} must be positive and ordered", self.wb_gain_range)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// The `N` augmentations used for the `sample`-th stream element.
    pub fn draw(&self, sample: u64) -> Vec<Augmentation> {
        let mut rng = substream(self.seed, "tta-augment", sample);
        let [lo, hi] = self.wb_gain_range;
        self.exposure_offsets
            .iter()
            .enumerate()
            .map(|(k, &exposure)| {
                let mut gain = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let gains = [gain(), gain(), gain()];
                let (flip_h, flip_v) = if self.flips { (rng.random(), rng.random()) } else { (false, false) };
                Augmentation {
                    exposure,
                    gains,
                    flip_h,
                    flip_v,
                    noise_sigma: self.noise_sigma,
                    noise_seed: derive_seed(derive_seed(self.seed, "tta-noise", sample), "aug", k as u64),
                }
            })
            .collect()
    }
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            exposure: 0.0,
            gains: [1.0; 3],
            flip_h: false,
            flip_v: false,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Transforms a `[1, 18, H, W]` network input. Exposure, white balance
    /// and noise act on the linearized channels; the LDR channels are then
    /// re-encoded from them with the bracket's response curve.
    pub fn apply(&self, input: &Tensor, ev_offsets: [f64; 3], gamma: f64) -> Result<Tensor> {
        let (n, c, h, w) = input.dims4()?;
        if n != 1 || c != 18 {
            return Err(Error::Shape(format!("augmentation expects [1, 18, H, W], got {:?}", input.shape())));
        }
        let plane = h * w;
        let mut data = input.data().to_vec();
        let mut rng = substream(self.noise_seed, "noise", 0);
        let k = self.exposure.exp2();
        for (e, ev) in ev_offsets.iter().enumerate() {
            let back = ev.exp2();
            for ch in 0..3 {
                let gain = k * self.gains[ch];
                let lin = (6 * e + 3 + ch) * plane;
                let ldr = (6 * e + ch) * plane;
                for i in 0..plane {
                    let mut v = f64::from(data[lin + i]) * gain;
                    if self.noise_sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += self.noise_sigma * z;
                    }
                    data[lin + i] = v as f32;
                    data[ldr + i] = (v.max(0.0) * back).powf(1.0 / gamma).min(1.0) as f32;
                }
            }
        }
        let mut t = Tensor::new(input.shape(), data)?;
        if self.flip_h {
            t = flip(&t, true)?;
        }
        if self.flip_v {
            t = flip(&t, false)?;
        }
        Ok(t)
    }

    /// Maps an `[N, 3, H, W]` output back: re-flip, then divide by the
    /// exposure and white-balance gains. Noise has no inverse.
    pub fn invert(&self, output: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = output.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("{c}-channel output")));
        }
        let mut t = output.clone();
        if self.flip_v {
            t = flip(&t, false)?;
        }
        if self.flip_h {
            t = flip(&t, true)?;
        }
        let k = self.exposure.exp2();
        let plane = h * w;
        let data = t.data_mut();
        for b in 0..n {
            for ch in 0..3 {
                let g = k * self.gains[ch];
                for v in &mut data[(b * 3 + ch) * plane..(b * 3 + ch + 1) * plane] {
                    *v = (f64::from(*v) / g) as f32;
                }
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    /// Mean over pixels of the per-pixel variance across the augmented
    /// outputs, μ-law domain.
    pub raw_variance: f64,
    pub u: f64,
}

/// Mean per-element population variance of `N` equally long vectors.
pub fn stack_variance(outputs: &[Vec<f64>]) -> Result<f64> {
    let n = outputs.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 outputs for a variance, got {n}")));
    }
    let len = outputs[0].len();
    if outputs.iter().any(|o| o.len() != len) || len == 0 {
        return Err(Error::Shape("outputs differ in length".into()));
    }
    let mut total = 0.0;
    for i in 0..len {
        // Welford, so identical values give exactly zero
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, o) in outputs.iter().enumerate() {
            let d = o[i] - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (o[i] - mean);
        }
        total += m2 / n as f64;
    }
    Ok(total / len as f64)
}

/// `u = clamp(raw / c, 0, 1)`.
pub fn normalize_uncertainty(raw_variance: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("uncertainty scale {scale} must be > 0")));
    }
    Ok((raw_variance / scale).clamp(0.0, 1.0))
}

/// `(alpha_s, alpha_t) = (1 - u, 1 + u)`.
pub fn scales_from_uncertainty(u: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Contract(format!("uncertainty {u} outside [0, 1]")));
    }
    Ok((1.0 - u, 1.0 + u))
}

fn mu_values(t: &Tensor, tone: ToneMapParams) -> Vec<f64> {
    let d = tone.mu.ln_1p();
    t.data().iter().map(|&v| (tone.mu * f64::from(v.max(0.0))).ln_1p() / d).collect()
}

/// Runs `net` on every augmented copy of `input` and undoes each
/// augmentation on the corresponding output.
pub fn deaugmented_outputs(
    net: &FusionNet,
    input: &Tensor,
    augs: &[Augmentation],
    ev_offsets: [f64; 3],
    gamma: f64,
    opts: ForwardOptions,
) -> Result<Vec<Tensor>> {
    let batch = augs
        .iter()
        .map(|a| a.apply(input, ev_offsets, gamma))
        .collect::<Result<Vec<_>>>()?;
    let y = net.forward_tensor(&stack(&batch)?, opts)?;
    let (_, c, h, w) = y.dims4()?;
    let per = c * h * w;
    augs.iter()
        .enumerate()
        .map(|(i, a)| a.invert(&Tensor::new(&[1, c, h, w], y.data()[i * per..(i + 1) * per].to_vec())?))
        .collect()
}

/// Raw μ-law variance of the de-augmented outputs.
pub fn raw_uncertainty(outputs: &[Tensor], tone: ToneMapParams) -> Result<f64> {
    let mu: Vec<Vec<f64>> = outputs.iter().map(|t| mu_values(t, tone)).collect();
    stack_variance(&mu)
}

fn mean_tensor(ts: &[Tensor]) -> Result<Tensor> {
    let n = ts.len() as f64;
    let mut acc = vec![0f64; ts[0].numel()];
    for t in ts {
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += f64::from(*v);
        }
    }
    Tensor::new(ts[0].shape(), acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Moves every teacher parameter to `lambda * teacher + (1 - lambda) * student`.
pub fn ema_update(teacher: &mut FusionNet, student: &FusionNet, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let tn: BTreeSet<&String> = teacher.params.keys().collect();
    let sn: BTreeSet<&String> = student.params.keys().collect();
    if tn != sn {
        let diff: Vec<String> = tn.symmetric_difference(&sn).map(|s| s.to_string()).collect();
        return Err(Error::Shape(format!("teacher and student parameters differ: {diff:?}")));
    }
    for (name, t) in teacher.params.iter_mut() {
        let s = &student.params[name];
        t.same_shape(s, name)?;
        if t == s {
            continue;
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (lambda * f64::from(*tv) + (1.0 - lambda) * f64::from(*sv)) as f32;
        }
    }
    Ok(())
}

/// Where the pseudo-label comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    /// Teacher output on the unaugmented input.
    Teacher,
    /// Mean of the teacher's de-augmented outputs.
    AugmentedMean,
}

/// Which student parameters receive gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Adapter branches only (scales excluded).
    Adapters,
    /// Every parameter except adapter scales.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    /// EMA coefficient of the teacher.
    pub lambda: f64,
    pub lr: f64,
    pub augment: AugmentationSpec,
    pub pseudo_label: PseudoLabel,
    /// Set adapter scales from the per-sample uncertainty.
    pub use_uncertainty: bool,
    pub scope: UpdateScope,
    /// Return the student's prediction instead of the teacher's.
    pub return_student: bool,
    /// Overrides the calibration constant stored with the checkpoint.
    #[serde(default)]
    pub uncertainty_scale: Option<f64>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            lambda: 0.999,
            lr: 1e-4,
            augment: AugmentationSpec::default(),
            pseudo_label: PseudoLabel::AugmentedMean,
            use_uncertainty: true,
            scope: UpdateScope::Adapters,
            return_student: false,
            uncertainty_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub index: usize,
    pub u: f64,
    pub raw_variance: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    /// Student loss against the pseudo-label, before the update.
    pub loss: f64,
    #[serde(default)]
    pub psnr_mu_vs_gt: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TtaState {
    pub teacher: FusionNet,
    pub student: FusionNet,
    pub config: TtaConfig,
    /// Calibration constant `c` in `u = clamp(raw / c, 0, 1)`.
    pub uncertainty_scale: Option<f64>,
    pub step: u64,
    pub adam: AdamState,
    /// Stream indices in the order they were processed.
    pub access_log: Vec<usize>,
}

impl TtaState {
    /// Teacher and student both start as copies of `net`. `stored_scale`
    /// is the checkpoint's calibration constant.
    pub fn new(net: &FusionNet, config: TtaConfig, stored_scale: Option<f64>) -> Result<Self> {
        config.augment.validate()?;
        if !(0.0..=1.0).contains(&config.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", config.lambda)));
        }
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be >= 0", config.lr)));
        }
        if config.augment.exposure_offsets.len() < 2 {
            return Err(Error::Config("uncertainty needs at least 2 augmentations".into()));
        }
        if config.scope == UpdateScope::Adapters && net.adapters.is_none() {
            return Err(Error::Config("adapter-only updates need an adapted network".into()));
        }
        let uncertainty_scale = config.uncertainty_scale.or(stored_scale);
        if config.use_uncertainty {
            if net.adapters.is_none() {
                return Err(Error::Config("uncertainty scaling needs an adapted network".into()));
            }
            normalize_uncertainty(0.0, uncertainty_scale.unwrap_or(f64::NAN))?;
        }
        Ok(Self {
            teacher: net.clone(),
            student: net.clone(),
            config,
            uncertainty_scale,
            step: 0,
            adam: AdamState::default(),
            access_log: Vec::new(),
        })
    }

    fn trainable(&self) -> impl Fn(&str) -> bool {
        let scope = self.config.scope;
        move |name: &str| {
            !is_alpha_param(name)
                && match scope {
                    UpdateScope::Adapters => is_adapter_param(name),
                    UpdateScope::Full => true,
                }
        }
    }

    /// Teacher uncertainty for one bracket, with adapter scales at (1, 1).
    pub fn estimate_uncertainty(&self, index: usize, bracket: &LdrBracket) -> Result<UncertaintyEstimate> {
        let input = bracket_input(bracket)?;
        let (est, _) = self.uncertainty_and_outputs(index, bracket, &input)?;
        Ok(est)
    }

    fn uncertainty_and_outputs(
        &self,
        index: usize,
        bracket: &LdrBracket,
        input: &Tensor,
    ) -> Result<(UncertaintyEstimate, Vec<Tensor>)> {
        let augs = self.config.augment.draw(index as u64);
        let neutral = ForwardOptions {
            alphas: self.teacher.adapters.as_ref().map(|_| (1.0, 1.0)),
        };
        let outs = deaugmented_outputs(&self.teacher, input, &augs, bracket.ev_offsets, bracket.gamma, neutral)?;
        let raw_variance = raw_uncertainty(&outs, self.teacher.config.tone)?;
        let u = match self.uncertainty_scale {
            Some(c) => normalize_uncertainty(raw_variance, c)?,
            None => 0.0,
        };
        Ok((UncertaintyEstimate { raw_variance, u }, outs))
    }

    /// Adapts on one stream element and returns the prediction for it.
    pub fn tta_step(&mut self, index: usize, bracket: &LdrBracket) -> Result<(HdrImage, StepDiagnostics)> {
        if self.access_log.contains(&index) {
            return Err(Error::Contract(format!("stream element {index} was already processed")));
        }
        self.access_log.push(index);
        let input = bracket_input(bracket)?;
        let (est, outs) = self.uncertainty_and_outputs(index, bracket, &input)?;

        let mut alphas = (1.0, 1.0);
        if self.config.use_uncertainty {
            alphas = scales_from_uncertainty(est.u)?;
            set_alphas(&mut self.teacher, alphas.0 as f32, alphas.1 as f32);
            set_alphas(&mut self.student, alphas.0 as f32, alphas.1 as f32);
        } else if let Some((_, t)) = self.teacher.params.iter().find(|(k, _)| k.ends_with("/alpha_s")) {
            let s = f64::from(t.item());
            let name = self.teacher.params.keys().find(|k| k.ends_with("/alpha_t")).cloned();
            alphas = (s, name.map(|n| f64::from(self.teacher.params[&n].item())).unwrap_or(1.0));
        }
        let neutral = alphas == (1.0, 1.0) || self.teacher.adapters.is_none();
        let target = match self.config.pseudo_label {
            PseudoLabel::Teacher => self.teacher.forward_tensor(&input, ForwardOptions::default())?,
            PseudoLabel::AugmentedMean if neutral => mean_tensor(&outs)?,
            PseudoLabel::AugmentedMean => {
                let augs = self.config.augment.draw(index as u64);
                let outs = deaugmented_outputs(
                    &self.teacher,
                    &input,
                    &augs,
                    bracket.ev_offsets,
                    bracket.gamma,
                    ForwardOptions::default(),
                )?;
                mean_tensor(&outs)?
            }
        };

        let loss = self.student_step(input.clone(), target)?;
        ema_update(&mut self.teacher, &self.student, self.config.lambda)?;
        self.step += 1;

        let model = if self.config.return_student { &self.student } else { &self.teacher };
        let pred = tensor_to_image(&model.forward_tensor(&input, ForwardOptions::default())?)?;
        let diag = StepDiagnostics {
            index,
            u: est.u,
            raw_variance: est.raw_variance,
            alpha_s: alphas.0,
            alpha_t: alphas.1,
            loss,
            psnr_mu_vs_gt: Some(psnr_normalized(&pred, &bracket.gt, Domain::Mu, &EvalConfig::default())?),
        };
        Ok((pred, diag))
    }

    fn student_step(&mut self, input: Tensor, target: Tensor) -> Result<f64> {
        let trainable = self.trainable();
        let mut g = Graph::new();
        let x = g.constant(input);
        let (y, vars) = self.student.forward_graph(&mut g, x, &trainable, ForwardOptions::default())?;
        let mu = self.student.config.tone.mu;
        let yt = g.mu_law(y, mu);
        let t = g.constant(target);
        let tt = g.mu_law(t, mu);
        let l = g.l1_loss(yt, tt)?;
        let loss = f64::from(g.value(l).item());
        if self.config.lr > 0.0 {
            g.backward(l)?;
            let grads = vars
                .iter()
                .filter(|(name, _)| trainable(name))
                .filter_map(|(name, v)| g.grad(*v).map(|gr| (name.clone(), gr.clone())))
                .collect();
            let cfg = AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            };
            adam_step(&mut self.student.params, &grads, &mut self.adam, &cfg)?;
        }
        Ok(loss)
    }
}

/// Outcome of a pass over a stream.
#[derive(Debug, Clone)]
pub struct StreamResult {
    pub report: EvalReport,
    pub diagnostics: Vec<StepDiagnostics>,
    pub predictions: Vec<HdrImage>,
}

/// Adapts over `stream` in order, each element once. When `out` is given,
/// predictions, `diagnostics.jsonl`, `access_log.json` and the evaluation
/// files are written there.
pub fn run_stream(
    state: &mut TtaState,
    stream: &[(String, LdrBracket)],
    out: Option<&Path>,
    eval: &EvalConfig,
) -> Result<StreamResult> {
    if stream.is_empty() {
        return Err(Error::Input("empty stream".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut diagnostics = Vec::with_capacity(stream.len());
    let mut predictions = Vec::with_capacity(stream.len());
    let mut scores: Vec<SampleScores> = Vec::with_capacity(stream.len());
    for (i, (name, b)) in stream.iter().enumerate() {
        let (pred, diag) = state.tta_step(i, b)?;
        log::info!("tta {i}: u {:.4} loss {:.6}", diag.u, diag.loss);
        scores.push(crate::eval::score_pair(name, &pred, &b.gt, eval)?);
        if let Some(dir) = out {
            write_pfm(&pred, dir.join(prediction_name(i)))?;
        }
        diagnostics.push(diag);
        predictions.push(pred);
    }
    let report = EvalReport::from_scores(scores)?;
    if let Some(dir) = out {
        let path = dir.join("diagnostics.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for d in &diagnostics {
            writeln!(f, "{}", serde_json::to_string(d)?).map_err(|e| Error::io(&path, e))?;
        }
        let log_path = dir.join("access_log.json");
        fs::write(&log_path, serde_json::to_string(&state.access_log)?).map_err(|e| Error::io(&log_path, e))?;
        report.write(dir)?;
    }
    Ok(StreamResult {
        report,
        diagnostics,
        predictions,
    })
}

/// 95th percentile of the raw uncertainty over `brackets`, used as the
/// calibration constant `c`. Floors at `1e-12` so it stays usable.
pub fn calibrate_uncertainty_scale(net: &FusionNet, brackets: &[LdrBracket], augment: &AugmentationSpec) -> Result<f64> {
    augment.validate()?;
    if brackets.is_empty() {
        return Err(Error::Input("no calibration brackets".into()));
    }
    let opts = ForwardOptions {
        alphas: net.adapters.as_ref().map(|_| (1.0, 1.0)),
    };
    let raws = brackets
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let outs = deaugmented_outputs(
                net,
                &bracket_input(b)?,
                &augment.draw(i as u64),
                b.ev_offsets,
                b.gamma,
                opts,
            )?;
            raw_uncertainty(&outs, net.config.tone)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(quantile(&raws, 0.95).max(1e-12))
}
