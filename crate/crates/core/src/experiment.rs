//! Source-to-target adaptation experiments on the two procedural domains:
//! supervised adaptation (full fine-tune against adapter variants) and the
//! test-time adaptation ablation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{base_weight_hash, inject, is_adapter_param, is_alpha_param, AdapterConfig, InjectionPlan};
use crate::bracket::{bracket_from_raw, BracketConfig, LdrBracket};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, EvalReport};
use crate::model::{fit, samples_from_brackets, FusionNet, FusionNetConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::scene::{generate_sequence, DomainStyle};
use crate::tta::{calibrate_uncertainty_scale, run_stream, PseudoLabel, TtaConfig, TtaState, UpdateScope};

/// Scene family plus capture model of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub style: DomainStyle,
    pub bracket: BracketConfig,
}

impl DomainSpec {
    /// Clean synthetic captures.
    pub fn source() -> Self {
        Self {
            style: DomainStyle::Synthetic,
            bracket: BracketConfig::default(),
        }
    }

    /// Warm, textured scenes shot by a camera whose response differs from
    /// the assumed one, with heavier sensor noise.
    pub fn target() -> Self {
        Self {
            style: DomainStyle::Shifted,
            bracket: BracketConfig {
                crf_gamma: 1.8,
                linearize_gamma: Some(2.2),
                sigma_low: [1e-3, 4e-3],
                sigma_mid: [2e-4, 1e-3],
                ..BracketConfig::default()
            },
        }
    }

    /// `n` brackets; `label` separates disjoint splits drawn from one seed.
    pub fn brackets(&self, n: usize, size: usize, num_frames: usize, seed: u64, label: &str) -> Result<Vec<LdrBracket>> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let scene_seed = derive_seed(seed, &format!("{}/{label}/scene", self.style.tag()), i as u64);
                let spec = self.style.sample_scene(size, size, num_frames, scene_seed);
                let seq = generate_sequence(&spec)?;
                let cfg = BracketConfig {
                    seed: derive_seed(seed, &format!("{}/{label}/bracket", self.style.tag()), i as u64),
                    ..self.bracket.clone()
                };
                bracket_from_raw(&seq, &cfg)
            })
            .collect()
    }
}

/// Which parameters supervised adaptation updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    /// No adaptation; the pretrained network.
    Pretrained,
    /// Every base parameter.
    FineTune,
    ShareOnly,
    TransferOnly,
    /// Both branches with fixed unit scales.
    Both,
    /// Both branches and the two scale factors.
    BothLearnedAlpha,
}

impl AdaptMethod {
    pub const ALL: [AdaptMethod; 6] = [
        AdaptMethod::Pretrained,
        AdaptMethod::FineTune,
        AdaptMethod::ShareOnly,
        AdaptMethod::TransferOnly,
        AdaptMethod::Both,
        AdaptMethod::BothLearnedAlpha,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AdaptMethod::Pretrained => "Pretrained",
            AdaptMethod::FineTune => "Fine-tune",
            AdaptMethod::ShareOnly => "Share",
            AdaptMethod::TransferOnly => "Transfer",
            AdaptMethod::Both => "Share+Transfer",
            AdaptMethod::BothLearnedAlpha => "Share+Transfer+alpha",
        }
    }

    fn trainable(self, name: &str) -> bool {
        let adapter = is_adapter_param(name);
        match self {
            AdaptMethod::Pretrained => false,
            AdaptMethod::FineTune => !adapter,
            AdaptMethod::ShareOnly => adapter && name.contains("/share."),
            AdaptMethod::TransferOnly => adapter && name.contains("/transfer."),
            AdaptMethod::Both => adapter && !is_alpha_param(name),
            AdaptMethod::BothLearnedAlpha => adapter,
        }
    }
}

/// Supervised adaptation of `net` with `method`. Adapter methods inject
/// fresh adapters first; the base weights stay bit-identical.
pub fn adapt(
    net: &FusionNet,
    method: AdaptMethod,
    target: &[LdrBracket],
    train: &TrainConfig,
    plan: &InjectionPlan,
    adapter: &AdapterConfig,
) -> Result<FusionNet> {
    let samples = samples_from_brackets(target)?;
    let mut out = match method {
        AdaptMethod::Pretrained | AdaptMethod::FineTune => net.clone(),
        _ => inject(
            net,
            plan,
            &AdapterConfig {
                learn_alpha: method == AdaptMethod::BothLearnedAlpha,
                ..*adapter
            },
        )?,
    };
    if method == AdaptMethod::Pretrained {
        return Ok(out);
    }
    let before = base_weight_hash(&out);
    fit(&mut out, &samples, train, &|n| method.trainable(n))?;
    if method != AdaptMethod::FineTune && base_weight_hash(&out) != before {
        return Err(Error::Contract("adapter training modified base weights".into()));
    }
    Ok(out)
}

/// Batch inference of `net` scored against the brackets' ground truth.
pub fn evaluate_net(net: &FusionNet, brackets: &[LdrBracket], cfg: &EvalConfig) -> Result<EvalReport> {
    let pairs = brackets
        .par_iter()
        .enumerate()
        .map(|(i, b)| Ok((format!("{i:03}"), net.forward(b)?, b.gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(&pairs, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationExperiment {
    /// Square frame size.
    pub image_size: usize,
    pub num_frames: usize,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub model: FusionNetConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub plan: InjectionPlan,
    pub adapter: AdapterConfig,
    pub eval: EvalConfig,
}

impl Default for AdaptationExperiment {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_frames: 3,
            source_train: 64,
            source_test: 8,
            target_train: 16,
            target_test: 8,
            source: DomainSpec::source(),
            target: DomainSpec::target(),
            model: FusionNetConfig::default(),
            pretrain: TrainConfig {
                epochs: 30,
                lr: 3e-4,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                epochs: 30,
                lr: 3e-4,
                ..TrainConfig::default()
            },
            plan: InjectionPlan::all_pointwise(),
            adapter: AdapterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Data splits of one experiment run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub source_train: Vec<LdrBracket>,
    pub source_test: Vec<LdrBracket>,
    pub target_train: Vec<LdrBracket>,
    pub target_test: Vec<LdrBracket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub method: AdaptMethod,
    pub label: String,
    /// Parameters updated by the method.
    pub trained_params: usize,
    pub target: EvalReport,
    pub source: EvalReport,
}

impl AdaptationExperiment {
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        let (s, f) = (self.image_size, self.num_frames);
        Ok(Splits {
            source_train: self.source.brackets(self.source_train, s, f, seed, "train")?,
            source_test: self.source.brackets(self.source_test, s, f, seed, "test")?,
            target_train: self.target.brackets(self.target_train, s, f, seed, "train")?,
            target_test: self.target.brackets(self.target_test, s, f, seed, "test")?,
        })
    }

    /// Trains the source model.
    pub fn pretrain(&self, splits: &Splits, seed: u64) -> Result<FusionNet> {
        let mut net = FusionNet::new(self.model, seed)?;
        let cfg = TrainConfig { seed, ..self.pretrain };
        let samples = samples_from_brackets(&splits.source_train)?;
        fit(&mut net, &samples, &cfg, &|n| !is_adapter_param(n))?;
        Ok(net)
    }

    /// Adapts `pretrained` with each method and scores it on both domains.
    pub fn run(&self, pretrained: &FusionNet, splits: &Splits, methods: &[AdaptMethod], seed: u64) -> Result<Vec<AdaptRow>> {
        let train = TrainConfig { seed, ..self.adapt };
        let adapter = AdapterConfig { seed, ..self.adapter };
        methods
            .iter()
            .map(|&method| {
                let net = adapt(pretrained, method, &splits.target_train, &train, &self.plan, &adapter)?;
                let trained_params = net
                    .params
                    .iter()
                    .filter(|(k, _)| method.trainable(k))
                    .map(|(_, t)| t.numel())
                    .sum();
                Ok(AdaptRow {
                    method,
                    label: method.label().to_string(),
                    trained_params,
                    target: evaluate_net(&net, &splits.target_test, &self.eval)?,
                    source: evaluate_net(&net, &splits.source_test, &self.eval)?,
                })
            })
            .collect()
    }
}

/// Rows of the test-time adaptation ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaVariant {
    /// Pretrained network, no updates.
    Frozen,
    /// Mean teacher updating every weight.
    TeacherStudent,
    /// Mean teacher updating injected adapters with unit scales.
    TsAdapter,
    /// As above with uncertainty-driven scales.
    TsAdapterUnc,
}

impl TtaVariant {
    pub const ALL: [TtaVariant; 4] = [
        TtaVariant::Frozen,
        TtaVariant::TeacherStudent,
        TtaVariant::TsAdapter,
        TtaVariant::TsAdapterUnc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TtaVariant::Frozen => "Frozen",
            TtaVariant::TeacherStudent => "TS",
            TtaVariant::TsAdapter => "TS+Adapter",
            TtaVariant::TsAdapterUnc => "TS+Adapter+Unc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaExperiment {
    pub image_size: usize,
    pub num_frames: usize,
    pub source_train: usize,
    /// Held-out source brackets used to calibrate the uncertainty scale.
    pub calibration: usize,
    pub stream_len: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub model: FusionNetConfig,
    pub pretrain: TrainConfig,
    pub adapter: AdapterConfig,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
}

impl Default for TtaExperiment {
    fn default() -> Self {
        let a = AdaptationExperiment::default();
        Self {
            image_size: a.image_size,
            num_frames: a.num_frames,
            source_train: a.source_train,
            calibration: 8,
            stream_len: 24,
            source: a.source,
            target: a.target,
            model: a.model,
            pretrain: a.pretrain,
            adapter: a.adapter,
            tta: TtaConfig {
                lr: 1e-5,
                return_student: true,
                pseudo_label: PseudoLabel::AugmentedMean,
                ..TtaConfig::default()
            },
            eval: a.eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaRow {
    pub variant: TtaVariant,
    pub label: String,
    pub report: EvalReport,
    pub mean_u: f64,
}

/// Data of one test-time run.
#[derive(Debug, Clone)]
pub struct TtaSplits {
    pub source_train: Vec<LdrBracket>,
    pub calibration: Vec<LdrBracket>,
    pub stream: Vec<LdrBracket>,
}

impl TtaExperiment {
    pub fn splits(&self, seed: u64) -> Result<TtaSplits> {
        let (s, f) = (self.image_size, self.num_frames);
        Ok(TtaSplits {
            source_train: self.source.brackets(self.source_train, s, f, seed, "train")?,
            calibration: self.source.brackets(self.calibration, s, f, seed, "calibration")?,
            stream: self.target.brackets(self.stream_len, s, f, seed, "stream")?,
        })
    }

    pub fn pretrain(&self, splits: &TtaSplits, seed: u64) -> Result<FusionNet> {
        let mut net = FusionNet::new(self.model, seed)?;
        let cfg = TrainConfig { seed, ..self.pretrain };
        let samples = samples_from_brackets(&splits.source_train)?;
        fit(&mut net, &samples, &cfg, &|n| !is_adapter_param(n))?;
        Ok(net)
    }

    pub fn tta_config(&self, variant: TtaVariant, seed: u64) -> TtaConfig {
        let mut cfg = self.tta.clone();
        cfg.augment.seed = seed;
        match variant {
            TtaVariant::Frozen => {
                cfg.lambda = 1.0;
                cfg.lr = 0.0;
                cfg.use_uncertainty = false;
                cfg.scope = UpdateScope::Full;
            }
            TtaVariant::TeacherStudent => {
                cfg.use_uncertainty = false;
                cfg.scope = UpdateScope::Full;
            }
            TtaVariant::TsAdapter => {
                cfg.use_uncertainty = false;
                cfg.scope = UpdateScope::Adapters;
            }
            TtaVariant::TsAdapterUnc => {
                cfg.use_uncertainty = true;
                cfg.scope = UpdateScope::Adapters;
            }
        }
        cfg
    }

    /// Runs every variant over one target stream.
    pub fn run(
        &self,
        pretrained: &FusionNet,
        calibration: &[LdrBracket],
        stream: &[LdrBracket],
        variants: &[TtaVariant],
        seed: u64,
    ) -> Result<Vec<TtaRow>> {
        let c = calibrate_uncertainty_scale(pretrained, calibration, &self.tta.augment)?;
        let adapted = inject(pretrained, &InjectionPlan::all_pointwise(), &AdapterConfig { seed, ..self.adapter })?;
        let named: Vec<(String, LdrBracket)> =
            stream.iter().enumerate().map(|(i, b)| (format!("{i:03}"), b.clone())).collect();
        variants
            .iter()
            .map(|&variant| {
                let net = match variant {
                    TtaVariant::Frozen | TtaVariant::TeacherStudent => pretrained,
                    _ => &adapted,
                };
                let mut state = TtaState::new(net, self.tta_config(variant, seed), Some(c))?;
                let r = run_stream(&mut state, &named, None, &self.eval)?;
                let mean_u = r.diagnostics.iter().map(|d| d.u).sum::<f64>() / r.diagnostics.len() as f64;
                Ok(TtaRow {
                    variant,
                    label: variant.label().to_string(),
                    report: r.report,
                    mean_u,
                })
            })
            .collect()
    }
}
