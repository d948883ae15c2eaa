//! Run configuration shared by every command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, InjectionPlan};
use crate::bracket::BracketConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::experiment::DomainSpec;
use crate::model::{FusionNetConfig, TrainConfig};
use crate::tta::TtaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    /// Fraction of generated sequences drawn from the shifted domain B.
    pub target_fraction: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_frames: 5,
            target_fraction: 0.5,
        }
    }
}

/// Capture models, per domain tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BracketSection {
    pub source: BracketConfig,
    pub target: BracketConfig,
}

impl Default for BracketSection {
    fn default() -> Self {
        Self {
            source: DomainSpec::source().bracket,
            target: DomainSpec::target().bracket,
        }
    }
}

impl BracketSection {
    /// Config for entries tagged `domain`; anything but `B` is a source tag.
    pub fn for_domain(&self, domain: &str) -> &BracketConfig {
        if domain == "B" {
            &self.target
        } else {
            &self.source
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub net: FusionNetConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    /// Share of the training manifest held out to calibrate test-time
    /// uncertainty.
    pub validation_fraction: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            net: FusionNetConfig::default(),
            train: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::default()
            },
            validation_fraction: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub plan: InjectionPlan,
    pub config: AdapterConfig,
    pub train: TrainConfig,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            plan: InjectionPlan::all_pointwise(),
            config: AdapterConfig::default(),
            train: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Base directory for relative paths given on the command line.
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub bracket: BracketSection,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
    pub paths: PathsSection,
    pub seed: u64,
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.width == 0 || s.height == 0 || s.num_frames < 3 {
            return Err(Error::Config("scene needs a positive size and >= 3 frames".into()));
        }
        if !(0.0..=1.0).contains(&s.target_fraction) {
            return Err(Error::Config(format!("target_fraction {} outside [0, 1]", s.target_fraction)));
        }
        if !(0.0..1.0).contains(&self.model.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        self.bracket.source.validate()?;
        self.bracket.target.validate()?;
        self.model.net.validate()?;
        self.model.train.validate()?;
        self.model.finetune.validate()?;
        self.adapter.train.validate()?;
        self.tta.augment.validate()?;
        self.eval.tone.validate()
    }

    /// Writes the config next to an output as `config.json`.
    pub fn snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    /// Resolves a command-line path against `paths.root`.
    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        match &self.paths.root {
            Some(root) if p.as_ref().is_relative() => root.join(p),
            _ => p.as_ref().to_path_buf(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_partial_override() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let cfg = RunConfig::from_json(r#"{"seed": 4, "bracket": {"target": {"crf_gamma": 2.0}}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.bracket.target.crf_gamma, 2.0);
        assert_eq!(cfg.bracket.target.sigma_low, BracketConfig::default().sigma_low);
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for text in [
            r#"{"sead": 1}"#,
            r#"{"model": {"net": {"depth": 4, "widht": 3}}}"#,
            r#"{"tta": {"lamda": 0.9}}"#,
            r#"{"scene": {"num_frames": 2}}"#,
            r#"{"model": {"train": {"batch_size": 0}}}"#,
            "[1, 2]",
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }
}
