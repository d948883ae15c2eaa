//! The pipeline behind each `s2r` subcommand. Every command returns a JSON
//! summary and writes a config snapshot next to its output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapter::{base_weight_hash, inject, merge, supervised_trainable};
use crate::autodiff::Tensor;
use crate::bracket::{export_bracket, BracketConfig, LdrBracket};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{prediction_name, EvalReport};
use crate::experiment::{AdaptMethod, AdaptRow, AdaptationExperiment, TtaExperiment, TtaRow, TtaVariant};
use crate::image::write_pfm;
use crate::metrics::analyze;
use crate::model::{
    fit, load_brackets_with, mean_loss, samples_from_brackets, Checkpoint, FusionNet, TrainMeta, INPUT_CHANNELS,
};
use crate::rng::{derive_seed, substream};
use crate::scene::{export_sequence, generate_sequence, DatasetManifest, DomainStyle, ManifestEntry};
use crate::tta::{calibrate_uncertainty_scale, run_stream, TtaState, UpdateScope};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// `<file>.config.json` beside a file output.
fn snapshot_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    write_json(&file.with_file_name(name), cfg)
}

/// Bracket config of one domain, reseeded from the run seed.
fn bracket_for<'a>(cfg: &'a RunConfig, cache: &'a BTreeMap<String, BracketConfig>, domain: &str) -> &'a BracketConfig {
    cache.get(domain).unwrap_or_else(|| cfg.bracket.for_domain(domain))
}

fn load(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<LdrBracket>> {
    let mut seeded = BTreeMap::new();
    for e in &manifest.entries {
        let base = cfg.bracket.for_domain(&e.domain);
        seeded.entry(e.domain.clone()).or_insert_with(|| BracketConfig {
            seed: derive_seed(cfg.seed, &format!("bracket/{}", e.domain), base.seed),
            ..base.clone()
        });
    }
    load_brackets_with(manifest, &|d| bracket_for(cfg, &seeded, d))
}

fn load_manifest(cfg: &RunConfig, path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(cfg.resolve(path))
}

fn load_ckpt(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(cfg.resolve(path))
}

/// Generates `n` sequences; the last `round(n * target_fraction)` are drawn
/// from domain B.
pub fn cmd_gen(cfg: &RunConfig, n: usize, out: &Path) -> Result<Value> {
    if n == 0 {
        return Err(Error::Config("need at least one sequence".into()));
    }
    let out = cfg.resolve(out);
    let n_b = (n as f64 * cfg.scene.target_fraction).round() as usize;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let style = if i >= n - n_b {
                DomainStyle::Shifted
            } else {
                DomainStyle::Synthetic
            };
            let s = &cfg.scene;
            let spec = style.sample_scene(s.width, s.height, s.num_frames, derive_seed(cfg.seed, "gen", i as u64));
            let seq = generate_sequence(&spec)?;
            let name = format!("seq_{i:03}");
            export_sequence(&seq, out.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                domain: style.tag().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        entries,
        root: out.clone(),
    };
    manifest.save(out.join("manifest.json"))?;
    cfg.snapshot(&out)?;
    Ok(json!({
        "command": "gen",
        "sequences": n,
        "domain_a": n - n_b,
        "domain_b": n_b,
        "manifest": out.join("manifest.json"),
    }))
}

/// Synthesizes one bracket directory per manifest entry.
pub fn cmd_synth(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Value> {
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    let brackets = load(cfg, &m)?;
    let entries = brackets
        .par_iter()
        .zip(&m.entries)
        .enumerate()
        .map(|(i, (b, e))| {
            let name = format!("bracket_{i:03}");
            export_bracket(b, out.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                domain: e.domain.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest {
        entries,
        root: out.clone(),
    }
    .save(out.join("manifest.json"))?;
    cfg.snapshot(&out)?;
    Ok(json!({"command": "synth", "brackets": brackets.len(), "manifest": out.join("manifest.json")}))
}

pub fn cmd_analyze(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Value> {
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    let report = analyze(&m)?;
    let dataset = manifest.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()).unwrap_or("dataset");
    report.write(&out, dataset)?;
    cfg.snapshot(&out)?;
    Ok(json!({"command": "analyze", "images": report.size, "means": report.means}))
}

/// Trains from scratch, holding out a validation share to calibrate the
/// test-time uncertainty scale.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Value> {
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    let brackets = load(cfg, &m)?;
    let n_val = if brackets.len() >= 2 {
        ((brackets.len() as f64 * cfg.model.validation_fraction).round() as usize).min(brackets.len() - 1)
    } else {
        0
    };
    let (train_set, val_set) = brackets.split_at(brackets.len() - n_val);
    let seed = derive_seed(cfg.seed, "train", cfg.model.train.seed);
    let tcfg = crate::model::TrainConfig {
        seed,
        ..cfg.model.train
    };
    let samples = samples_from_brackets(train_set)?;
    let mut net = FusionNet::new(cfg.model.net, seed)?;
    let initial = mean_loss(&net, &samples)?;
    let report = fit(&mut net, &samples, &tcfg, &|n| !n.starts_with("adapters/"))?;
    let final_loss = mean_loss(&net, &samples)?;
    let calib = if val_set.is_empty() { train_set } else { val_set };
    let c = calibrate_uncertainty_scale(&net, calib, &cfg.tta.augment)?;
    let mut domains: Vec<&str> = m.entries.iter().map(|e| e.domain.as_str()).collect();
    domains.dedup();
    let ckpt = Checkpoint {
        net,
        meta: TrainMeta {
            epochs: tcfg.epochs,
            seed,
            source_domain: domains.join(","),
            uncertainty_scale: Some(c),
            history: vec!["train".into()],
        },
    };
    ckpt.save(&out)?;
    snapshot_beside(cfg, &out)?;
    Ok(json!({
        "command": "train",
        "train_samples": train_set.len(),
        "validation_samples": val_set.len(),
        "initial_loss": initial,
        "final_loss": final_loss,
        "epoch_losses": report.epoch_losses,
        "uncertainty_scale": c,
        "checkpoint": out,
    }))
}

/// Fine-tunes every base weight on the target manifest.
pub fn cmd_finetune(cfg: &RunConfig, ckpt: &Path, manifest: &Path, out: &Path) -> Result<Value> {
    let mut c = load_ckpt(cfg, ckpt)?;
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    let samples = samples_from_brackets(&load(cfg, &m)?)?;
    let tcfg = crate::model::TrainConfig {
        seed: derive_seed(cfg.seed, "finetune", cfg.model.finetune.seed),
        ..cfg.model.finetune
    };
    let before = mean_loss(&c.net, &samples)?;
    fit(&mut c.net, &samples, &tcfg, &|n| !n.starts_with("adapters/"))?;
    let after = mean_loss(&c.net, &samples)?;
    c.meta.history.push("finetune".into());
    c.save(&out)?;
    snapshot_beside(cfg, &out)?;
    Ok(json!({"command": "finetune", "loss_before": before, "loss_after": after, "checkpoint": out}))
}

/// Injects adapters and trains them on the labeled target manifest.
pub fn cmd_adapt(cfg: &RunConfig, ckpt: &Path, manifest: &Path, out: &Path) -> Result<Value> {
    let mut c = load_ckpt(cfg, ckpt)?;
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    let samples = samples_from_brackets(&load(cfg, &m)?)?;
    let acfg = crate::adapter::AdapterConfig {
        seed: derive_seed(cfg.seed, "adapter", cfg.adapter.config.seed),
        ..cfg.adapter.config
    };
    let mut net = inject(&c.net, &cfg.adapter.plan, &acfg)?;
    let hash = base_weight_hash(&net);
    let tcfg = crate::model::TrainConfig {
        seed: derive_seed(cfg.seed, "adapt", cfg.adapter.train.seed),
        ..cfg.adapter.train
    };
    let before = mean_loss(&net, &samples)?;
    let spec = net.adapters.clone().expect("just injected");
    fit(&mut net, &samples, &tcfg, &supervised_trainable(&spec))?;
    if base_weight_hash(&net) != hash {
        return Err(Error::Contract("adapter training modified base weights".into()));
    }
    let after = mean_loss(&net, &samples)?;
    c.net = net;
    c.meta.history.push("adapt".into());
    c.save(&out)?;
    snapshot_beside(cfg, &out)?;
    Ok(json!({
        "command": "adapt",
        "adapter_params": spec.param_count(),
        "loss_before": before,
        "loss_after": after,
        "base_weight_hash": hash,
        "checkpoint": out,
    }))
}

/// Runs the checkpoint on every entry and writes `pred_NNN.pfm` files.
pub fn cmd_predict(cfg: &RunConfig, ckpt: &Path, manifest: &Path, out: &Path) -> Result<Value> {
    let c = load_ckpt(cfg, ckpt)?;
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let brackets = load(cfg, &m)?;
    brackets
        .par_iter()
        .enumerate()
        .map(|(i, b)| write_pfm(&c.net.forward(b)?, out.join(prediction_name(i))))
        .collect::<Result<Vec<_>>>()?;
    cfg.snapshot(&out)?;
    Ok(json!({"command": "predict", "predictions": brackets.len(), "dir": out}))
}

/// Single-pass test-time adaptation over the manifest, in order.
pub fn cmd_tta(cfg: &RunConfig, ckpt: &Path, manifest: &Path, out: &Path) -> Result<Value> {
    let c = load_ckpt(cfg, ckpt)?;
    let m = load_manifest(cfg, manifest)?;
    let out = cfg.resolve(out);
    let brackets = load(cfg, &m)?;
    let needs_adapters = cfg.tta.use_uncertainty || cfg.tta.scope == UpdateScope::Adapters;
    let net = if needs_adapters && c.net.adapters.is_none() {
        let acfg = crate::adapter::AdapterConfig {
            seed: derive_seed(cfg.seed, "adapter", cfg.adapter.config.seed),
            ..cfg.adapter.config
        };
        inject(&c.net, &cfg.adapter.plan, &acfg)?
    } else {
        c.net.clone()
    };
    let mut tcfg = cfg.tta.clone();
    tcfg.augment.seed = derive_seed(cfg.seed, "tta", tcfg.augment.seed);
    let mut state = TtaState::new(&net, tcfg, c.meta.uncertainty_scale)?;
    let stream: Vec<(String, LdrBracket)> = m.entries.iter().map(|e| e.path.clone()).zip(brackets).collect();
    let r = run_stream(&mut state, &stream, Some(&out), &cfg.eval)?;
    let teacher = Checkpoint {
        net: state.teacher.clone(),
        meta: TrainMeta {
            history: [c.meta.history.clone(), vec!["tta".into()]].concat(),
            ..c.meta.clone()
        },
    };
    teacher.save(out.join("teacher.ckpt"))?;
    cfg.snapshot(&out)?;
    let mean_u = r.diagnostics.iter().map(|d| d.u).sum::<f64>() / r.diagnostics.len() as f64;
    Ok(json!({
        "command": "tta",
        "samples": r.diagnostics.len(),
        "mean_u": mean_u,
        "psnr_mu": r.report.psnr_mu,
        "psnr_l": r.report.psnr_l,
        "ssim_mu": r.report.ssim_mu,
        "ssim_l": r.report.ssim_l,
        "dir": out,
    }))
}

pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, manifest: &Path, out: &Path) -> Result<Value> {
    let m = load_manifest(cfg, manifest)?;
    let pred_dir = cfg.resolve(pred_dir);
    let out = cfg.resolve(out);
    let brackets = load(cfg, &m)?;
    let pairs = brackets
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let pred = crate::image::read_pfm(pred_dir.join(prediction_name(i)))?;
            Ok((m.entries[i].path.clone(), pred, b.gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_pairs(&pairs, &cfg.eval)?;
    report.write(&out)?;
    cfg.snapshot(&out)?;
    Ok(json!({
        "command": "eval",
        "samples": report.per_sample.len(),
        "psnr_mu": report.psnr_mu,
        "psnr_l": report.psnr_l,
        "ssim_mu": report.ssim_mu,
        "ssim_l": report.ssim_l,
    }))
}

/// Largest absolute output difference between two networks on a seeded
/// random input.
pub fn max_output_difference(a: &FusionNet, b: &FusionNet, size: usize, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "merge-check", 0);
    let n = INPUT_CHANNELS * size * size;
    let x = Tensor::new(&[1, INPUT_CHANNELS, size, size], (0..n).map(|_| rng.random::<f32>()).collect())?;
    let ya = a.forward_tensor(&x, Default::default())?;
    let yb = b.forward_tensor(&x, Default::default())?;
    Ok(ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(p, q)| f64::from((p - q).abs()))
        .fold(0.0, f64::max))
}

/// Folds the adapters of a checkpoint into its base weights.
pub fn cmd_merge(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<Value> {
    let c = load_ckpt(cfg, ckpt)?;
    let out = cfg.resolve(out);
    let merged = merge(&c.net)?;
    let diff = max_output_difference(&c.net, &merged, 16, cfg.seed)?;
    if !(diff < 1e-3) {
        return Err(Error::Contract(format!("merged network deviates by {diff}")));
    }
    let params_before = c.net.param_count();
    let mc = Checkpoint {
        net: merged,
        meta: TrainMeta {
            history: [c.meta.history.clone(), vec!["merge".into()]].concat(),
            ..c.meta
        },
    };
    mc.save(&out)?;
    snapshot_beside(cfg, &out)?;
    Ok(json!({
        "command": "merge",
        "params_before": params_before,
        "params_after": mc.net.param_count(),
        "max_abs_diff": diff,
        "checkpoint": out,
    }))
}

/// Config matrix for `ablate`: which experiments, rows and seeds to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMatrix {
    pub seeds: Vec<u64>,
    pub adaptation: Option<AdaptationExperiment>,
    pub methods: Vec<AdaptMethod>,
    pub tta: Option<TtaExperiment>,
    pub variants: Vec<TtaVariant>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            adaptation: Some(AdaptationExperiment::default()),
            methods: AdaptMethod::ALL.to_vec(),
            tta: Some(TtaExperiment::default()),
            variants: TtaVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub adaptation: Vec<(u64, Vec<AdaptRow>)>,
    pub tta: Vec<(u64, Vec<TtaRow>)>,
}

pub const ADAPT_COLUMNS: [&str; 8] = [
    "seed", "method", "PSNR-mu", "PSNR-l", "SSIM-mu", "SSIM-l", "source PSNR-mu", "trained params",
];
pub const TTA_COLUMNS: [&str; 7] = ["seed", "method", "PSNR-mu", "PSNR-l", "SSIM-mu", "SSIM-l", "mean u"];

impl AblationResult {
    pub fn adaptation_csv(&self) -> String {
        let mut s = ADAPT_COLUMNS.join(",") + "\n";
        for (seed, rows) in &self.adaptation {
            for r in rows {
                let t = &r.target;
                s += &format!(
                    "{seed},{},{:.4},{:.4},{:.6},{:.6},{:.4},{}\n",
                    r.label, t.psnr_mu, t.psnr_l, t.ssim_mu, t.ssim_l, r.source.psnr_mu, r.trained_params
                );
            }
        }
        s
    }

    pub fn tta_csv(&self) -> String {
        let mut s = TTA_COLUMNS.join(",") + "\n";
        for (seed, rows) in &self.tta {
            for r in rows {
                let t = &r.report;
                s += &format!(
                    "{seed},{},{:.4},{:.4},{:.6},{:.6},{:.4}\n",
                    r.label, t.psnr_mu, t.psnr_l, t.ssim_mu, t.ssim_l, r.mean_u
                );
            }
        }
        s
    }
}

/// Runs the matrix in memory.
pub fn run_ablation(matrix: &AblationMatrix) -> Result<AblationResult> {
    let mut result = AblationResult {
        adaptation: Vec::new(),
        tta: Vec::new(),
    };
    for &seed in &matrix.seeds {
        if let Some(exp) = &matrix.adaptation {
            let splits = exp.splits(seed)?;
            let net = exp.pretrain(&splits, seed)?;
            result.adaptation.push((seed, exp.run(&net, &splits, &matrix.methods, seed)?));
        }
        if let Some(exp) = &matrix.tta {
            let splits = exp.splits(seed)?;
            let net = exp.pretrain(&splits, seed)?;
            result.tta.push((seed, exp.run(&net, &splits.calibration, &splits.stream, &matrix.variants, seed)?));
        }
    }
    Ok(result)
}

/// Reads a matrix file, runs it, and writes `adaptation.csv`,
/// `tta.csv` and `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, matrix: &Path, out: &Path) -> Result<Value> {
    let path = cfg.resolve(matrix);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let matrix: AblationMatrix = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if matrix.seeds.is_empty() {
        return Err(Error::Config("ablation matrix lists no seeds".into()));
    }
    let out: PathBuf = cfg.resolve(out);
    let result = run_ablation(&matrix)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("ablation.json"), &result)?;
    write_json(&out.join("matrix.json"), &matrix)?;
    for (name, csv, has) in [
        ("adaptation.csv", result.adaptation_csv(), !result.adaptation.is_empty()),
        ("tta.csv", result.tta_csv(), !result.tta.is_empty()),
    ] {
        if has {
            let p = out.join(name);
            fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        }
    }
    cfg.snapshot(&out)?;
    Ok(json!({
        "command": "ablate",
        "seeds": matrix.seeds,
        "adaptation_rows": result.adaptation.iter().map(|(_, r)| r.len()).sum::<usize>(),
        "tta_rows": result.tta.iter().map(|(_, r)| r.len()).sum::<usize>(),
        "dir": out,
    }))
}
