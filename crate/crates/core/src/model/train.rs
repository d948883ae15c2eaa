//! Training loop shared by pretraining, full fine-tuning and adapter
//! adaptation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{random_view, stack, Sample};
use super::net::{FusionNet, FusionNetConfig, ForwardOptions};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::image::{HdrImage, ToneMapParams};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Square training crops; `None` trains on whole frames.
    pub patch_size: Option<usize>,
    /// Random flips and 90-degree rotations.
    pub augment: bool,
    /// Cosine decay of the learning rate to zero over the run.
    #[serde(default)]
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 4,
            patch_size: Some(32),
            augment: true,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if self.patch_size == Some(0) {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// μ-law L1 distance between two images.
pub fn loss(pred: &HdrImage, gt: &HdrImage, tone: ToneMapParams) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    // same compressor as the training graph: no clamp above 1
    let t = |v: f32| {
        (tone.mu * f64::from(v.max(0.0))).ln_1p() / tone.mu.ln_1p()
    };
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (t(*a) - t(*b)).abs()).sum();
    Ok(s / pred.data().len() as f64)
}

/// Mean full-frame loss of the network over samples.
pub fn mean_loss(net: &FusionNet, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let x = g.constant(s.input.clone());
        let (y, _) = net.forward_graph(&mut g, x, &|_| false, ForwardOptions::default())?;
        let yt = g.mu_law(y, net.config.tone.mu);
        let t = g.constant(s.target.clone());
        let tt = g.mu_law(t, net.config.tone.mu);
        let l = g.l1_loss(yt, tt)?;
        total += f64::from(g.value(l).item());
    }
    Ok(total / samples.len().max(1) as f64)
}

/// One gradient step on a batch; returns the loss before the update.
pub fn train_step(
    net: &mut FusionNet,
    input: Tensor,
    target: Tensor,
    trainable: &dyn Fn(&str) -> bool,
    opts: ForwardOptions,
    adam: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(input);
    let (y, vars) = net.forward_graph(&mut g, x, trainable, opts)?;
    let mu = net.config.tone.mu;
    let yt = g.mu_law(y, mu);
    let t = g.constant(target);
    let tt = g.mu_law(t, mu);
    let l = g.l1_loss(yt, tt)?;
    g.backward(l)?;
    let grads: BTreeMap<String, Tensor> = vars
        .iter()
        .filter(|(name, _)| trainable(name))
        .filter_map(|(name, v)| g.grad(*v).map(|gr| (name.clone(), gr.clone())))
        .collect();
    adam_step(&mut net.params, &grads, adam, cfg)?;
    Ok(f64::from(g.value(l).item()))
}

/// Minibatch Adam over `samples` for `cfg.epochs`, updating only the
/// parameters selected by `trainable`. Sample order and crops are drawn
/// from the config seed.
pub fn fit(
    net: &mut FusionNet,
    samples: &[Sample],
    cfg: &TrainConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::default();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        if cfg.cosine_decay {
            let phase = epoch as f64 / cfg.epochs as f64;
            adam_cfg.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, y) = random_view(&samples[i], cfg.patch_size, cfg.augment, &mut rng)?;
                inputs.push(x);
                targets.push(y);
            }
            // full-frame batches need equal sizes; fall back to singletons
            let same = inputs.iter().all(|t| t.shape() == inputs[0].shape());
            if same {
                let l = train_step(
                    net,
                    stack(&inputs)?,
                    stack(&targets)?,
                    trainable,
                    ForwardOptions::default(),
                    &mut adam,
                    &adam_cfg,
                )?;
                losses.push(l);
            } else {
                for (x, y) in inputs.into_iter().zip(targets) {
                    losses.push(train_step(net, x, y, trainable, ForwardOptions::default(), &mut adam, &adam_cfg)?);
                }
            }
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

fn is_base(name: &str) -> bool {
    !name.starts_with("adapters/")
}

/// Trains a freshly initialized network.
pub fn train(samples: &[Sample], config: FusionNetConfig, cfg: &TrainConfig) -> Result<(FusionNet, TrainReport)> {
    let mut net = FusionNet::new(config, cfg.seed)?;
    let report = fit(&mut net, samples, cfg, &is_base)?;
    Ok((net, report))
}

/// Updates every base parameter on the target samples.
pub fn finetune(net: &FusionNet, samples: &[Sample], cfg: &TrainConfig) -> Result<(FusionNet, TrainReport)> {
    let mut out = net.clone();
    let report = fit(&mut out, samples, cfg, &is_base)?;
    Ok((out, report))
}

/// Image-level prediction for a sample.
pub fn predict(net: &FusionNet, s: &Sample) -> Result<HdrImage> {
    super::net::tensor_to_image(&net.forward_tensor(&s.input, ForwardOptions::default())?)
}
