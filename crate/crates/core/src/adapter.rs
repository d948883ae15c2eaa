//! Two-branch adapters on pointwise convolutions: a low-rank share branch
//! and a high-rank transfer branch, each scaled by its own factor and
//! foldable into the host weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{conv2d_forward, Tensor};
use crate::error::{Error, Result};
use crate::model::{kaiming_uniform, FusionNet};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchRole {
    Share,
    Transfer,
}

impl BranchRole {
    pub fn key(self) -> &'static str {
        match self {
            BranchRole::Share => "share",
            BranchRole::Transfer => "transfer",
        }
    }
}

/// Layer selectors. A selector is an exact layer path or a pattern where
/// `*` matches one dot-free path segment (e.g. `blocks.*.mix`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub selectors: Vec<String>,
}

impl InjectionPlan {
    pub fn new<S: Into<String>>(selectors: impl IntoIterator<Item = S>) -> Self {
        Self {
            selectors: selectors.into_iter().map(Into::into).collect(),
        }
    }

    /// Every pointwise layer of the network.
    pub fn all_pointwise() -> Self {
        Self::new(["head", "blocks.*.mix", "tail", "skip"])
    }
}

fn selector_matches(selector: &str, path: &str) -> bool {
    let s: Vec<&str> = selector.split('.').collect();
    let p: Vec<&str> = path.split('.').collect();
    s.len() == p.len() && s.iter().zip(&p).all(|(a, b)| *a == "*" || a == b)
}

/// Resolves a plan against the candidate host layers. Every selector must
/// match at least one host and no host may be matched twice.
pub fn resolve_plan(plan: &InjectionPlan, hosts: &[String]) -> Result<Vec<String>> {
    let mut unresolved = Vec::new();
    let mut picked: Vec<String> = Vec::new();
    for sel in &plan.selectors {
        let matched: Vec<&String> = hosts.iter().filter(|h| selector_matches(sel, h)).collect();
        if matched.is_empty() {
            unresolved.push(sel.clone());
        }
        for m in matched {
            if picked.contains(m) {
                unresolved.push(format!("{sel} (matches {m} twice)"));
            } else {
                picked.push(m.clone());
            }
        }
    }
    if !unresolved.is_empty() {
        return Err(Error::Plan(unresolved));
    }
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub r_s: usize,
    pub r_t: usize,
    /// Whether supervised adaptation also learns the two scale factors.
    pub learn_alpha: bool,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r_s: 1,
            r_t: 64,
            learn_alpha: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub h_in: usize,
    pub h_out: usize,
    pub r_s: usize,
    pub r_t: usize,
}

impl AdapterLayer {
    pub fn param_count(&self) -> usize {
        (self.r_s + self.r_t) * (self.h_in + self.h_out) + 2
    }
}

/// Adapter layout attached to a network. The tensors themselves live in the
/// network's parameter store under `adapters/<layer>/...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub plan: InjectionPlan,
    pub config: AdapterConfig,
    pub layers: BTreeMap<String, AdapterLayer>,
}

impl AdapterSpec {
    pub fn param_count(&self) -> usize {
        self.layers.values().map(AdapterLayer::param_count).sum()
    }
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("adapters/")
}

pub fn is_alpha_param(name: &str) -> bool {
    is_adapter_param(name) && (name.ends_with("/alpha_s") || name.ends_with("/alpha_t"))
}

/// Names trained during supervised adaptation.
pub fn supervised_trainable(spec: &AdapterSpec) -> impl Fn(&str) -> bool + '_ {
    move |name| is_adapter_param(name) && (spec.config.learn_alpha || !is_alpha_param(name))
}

/// Attaches zero-initialized adapters to the layers named by `plan`. The
/// returned network computes exactly the same outputs as `net`.
pub fn inject(net: &FusionNet, plan: &InjectionPlan, cfg: &AdapterConfig) -> Result<FusionNet> {
    if net.adapters.is_some() {
        return Err(Error::Config("network already carries adapters".into()));
    }
    if cfg.r_s == 0 || cfg.r_t == 0 {
        return Err(Error::Config("adapter ranks must be >= 1".into()));
    }
    let hosts = net.config.pointwise_layers();
    let chosen = resolve_plan(plan, &hosts)?;
    let dims: BTreeMap<String, (usize, usize)> = net
        .config
        .layers()
        .into_iter()
        .map(|(name, cin, cout, _)| (name, (cin, cout)))
        .collect();
    let mut out = net.clone();
    let mut layers = BTreeMap::new();
    for layer in chosen {
        let (h_in, h_out) = dims[&layer];
        let r_s = cfg.r_s.min(h_in.min(h_out));
        let r_t = cfg.r_t.max(h_in.max(h_out));
        if r_t != cfg.r_t {
            log::info!("{layer}: transfer rank raised from {} to {r_t}", cfg.r_t);
        }
        for (role, r) in [(BranchRole::Share, r_s), (BranchRole::Transfer, r_t)] {
            let mut rng = substream(cfg.seed, &format!("{layer}/{}", role.key()), 0);
            out.params.insert(
                format!("adapters/{layer}/{}.down", role.key()),
                kaiming_uniform(&[r, h_in, 1, 1], h_in, &mut rng),
            );
            out.params
                .insert(format!("adapters/{layer}/{}.up", role.key()), Tensor::zeros(&[h_out, r, 1, 1]));
        }
        out.params.insert(format!("adapters/{layer}/alpha_s"), Tensor::scalar(1.0));
        out.params.insert(format!("adapters/{layer}/alpha_t"), Tensor::scalar(1.0));
        layers.insert(layer, AdapterLayer { h_in, h_out, r_s, r_t });
    }
    out.adapters = Some(AdapterSpec {
        plan: plan.clone(),
        config: *cfg,
        layers,
    });
    Ok(out)
}

/// A standalone adapted pointwise layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseAdapter {
    /// `[h_out, h_in, 1, 1]`
    pub weight: Tensor,
    /// `[h_out]`
    pub bias: Tensor,
    /// `[r_s, h_in, 1, 1]` and `[h_out, r_s, 1, 1]`
    pub share_down: Tensor,
    pub share_up: Tensor,
    /// `[r_t, h_in, 1, 1]` and `[h_out, r_t, 1, 1]`
    pub transfer_down: Tensor,
    pub transfer_up: Tensor,
    pub alpha_s: f32,
    pub alpha_t: f32,
}

impl PointwiseAdapter {
    /// Pulls one adapted layer out of a network.
    pub fn from_net(net: &FusionNet, layer: &str) -> Result<Self> {
        let get = |k: String| {
            net.params
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::Shape(format!("missing parameter {k}")))
        };
        Ok(Self {
            weight: get(format!("{layer}.weight"))?,
            bias: get(format!("{layer}.bias"))?,
            share_down: get(format!("adapters/{layer}/share.down"))?,
            share_up: get(format!("adapters/{layer}/share.up"))?,
            transfer_down: get(format!("adapters/{layer}/transfer.down"))?,
            transfer_up: get(format!("adapters/{layer}/transfer.up"))?,
            alpha_s: get(format!("adapters/{layer}/alpha_s"))?.item(),
            alpha_t: get(format!("adapters/{layer}/alpha_t"))?.item(),
        })
    }

    /// `W0 x + b + alpha_s U_s V_s x + alpha_t U_t V_t x` on `[N, h_in, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let base = conv2d_forward(x, &self.weight, Some(&self.bias))?;
        let fs = conv2d_forward(&conv2d_forward(x, &self.share_down, None)?, &self.share_up, None)?;
        let ft = conv2d_forward(&conv2d_forward(x, &self.transfer_down, None)?, &self.transfer_up, None)?;
        let data = base
            .data()
            .iter()
            .zip(fs.data())
            .zip(ft.data())
            .map(|((b, s), t)| b + self.alpha_s * s + self.alpha_t * t)
            .collect();
        Tensor::new(base.shape(), data)
    }

    /// `W0 + alpha_s U_s V_s + alpha_t U_t V_t`, accumulated in f64.
    pub fn merged_weight(&self) -> Result<Tensor> {
        let (h_out, h_in, k, _) = self.weight.dims4()?;
        if k != 1 {
            return Err(Error::Config(format!("cannot merge into a {k}x{k} host")));
        }
        let mut w: Vec<f64> = self.weight.data().iter().map(|&v| f64::from(v)).collect();
        for (down, up, alpha) in [
            (&self.share_down, &self.share_up, self.alpha_s),
            (&self.transfer_down, &self.transfer_up, self.alpha_t),
        ] {
            let r = down.shape()[0];
            if down.shape() != [r, h_in, 1, 1] || up.shape() != [h_out, r, 1, 1] {
                return Err(Error::Shape(format!(
                    "branch shapes {:?}/{:?} for host {h_out}x{h_in}",
                    down.shape(),
                    up.shape()
                )));
            }
            let (d, u) = (down.data(), up.data());
            for o in 0..h_out {
                for i in 0..h_in {
                    let s: f64 = (0..r).map(|j| f64::from(u[o * r + j]) * f64::from(d[j * h_in + i])).sum();
                    w[o * h_in + i] += f64::from(alpha) * s;
                }
            }
        }
        Tensor::new(self.weight.shape(), w.into_iter().map(|v| v as f32).collect())
    }
}

/// Folds every adapter into its host and drops the adapter tensors.
pub fn merge(net: &FusionNet) -> Result<FusionNet> {
    let spec = net
        .adapters
        .as_ref()
        .ok_or_else(|| Error::Config("network has no adapters to merge".into()))?;
    let mut out = net.clone();
    for layer in spec.layers.keys() {
        let a = PointwiseAdapter::from_net(net, layer)?;
        out.params.insert(format!("{layer}.weight"), a.merged_weight()?);
    }
    out.params.retain(|k, _| !is_adapter_param(k));
    out.adapters = None;
    Ok(out)
}

/// SHA-256 over the names and bytes of all base parameters.
pub fn base_weight_hash(net: &FusionNet) -> String {
    let mut h = Sha256::new();
    for (name, t) in net.params.iter().filter(|(k, _)| !is_adapter_param(k)) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets every adapter's scale factors.
pub fn set_alphas(net: &mut FusionNet, alpha_s: f32, alpha_t: f32) {
    for (name, t) in net.params.iter_mut() {
        if name.ends_with("/alpha_s") {
            t.data_mut()[0] = alpha_s;
        } else if name.ends_with("/alpha_t") {
            t.data_mut()[0] = alpha_t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionNetConfig;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn hand_layer() -> PointwiseAdapter {
        PointwiseAdapter {
            weight: t(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]),
            bias: Tensor::zeros(&[2]),
            share_down: t(&[1, 2, 1, 1], &[1.0, 1.0]),
            share_up: t(&[2, 1, 1, 1], &[0.5, -0.5]),
            transfer_down: t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 2.0]),
            transfer_up: t(&[2, 2, 1, 1], &[0.0, 1.0, 1.0, 0.0]),
            alpha_s: 2.0,
            alpha_t: 0.5,
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        // x = (1, 0): W0 x = (1, 3); U_s V_s x = (0.5, -0.5); U_t V_t x = (0, 1)
        let a = hand_layer();
        let x = t(&[1, 2, 1, 1], &[1.0, 0.0]);
        let f = a.forward(&x).unwrap();
        assert_eq!(f.data(), &[1.0 + 2.0 * 0.5, 3.0 - 2.0 * 0.5 + 0.5]);
        let w = a.merged_weight().unwrap();
        let merged = conv2d_forward(&x, &w, Some(&a.bias)).unwrap();
        assert_eq!(merged.data(), f.data());
    }

    #[test]
    fn zero_branches_recover_base() {
        let mut a = hand_layer();
        for b in [&mut a.share_up, &mut a.transfer_up] {
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(a.merged_weight().unwrap(), a.weight);
        let mut b = hand_layer();
        b.alpha_s = 0.0;
        b.alpha_t = 0.0;
        let x = t(&[1, 2, 1, 1], &[0.3, -1.2]);
        assert_eq!(
            b.forward(&x).unwrap(),
            conv2d_forward(&x, &b.weight, Some(&b.bias)).unwrap()
        );
    }

    #[test]
    fn injection_counts_and_guards() {
        let cfg = FusionNetConfig {
            base_channels: 8,
            depth: 2,
            ..Default::default()
        };
        let net = FusionNet::new(cfg, 1).unwrap();
        let adapted = inject(&net, &InjectionPlan::all_pointwise(), &AdapterConfig::default()).unwrap();
        let spec = adapted.adapters.as_ref().unwrap();
        // head 18->8, mix 8->8 (x2), tail 8->3, skip 18->3
        let expected: usize = [(18, 8), (8, 8), (8, 8), (8, 3), (18, 3)]
            .iter()
            .map(|(i, o)| (1 + 64) * (i + o) + 2)
            .sum();
        assert_eq!(spec.param_count(), expected);
        assert_eq!(adapted.param_count() - net.param_count(), expected);
        assert!(matches!(
            inject(&adapted, &InjectionPlan::all_pointwise(), &AdapterConfig::default()),
            Err(Error::Config(_))
        ));
        let miss = inject(&net, &InjectionPlan::new(["blocks.0.spatial", "nope"]), &AdapterConfig::default());
        match miss {
            Err(Error::Plan(v)) => assert_eq!(v, vec!["blocks.0.spatial".to_string(), "nope".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            inject(&net, &InjectionPlan::new(["head", "head"]), &AdapterConfig::default()),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn large_layers_raise_transfer_rank() {
        let cfg = FusionNetConfig {
            base_channels: 80,
            depth: 2,
            ..Default::default()
        };
        let net = FusionNet::new(cfg, 0).unwrap();
        let a = inject(&net, &InjectionPlan::new(["head"]), &AdapterConfig::default()).unwrap();
        assert_eq!(a.adapters.unwrap().layers["head"].r_t, 80);
    }

    #[test]
    fn merge_removes_adapters_and_hash_ignores_them() {
        let net = FusionNet::new(FusionNetConfig::default(), 2).unwrap();
        let a = inject(&net, &InjectionPlan::all_pointwise(), &AdapterConfig::default()).unwrap();
        assert_eq!(base_weight_hash(&a), base_weight_hash(&net));
        let m = merge(&a).unwrap();
        assert!(m.adapters.is_none());
        assert_eq!(m, net);
        assert!(merge(&net).is_err());
    }
}
