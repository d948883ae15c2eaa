//! Compact fully convolutional fusion network.
//!
//! Layout: `head` (1x1, 18 -> C) and ReLU; `depth` residual blocks, each a
//! 3x3 `spatial` conv, ReLU and a 1x1 `mix` conv added back to the block
//! input; a 1x1 `tail` (C -> 3) plus a 1x1 `skip` straight from the input,
//! summed and rectified.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSpec;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::bracket::LdrBracket;
use crate::error::{Error, Result};
use crate::image::{HdrImage, ToneMapParams};
use crate::rng::substream;

/// Input channels: per exposure, LDR RGB followed by linearized RGB.
pub const INPUT_CHANNELS: usize = 18;
/// Offset of the middle exposure's linearized channels.
pub const MID_LINEAR_OFFSET: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    #[serde(default)]
    pub tone: ToneMapParams,
}

impl Default for FusionNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 4,
            tone: ToneMapParams::default(),
        }
    }
}

impl FusionNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth {} < 2", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} < 4", self.base_channels)));
        }
        self.tone.validate()
    }

    /// Names of the 1x1 convolutions, i.e. the layers adapters may attach to.
    pub fn pointwise_layers(&self) -> Vec<String> {
        let mut v = vec!["head".to_string()];
        v.extend((0..self.depth).map(|i| format!("blocks.{i}.mix")));
        v.push("tail".into());
        v.push("skip".into());
        v
    }

    /// Every conv layer with its `(in, out, kernel)`.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let c = self.base_channels;
        let mut v = vec![("head".to_string(), INPUT_CHANNELS, c, 1)];
        for i in 0..self.depth {
            v.push((format!("blocks.{i}.spatial"), c, c, 3));
            v.push((format!("blocks.{i}.mix"), c, c, 1));
        }
        v.push(("tail".into(), c, 3, 1));
        v.push(("skip".into(), INPUT_CHANNELS, 3, 1));
        v
    }
}

/// Network weights plus optional adapter branches.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    pub config: FusionNetConfig,
    pub params: ParamStore,
    pub adapters: Option<AdapterSpec>,
}

/// Uniform Kaiming-style initialization: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("consistent shape")
}

/// Per-call forward switches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Overrides every adapter's `(alpha_s, alpha_t)`.
    pub alphas: Option<(f32, f32)>,
}

/// Graph nodes of the parameters used by one forward pass.
pub type ParamVars = BTreeMap<String, Var>;

impl FusionNet {
    /// Random initialization. The skip path starts as an exact copy of the
    /// middle linearized exposure and the tail starts at zero, so a fresh
    /// network outputs that exposure.
    pub fn new(config: FusionNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, cin, cout, k) in config.layers() {
            let mut rng = substream(seed, &name, 0);
            let w = if name == "skip" {
                let mut w = Tensor::zeros(&[cout, cin, 1, 1]);
                for c in 0..3 {
                    w.data_mut()[c * cin + MID_LINEAR_OFFSET + c] = 1.0;
                }
                w
            } else if name == "tail" {
                Tensor::zeros(&[cout, cin, 1, 1])
            } else {
                kaiming_uniform(&[cout, cin, k, k], cin * k * k, &mut rng)
            };
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
        Ok(Self {
            config,
            params,
            adapters: None,
        })
    }

    /// Names of base (non-adapter) parameters.
    pub fn base_param_names(&self) -> Vec<String> {
        self.params.keys().filter(|k| !k.starts_with("adapters/")).cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn var(&self, g: &mut Graph, vars: &mut ParamVars, name: &str, trainable: &dyn Fn(&str) -> bool) -> Result<Var> {
        if let Some(v) = vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        let v = g.leaf(t.clone(), trainable(name));
        vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(
        &self,
        g: &mut Graph,
        vars: &mut ParamVars,
        layer: &str,
        x: Var,
        trainable: &dyn Fn(&str) -> bool,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let w = self.var(g, vars, &format!("{layer}.weight"), trainable)?;
        let b = self.var(g, vars, &format!("{layer}.bias"), trainable)?;
        let mut y = g.conv2d(x, w, Some(b))?;
        let Some(spec) = &self.adapters else { return Ok(y) };
        if !spec.layers.contains_key(layer) {
            return Ok(y);
        }
        for (branch, override_idx) in [("share", 0), ("transfer", 1)] {
            let down = self.var(g, vars, &format!("adapters/{layer}/{branch}.down"), trainable)?;
            let up = self.var(g, vars, &format!("adapters/{layer}/{branch}.up"), trainable)?;
            let alpha = match opts.alphas {
                Some((s, t)) => g.constant(Tensor::scalar(if override_idx == 0 { s } else { t })),
                None => {
                    let suffix = if override_idx == 0 { "alpha_s" } else { "alpha_t" };
                    self.var(g, vars, &format!("adapters/{layer}/{suffix}"), trainable)?
                }
            };
            let h = g.conv2d(x, down, None)?;
            let f = g.conv2d(h, up, None)?;
            let f = g.scale(f, alpha)?;
            y = g.add(y, f)?;
        }
        Ok(y)
    }

    /// Records a forward pass of `input` (`[N, 18, H, W]`) on `g`. Leaves
    /// whose name satisfies `trainable` require gradients.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: Var,
        trainable: &dyn Fn(&str) -> bool,
        opts: ForwardOptions,
    ) -> Result<(Var, ParamVars)> {
        let (_, c, _, _) = g.value(input).dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!("input has {c} channels, expected {INPUT_CHANNELS}")));
        }
        let mut vars = ParamVars::new();
        let h = self.conv(g, &mut vars, "head", input, trainable, opts)?;
        let mut f = g.relu(h);
        for i in 0..self.config.depth {
            let s = self.conv(g, &mut vars, &format!("blocks.{i}.spatial"), f, trainable, opts)?;
            let s = g.relu(s);
            let m = self.conv(g, &mut vars, &format!("blocks.{i}.mix"), s, trainable, opts)?;
            let r = g.add(f, m)?;
            f = g.relu(r);
        }
        let t = self.conv(g, &mut vars, "tail", f, trainable, opts)?;
        let s = self.conv(g, &mut vars, "skip", input, trainable, opts)?;
        let out = g.add(t, s)?;
        Ok((g.relu(out), vars))
    }

    /// Inference on a batch tensor.
    pub fn forward_tensor(&self, input: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let (y, _) = self.forward_graph(&mut g, x, &|_| false, opts)?;
        Ok(g.value(y).clone())
    }

    /// Fuses one bracket into a linear HDR image.
    pub fn forward(&self, bracket: &LdrBracket) -> Result<HdrImage> {
        self.forward_with(bracket, ForwardOptions::default())
    }

    pub fn forward_with(&self, bracket: &LdrBracket, opts: ForwardOptions) -> Result<HdrImage> {
        let y = self.forward_tensor(&bracket_input(bracket)?, opts)?;
        tensor_to_image(&y)
    }
}

/// `[1, 18, H, W]` network input of a bracket.
pub fn bracket_input(b: &LdrBracket) -> Result<Tensor> {
    let (w, h) = (b.width(), b.height());
    for (k, (l, lin)) in b.ldr.iter().zip(&b.linearized).enumerate() {
        if l.width() != w || l.height() != h || lin.width() != w || lin.height() != h {
            return Err(Error::Shape(format!(
                "exposure {k} is {}x{}, bracket is {w}x{h}",
                l.width(),
                l.height()
            )));
        }
    }
    let mut data = Vec::with_capacity(INPUT_CHANNELS * w * h);
    for k in 0..3 {
        let ldr = HdrImage::new(w, h, b.ldr[k].data().to_vec())?;
        data.extend(ldr.to_planar());
        data.extend(b.linearized[k].to_planar());
    }
    Tensor::new(&[1, INPUT_CHANNELS, h, w], data)
}

/// `[1, 3, H, W]` tensor of an image.
pub fn image_tensor(img: &HdrImage) -> Tensor {
    Tensor::new(&[1, 3, img.height(), img.width()], img.to_planar()).expect("consistent shape")
}

/// First batch item of a `[N, 3, H, W]` tensor as an image.
pub fn tensor_to_image(t: &Tensor) -> Result<HdrImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("{c}-channel output")));
    }
    HdrImage::from_planar(w, h, &t.data()[..3 * h * w])
}
