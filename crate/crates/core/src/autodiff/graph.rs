//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is always a
//! topological order and `backward` is a single reverse sweep.

use super::conv::{conv2d_backward, conv2d_forward};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Add(Var, Var),
    MulScalar(Var, f32),
    /// Tensor times a one-element variable.
    Scale { x: Var, s: Var },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    FlipH(Var),
    FlipV(Var),
    MuLaw { x: Var, mu: f64 },
    L1 { pred: Var, target: Var },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn flip(t: &Tensor, horizontal: bool) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[(p * h + y) * w + x] = src[(p * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// Copies channels `start..start + len` of every batch item.
fn slice_channels_raw(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if start + len > c || len == 0 {
        return Err(Error::Shape(format!("channel slice {start}..{} of {c}", start + len)));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&t.data()[(b * c + start) * hw..][..len * hw]);
    }
    Tensor::new(&[n, len, h, w], out)
}

fn mu_law_value(x: f32, mu: f64) -> f32 {
    ((mu * f64::from(x.max(0.0))).ln_1p() / mu.ln_1p()) as f32
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients accumulate into leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, "add")?;
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul_scalar(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::MulScalar(x, k), &[x])
    }

    /// `s * x` where `s` is a one-element variable.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!("scale factor has shape {:?}", self.value(s).shape())));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::Scale { x, s }, &[x, s]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!("concat of {:?} with {:?}", self.value(*first).shape(), self.value(*p).shape())));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * hw..][..c * hw]);
            }
        }
        let t = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = slice_channels_raw(self.value(x), start, len)?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    pub fn flip_h(&mut self, x: Var) -> Result<Var> {
        let out = flip(self.value(x), true)?;
        Ok(self.push(out, Op::FlipH(x), &[x]))
    }

    pub fn flip_v(&mut self, x: Var) -> Result<Var> {
        let out = flip(self.value(x), false)?;
        Ok(self.push(out, Op::FlipV(x), &[x]))
    }

    /// μ-law compression. Negative inputs are clamped to 0 and pass no
    /// gradient.
    pub fn mu_law(&mut self, x: Var, mu: f64) -> Var {
        let out = self.value(x).map(|v| mu_law_value(v, mu));
        self.push(out, Op::MuLaw { x, mu }, &[x])
    }

    /// Mean absolute error. The subgradient at zero difference is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.same_shape(t, "l1_loss")?;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| f64::from(a - b).abs()).sum();
        let out = Tensor::scalar((s / p.numel() as f64) as f32);
        Ok(self.push(out, Op::L1 { pred, target }, &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a one-element `loss`. Gradients are added to any
    /// gradient already stored on the leaves; call [`Graph::zero_grad`] to
    /// start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match op {
                Op::Leaf => {
                    match &mut self.nodes[i].grad {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = conv2d_backward(self.value(x), self.value(w), &g)?;
                    send(x, dx, &mut grads);
                    send(w, dw, &mut grads);
                    if let Some(b) = b {
                        send(b, db, &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(x).data();
                    let d: Vec<f32> = g.data().iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    let t = Tensor::new(g.shape(), d)?;
                    send(x, t, &mut grads);
                }
                Op::Add(a, b) => {
                    send(a, g.clone(), &mut grads);
                    send(b, g, &mut grads);
                }
                Op::MulScalar(x, k) => send(x, g.map(|v| v * k), &mut grads),
                Op::Scale { x, s } => {
                    let k = self.value(s).item();
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(a, b)| f64::from(*a) * f64::from(*b))
                        .sum();
                    let ds = Tensor::new(self.value(s).shape(), vec![ds as f32])?;
                    send(x, g.map(|v| v * k), &mut grads);
                    send(s, ds, &mut grads);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(p).shape()[1];
                        send(p, slice_channels_raw(&g, start, c)?, &mut grads);
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let (n, c, h, w) = self.value(x).dims4()?;
                    let len = g.shape()[1];
                    let hw = h * w;
                    let mut d = vec![0f32; n * c * hw];
                    for b in 0..n {
                        d[(b * c + start) * hw..][..len * hw].copy_from_slice(&g.data()[b * len * hw..][..len * hw]);
                    }
                    send(x, Tensor::new(&[n, c, h, w], d)?, &mut grads);
                }
                Op::FlipH(x) => send(x, flip(&g, true)?, &mut grads),
                Op::FlipV(x) => send(x, flip(&g, false)?, &mut grads),
                Op::MuLaw { x, mu } => {
                    let denom = mu.ln_1p();
                    let d: Vec<f32> = g
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(g, &v)| {
                            if v < 0.0 {
                                0.0
                            } else {
                                (f64::from(*g) * mu / ((1.0 + mu * f64::from(v)) * denom)) as f32
                            }
                        })
                        .collect();
                    send(x, Tensor::new(g.shape(), d)?, &mut grads);
                }
                Op::L1 { pred, target } => {
                    let (p, t) = (self.value(pred), self.value(target));
                    let k = g.item() / p.numel() as f32;
                    let d: Vec<f32> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| {
                            let diff = a - b;
                            if diff > 0.0 {
                                k
                            } else if diff < 0.0 {
                                -k
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let dp = Tensor::new(p.shape(), d)?;
                    send(target, dp.map(|v| -v), &mut grads);
                    send(pred, dp, &mut grads);
                }
                Op::Sum(x) => {
                    let k = g.item();
                    send(x, Tensor::full(self.value(x).shape(), k), &mut grads);
                }
            }
        }
        Ok(())
    }
}
