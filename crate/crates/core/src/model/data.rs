//! Training samples built from brackets, with patch cropping and dihedral
//! augmentation.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::net::{bracket_input, image_tensor};
use crate::autodiff::Tensor;
use crate::bracket::{bracket_from_raw, import_bracket, BracketConfig, LdrBracket};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scene::{import_sequence, DatasetManifest};

/// Network input and target of one bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 18, H, W]`
    pub input: Tensor,
    /// `[1, 3, H, W]`
    pub target: Tensor,
}

impl Sample {
    pub fn from_bracket(b: &LdrBracket) -> Result<Self> {
        Ok(Self {
            input: bracket_input(b)?,
            target: image_tensor(&b.gt),
        })
    }

    pub fn height(&self) -> usize {
        self.input.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[3]
    }
}

/// Loads one bracket per manifest entry. Entries pointing at a bracket
/// directory (`meta.json`) are read as-is; entries pointing at a sequence
/// directory (`spec.json`) are synthesized with a per-entry seed.
pub fn load_brackets(manifest: &DatasetManifest, cfg: &BracketConfig) -> Result<Vec<LdrBracket>> {
    load_brackets_with(manifest, &|_| cfg)
}

/// Like [`load_brackets`], picking the synthesis config by domain tag.
pub fn load_brackets_with<'a>(
    manifest: &DatasetManifest,
    pick: &(dyn Fn(&str) -> &'a BracketConfig + Sync),
) -> Result<Vec<LdrBracket>> {
    if manifest.is_empty() {
        return Err(Error::Input("manifest lists no entries".into()));
    }
    manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| load_entry(&manifest.resolve(e), pick(&e.domain), i))
        .collect()
}

fn load_entry(dir: &Path, cfg: &BracketConfig, index: usize) -> Result<LdrBracket> {
    if dir.join("meta.json").exists() {
        import_bracket(dir)
    } else if dir.join("spec.json").exists() {
        let seq = import_sequence(dir)?;
        let cfg = BracketConfig {
            seed: derive_seed(cfg.seed, "bracket", index as u64),
            ..cfg.clone()
        };
        bracket_from_raw(&seq, &cfg)
    } else {
        Err(Error::Input(format!("{} is neither a bracket nor a sequence directory", dir.display())))
    }
}

pub fn samples_from_brackets(brackets: &[LdrBracket]) -> Result<Vec<Sample>> {
    brackets.iter().map(Sample::from_bracket).collect()
}

/// Crops `[.., y0..y0+size, x0..x0+size]` of every channel.
pub fn crop(t: &Tensor, x0: usize, y0: usize, size_w: usize, size_h: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if x0 + size_w > w || y0 + size_h > h {
        return Err(Error::Shape(format!("crop {size_w}x{size_h}+{x0}+{y0} of {w}x{h}")));
    }
    let mut out = Vec::with_capacity(n * c * size_w * size_h);
    for p in 0..n * c {
        for y in y0..y0 + size_h {
            out.extend_from_slice(&t.data()[(p * h + y) * w + x0..][..size_w]);
        }
    }
    Tensor::new(&[n, c, size_h, size_w], out)
}

/// One of the eight dihedral transforms: bit 0 flips horizontally, bit 1
/// vertically, bit 2 transposes (square inputs only; ignored otherwise).
pub fn dihedral(t: &Tensor, op: u8) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let transpose = op & 4 != 0 && h == w;
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for p in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
                if op & 1 != 0 {
                    sx = w - 1 - sx;
                }
                if op & 2 != 0 {
                    sy = h - 1 - sy;
                }
                out[(p * oh + y) * ow + x] = src[(p * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Stacks equally shaped `[1, C, H, W]` tensors along the batch axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!("batch of {:?} and {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), c, h, w], data)
}

/// Random patch (or the whole frame) with an optional random dihedral
/// transform, applied identically to input and target.
pub fn random_view(s: &Sample, patch: Option<usize>, augment: bool, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let (h, w) = (s.height(), s.width());
    let (pw, ph) = match patch {
        Some(p) => (p.min(w), p.min(h)),
        None => (w, h),
    };
    let x0 = rng.random_range(0..=w - pw);
    let y0 = rng.random_range(0..=h - ph);
    let op: u8 = if augment { rng.random_range(0..8) } else { 0 };
    Ok((
        dihedral(&crop(&s.input, x0, y0, pw, ph)?, op)?,
        dihedral(&crop(&s.target, x0, y0, pw, ph)?, op)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_ops() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dihedral(&t, 0).unwrap(), t);
        assert_eq!(dihedral(&t, 1).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(dihedral(&t, 2).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(dihedral(&t, 4).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::new(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let c = crop(&t, 1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let s = stack(&[c.clone(), c]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
    }
}
