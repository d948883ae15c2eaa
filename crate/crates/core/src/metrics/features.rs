//! Per-image diversity statistics. All but DR expect an image already in
//! the `[0, 1]` working range and are reported in percent.

use serde::{Deserialize, Serialize};

use crate::image::{luminance, robust_max, to_working_range, HdrImage, Luminance};
use crate::stats::{mean_std, quantile_sorted};

/// Highlight threshold on normalized luminance.
pub const HIGHLIGHT_THRESHOLD: f64 = 0.8;
/// Offset added to luminance before taking logs in DR.
pub const DR_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub fhlp: f64,
    pub ehl: f64,
    pub si: f64,
    pub cf: f64,
    pub stdl: f64,
    pub all: f64,
    pub dr: f64,
}

impl FeatureVector {
    pub const NAMES: [&'static str; 7] = ["FHLP", "EHL", "SI", "CF", "stdL", "ALL", "DR"];

    pub fn to_array(&self) -> [f64; 7] {
        [self.fhlp, self.ehl, self.si, self.cf, self.stdl, self.all, self.dr]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            fhlp: a[0],
            ehl: a[1],
            si: a[2],
            cf: a[3],
            stdl: a[4],
            all: a[5],
            dr: a[6],
        }
    }
}

/// Dynamic range in log10 units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicRange {
    pub value: f64,
    /// Set when the image has no positive luminance.
    pub degenerate: bool,
}

pub fn dr(img: &HdrImage) -> DynamicRange {
    dr_with_epsilon(img, DR_EPSILON)
}

pub fn dr_with_epsilon(img: &HdrImage, eps: f64) -> DynamicRange {
    let mut l: Vec<f64> = luminance(img).data.into_iter().map(|v| v + eps).collect();
    if !l.iter().any(|&v| v - eps > 0.0) {
        return DynamicRange {
            value: 0.0,
            degenerate: true,
        };
    }
    l.sort_by(f64::total_cmp);
    let hi = quantile_sorted(&l, 0.98);
    let lo = quantile_sorted(&l, 0.02);
    let value = if lo > 0.0 { (hi.log10() - lo.log10()).max(0.0) } else { f64::INFINITY };
    DynamicRange {
        value,
        degenerate: false,
    }
}

pub fn fhlp(img: &HdrImage) -> f64 {
    let l = luminance(img).data;
    100.0 * l.iter().filter(|&&v| v > HIGHLIGHT_THRESHOLD).count() as f64 / l.len() as f64
}

pub fn ehl(img: &HdrImage) -> f64 {
    let l = luminance(img).data;
    100.0 * l.iter().map(|&v| (v - HIGHLIGHT_THRESHOLD).max(0.0)).sum::<f64>() / l.len() as f64
}

fn sobel_magnitudes(l: &Luminance) -> Vec<f64> {
    let (w, h) = (l.width, l.height);
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| l.at((x as isize + dx) as usize, (y as isize + dy) as usize);
            let gx = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
            let gy = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Standard deviation of the Sobel gradient magnitude over interior pixels.
pub fn si(img: &HdrImage) -> f64 {
    let g = sobel_magnitudes(&luminance(img));
    if g.is_empty() {
        return 0.0;
    }
    100.0 * mean_std(&g).1
}

/// Hasler-Süsstrunk colorfulness.
pub fn cf(img: &HdrImage) -> f64 {
    let (rg, yb): (Vec<f64>, Vec<f64>) = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let (r, g, b) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
            (r - g, 0.5 * (r + g) - b)
        })
        .unzip();
    let (m_rg, s_rg) = mean_std(&rg);
    let (m_yb, s_yb) = mean_std(&yb);
    100.0 * ((s_rg * s_rg + s_yb * s_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt())
}

pub fn stdl(img: &HdrImage) -> f64 {
    100.0 * mean_std(&luminance(img).data).1
}

pub fn all(img: &HdrImage) -> f64 {
    100.0 * mean_std(&luminance(img).data).0
}

/// Normalizes `img` by its robust maximum and computes all seven metrics.
/// DR is taken on the unclipped radiance.
pub fn feature_vector(img: &HdrImage) -> FeatureVector {
    let n = to_working_range(img, robust_max(std::slice::from_ref(img)));
    FeatureVector {
        fhlp: fhlp(&n),
        ehl: ehl(&n),
        si: si(&n),
        cf: cf(&n),
        stdl: stdl(&n),
        all: all(&n),
        dr: dr(img).value,
    }
}
