//! Flow-warping temporal consistency error.

use crate::error::{Error, Result};
use crate::image::HdrImage;
use crate::scene::{FlowField, Mask, SceneSequence};

/// Bilinear sample with edge clamping.
fn sample(img: &HdrImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let p = |xx, yy| img.pixel(xx, yy).map(f64::from);
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    [0, 1, 2].map(|k| {
        (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k])
    })
}

/// `next` warped back onto the grid of the previous frame by `flow`.
pub fn backward_warp(next: &HdrImage, flow: &FlowField) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(flow.width * flow.height);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (dx, dy) = flow.at(x, y);
            out.push(sample(next, x as f64 + f64::from(dx), y as f64 + f64::from(dy)));
        }
    }
    out
}

/// Masked mean squared error for one pair, or `None` if fully occluded.
pub fn pair_warp_error(prev: &HdrImage, next: &HdrImage, flow: &FlowField, mask: &Mask) -> Option<f64> {
    let warped = backward_warp(next, flow);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, w) in warped.iter().enumerate() {
        if mask.data[i] == 0 {
            continue;
        }
        let p = prev.pixel(i % flow.width, i / flow.width);
        num += (0..3).map(|c| (f64::from(p[c]) - w[c]).powi(2)).sum::<f64>();
        den += 1.0;
    }
    (den > 0.0).then(|| num / den)
}

/// Average of per-pair masked errors over all pairs that have at least one
/// visible pixel.
pub fn warp_error(seq: &SceneSequence, video: &[HdrImage]) -> Result<f64> {
    if video.len() != seq.frames.len() {
        return Err(Error::Shape(format!(
            "video has {} frames, sequence has {}",
            video.len(),
            seq.frames.len()
        )));
    }
    if video.len() < 2 {
        return Err(Error::Input("need at least two frames".into()));
    }
    let (w, h) = (seq.spec.width, seq.spec.height);
    if let Some(f) = video.iter().find(|f| f.width() != w || f.height() != h) {
        return Err(Error::Shape(format!("frame {}x{} vs flow {w}x{h}", f.width(), f.height())));
    }
    let mut errors = Vec::new();
    for t in 0..video.len() - 1 {
        match pair_warp_error(&video[t], &video[t + 1], &seq.flow[t], &seq.occlusion[t]) {
            Some(e) => errors.push(e),
            None => log::warn!("pair {t} fully occluded, skipped"),
        }
    }
    if errors.is_empty() {
        return Err(Error::Input("every frame pair is fully occluded".into()));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_sequence, Background, SceneSpec};

    #[test]
    fn static_video_zero_error() {
        let seq = generate_sequence(&SceneSpec::still(8, 8, 3, Background::GradientSky, 0)).unwrap();
        assert_eq!(warp_error(&seq, &seq.frames).unwrap(), 0.0);
    }

    #[test]
    fn all_occluded_is_error() {
        let mut seq = generate_sequence(&SceneSpec::still(8, 8, 3, Background::GradientSky, 0)).unwrap();
        for m in &mut seq.occlusion {
            m.data.iter_mut().for_each(|v| *v = 0);
        }
        assert!(matches!(warp_error(&seq, &seq.frames), Err(Error::Input(_))));
    }

    #[test]
    fn integer_flow_samples_exactly() {
        let img = HdrImage::from_fn(4, 4, |x, y| [(x + 4 * y) as f32, 0.0, 1.0]);
        let flow = FlowField {
            width: 4,
            height: 4,
            data: [1.0f32, 0.0].repeat(16),
        };
        let w = backward_warp(&img, &flow);
        assert_eq!(w[0], [1.0, 0.0, 1.0]);
        assert_eq!(w[3], [3.0, 0.0, 1.0]);
    }
}
