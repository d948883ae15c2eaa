//! Direct 2-D cross-correlation kernels with zero "same" padding.
//! Accumulation is done in f64, in a fixed loop order.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct ConvDims {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

pub(crate) fn conv_dims(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<ConvDims> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, wci, kh, kw) = w.dims4()?;
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::Shape(format!("kernel {kh}x{kw}: only 1x1 and 3x3 are supported")));
    }
    if wci != ci {
        return Err(Error::Shape(format!("input has {ci} channels, weight expects {wci}")));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::Shape(format!("bias shape {:?}, expected [{co}]", b.shape())));
        }
    }
    Ok(ConvDims {
        n,
        ci,
        co,
        h,
        w: wd,
        k: kh,
    })
}

/// Index range `lo..hi` over which `i + d` stays inside `0..len`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let d = conv_dims(x, w, b)?;
    let hw = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0f32; d.n * d.co * hw];
    let mut acc = vec![0f64; hw];
    for n in 0..d.n {
        for co in 0..d.co {
            let bias = b.map_or(0.0, |b| f64::from(b.data()[co]));
            acc.iter_mut().for_each(|a| *a = bias);
            for ci in 0..d.ci {
                let plane = &xs[(n * d.ci + ci) * hw..][..hw];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(d.h, dy);
                    for kx in 0..d.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(d.w, dx);
                        let wv = f64::from(ws[((co * d.ci + ci) * d.k + ky) * d.k + kx]);
                        for y in y0..y1 {
                            let src = &plane[((y as isize + dy) as usize) * d.w..][..d.w];
                            let dst = &mut acc[y * d.w..][..d.w];
                            for xx in x0..x1 {
                                dst[xx] += wv * f64::from(src[(xx as isize + dx) as usize]);
                            }
                        }
                    }
                }
            }
            for (o, a) in out[(n * d.co + co) * hw..][..hw].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Tensor::new(&[d.n, d.co, d.h, d.w], out)
}

/// Gradients `(dx, dw, db)` of a convolution given the output gradient.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(x, w, None)?;
    let hw = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let (xs, ws, gs) = (x.data(), w.data(), gy.data());
    let mut dx = vec![0f32; xs.len()];
    let mut dw = vec![0f64; ws.len()];
    let mut db = vec![0f64; d.co];
    let mut acc = vec![0f64; hw];
    for n in 0..d.n {
        for co in 0..d.co {
            let g = &gs[(n * d.co + co) * hw..][..hw];
            db[co] += g.iter().map(|&v| f64::from(v)).sum::<f64>();
            for ci in 0..d.ci {
                let plane = &xs[(n * d.ci + ci) * hw..][..hw];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(d.h, dy);
                    for kx in 0..d.k {
                        let dxo = kx as isize - pad;
                        let (x0, x1) = valid_range(d.w, dxo);
                        let mut s = 0f64;
                        for y in y0..y1 {
                            let src = &plane[((y as isize + dy) as usize) * d.w..][..d.w];
                            let gr = &g[y * d.w..][..d.w];
                            for xx in x0..x1 {
                                s += f64::from(gr[xx]) * f64::from(src[(xx as isize + dxo) as usize]);
                            }
                        }
                        dw[((co * d.ci + ci) * d.k + ky) * d.k + kx] += s;
                    }
                }
            }
        }
        for ci in 0..d.ci {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for co in 0..d.co {
                let g = &gs[(n * d.co + co) * hw..][..hw];
                for ky in 0..d.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(d.h, dy);
                    for kx in 0..d.k {
                        let dxo = kx as isize - pad;
                        let (x0, x1) = valid_range(d.w, dxo);
                        let wv = f64::from(ws[((co * d.ci + ci) * d.k + ky) * d.k + kx]);
                        for y in y0..y1 {
                            let gr = &g[y * d.w..][..d.w];
                            let dst = &mut acc[((y as isize + dy) as usize) * d.w..][..d.w];
                            for xx in x0..x1 {
                                dst[(xx as isize + dxo) as usize] += wv * f64::from(gr[xx]);
                            }
                        }
                    }
                }
            }
            for (o, a) in dx[(n * d.ci + ci) * hw..][..hw].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(&[d.co], db.into_iter().map(|v| v as f32).collect())?,
    ))
}
