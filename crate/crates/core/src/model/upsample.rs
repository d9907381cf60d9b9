//! Convex upsampling: every fine pixel is a softmax-weighted mix of the 3×3
//! coarse neighbourhood of its parent cell.
//!
//! Mask channel `k·f² + dy·f + dx` holds the logit of neighbour `k` (row-major
//! over the 3×3 window) for sub-pixel `(dy, dx)`. Neighbours past the border are
//! clamped to the edge so a constant field stays constant everywhere.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensors::Tensor;

fn check(x: &Tensor, mask: &Tensor, factor: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    let (mc, mh, mw) = mask.dims3()?;
    if factor == 0 {
        return Err(shape_err!("upsampling factor must be positive"));
    }
    if mc != 9 * factor * factor {
        return Err(shape_err!("mask has {} channels, factor {} needs {}", mc, factor, 9 * factor * factor));
    }
    if (mh, mw) != (h, w) {
        return Err(shape_err!("mask {}x{} does not match field {}x{}", mh, mw, h, w));
    }
    Ok((c, h, w))
}

#[inline]
fn neighbours(h: usize, w: usize, y: usize, x: usize) -> [usize; 9] {
    let mut idx = [0usize; 9];
    for ky in 0..3 {
        let ny = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
        for kx in 0..3 {
            let nx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
            idx[ky * 3 + kx] = ny * w + nx;
        }
    }
    idx
}

#[inline]
fn weights_at(mask: &[f32], hw: usize, f2: usize, sub: usize, pix: usize) -> [f32; 9] {
    let mut wts = [0.0f32; 9];
    let mut max = f32::NEG_INFINITY;
    for (k, wk) in wts.iter_mut().enumerate() {
        *wk = mask[(k * f2 + sub) * hw + pix];
        max = max.max(*wk);
    }
    let mut sum = 0.0;
    for wk in wts.iter_mut() {
        *wk = (*wk - max).exp();
        sum += *wk;
    }
    for wk in wts.iter_mut() {
        *wk /= sum;
    }
    wts
}

/// Softmax weights of every fine pixel: `9 × (f·h) × (f·w)`.
pub fn convex_weights(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (mc, h, w) = mask.dims3()?;
    if mc != 9 * factor * factor {
        return Err(shape_err!("mask has {} channels, factor {} needs {}", mc, factor, 9 * factor * factor));
    }
    let (fh, fw, f2, hw) = (h * factor, w * factor, factor * factor, h * w);
    let mut out = vec![0.0f32; 9 * fh * fw];
    for y in 0..h {
        for x in 0..w {
            for dy in 0..factor {
                for dx in 0..factor {
                    let wts = weights_at(mask.data(), hw, f2, dy * factor + dx, y * w + x);
                    let fine = (y * factor + dy) * fw + x * factor + dx;
                    for k in 0..9 {
                        out[k * fh * fw + fine] = wts[k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![9, fh, fw], out)
}

/// Lifts `x` (`C×H×W`) to `C×fH×fW`, multiplying values by `value_scale`.
pub fn convex_upsample(x: &Tensor, mask: &Tensor, factor: usize, value_scale: f32) -> Result<Tensor> {
    let (c, h, w) = check(x, mask, factor)?;
    let (fh, fw, f2, hw) = (h * factor, w * factor, factor * factor, h * w);
    let src = x.data();
    let mut out = vec![0.0f32; c * fh * fw];
    for y in 0..h {
        for xx in 0..w {
            let pix = y * w + xx;
            let nb = neighbours(h, w, y, xx);
            for dy in 0..factor {
                for dx in 0..factor {
                    let wts = weights_at(mask.data(), hw, f2, dy * factor + dx, pix);
                    let fine = (y * factor + dy) * fw + xx * factor + dx;
                    for ch in 0..c {
                        let plane = &src[ch * hw..(ch + 1) * hw];
                        // centre + Σ w_k (v_k − centre): equals Σ w_k v_k, and is
                        // exact for a constant neighbourhood.
                        let centre = value_scale * plane[nb[4]];
                        let mut acc = 0.0f32;
                        for k in 0..9 {
                            acc += wts[k] * (value_scale * plane[nb[k]] - centre);
                        }
                        out[ch * fh * fw + fine] = centre + acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, fh, fw], out)
}

/// Gradients of [`convex_upsample`] with respect to the field and the mask logits.
pub fn convex_upsample_backward(
    x: &Tensor,
    mask: &Tensor,
    factor: usize,
    value_scale: f32,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check(x, mask, factor)?;
    let (fh, fw, f2, hw) = (h * factor, w * factor, factor * factor, h * w);
    let src = x.data();
    let g = grad_out.data();
    let mut dx_field = vec![0.0f32; c * hw];
    let mut dmask = vec![0.0f32; 9 * f2 * hw];
    for y in 0..h {
        for xx in 0..w {
            let pix = y * w + xx;
            let nb = neighbours(h, w, y, xx);
            for dy in 0..factor {
                for dx in 0..factor {
                    let sub = dy * factor + dx;
                    let wts = weights_at(mask.data(), hw, f2, sub, pix);
                    let fine = (y * factor + dy) * fw + xx * factor + dx;
                    // dL/dw_k = Σ_c g_c · s·(x_c(k) − x_c(centre))
                    let mut dw = [0.0f32; 9];
                    for ch in 0..c {
                        let gc = g[ch * fh * fw + fine];
                        if gc == 0.0 {
                            continue;
                        }
                        let plane = &src[ch * hw..(ch + 1) * hw];
                        let dplane = &mut dx_field[ch * hw..(ch + 1) * hw];
                        let centre = plane[nb[4]];
                        let mut off_centre = 0.0f32;
                        for k in 0..9 {
                            dw[k] += gc * value_scale * (plane[nb[k]] - centre);
                            if k != 4 {
                                dplane[nb[k]] += gc * value_scale * wts[k];
                                off_centre += wts[k];
                            }
                        }
                        dplane[nb[4]] += gc * value_scale * (1.0 - off_centre);
                    }
                    let dot: f32 = (0..9).map(|k| wts[k] * dw[k]).sum();
                    for k in 0..9 {
                        dmask[(k * f2 + sub) * hw + pix] += wts[k] * (dw[k] - dot);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx_field)?,
        Tensor::new(mask.shape().to_vec(), dmask)?,
    ))
}

impl Tape {
    pub fn convex_upsample(&self, x: &Var, mask: &Var, factor: usize, value_scale: f32) -> Result<Var> {
        let out = convex_upsample(x.value(), mask.value(), factor, value_scale)?;
        let (xv, mv) = (x.arc(), mask.arc());
        Ok(self.record(out, &[x, mask], move |g| {
            let (dx, dm) = convex_upsample_backward(&xv, &mv, factor, value_scale, g)?;
            Ok(vec![Some(dx), Some(dm)])
        }))
    }
}
