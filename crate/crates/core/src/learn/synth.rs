//! Synthetic frame triplets with exact ground-truth flow.
//!
//! Frames are samples of one continuous texture (a sum of coloured Gaussian
//! blobs). The centre frame sees it directly; a neighbour frame at pixel `y`
//! shows the texture at the point `x` that the flow carries onto `y`, found by
//! fixed-point iteration of `x = y − f(x)`. No resampling of pixel grids is
//! involved, so the flows are exact up to the solver tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensors::{sample_plane, Tensor};

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// `[I_{t−1}, I_t, I_{t+1}]`, each `3×H×W` in `[0, 1]`.
    pub frames: [Tensor; 3],
    /// `f_{t→t−1}`, `2×H×W`.
    pub flow_prev: Tensor,
    /// `f_{t→t+1}`, `2×H×W`.
    pub flow_next: Tensor,
    pub seed: u64,
}

struct Blob {
    cx: f32,
    cy: f32,
    inv: f32,
    reach2: f32,
    color: [f32; 3],
}

struct Texture {
    blobs: Vec<Blob>,
}

impl Texture {
    fn random(h: usize, w: usize, margin: f32, rng: &mut ChaCha8Rng) -> Self {
        let area = (h as f32 + 2.0 * margin) * (w as f32 + 2.0 * margin);
        let count = (area / 24.0).ceil() as usize;
        let blobs = (0..count)
            .map(|_| {
                let s: f32 = rng.random_range(1.5..4.0);
                Blob {
                    cx: rng.random_range(-margin..w as f32 + margin),
                    cy: rng.random_range(-margin..h as f32 + margin),
                    inv: 1.0 / (2.0 * s * s),
                    reach2: 16.0 * s * s,
                    color: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
                }
            })
            .collect();
        Texture { blobs }
    }

    fn eval(&self, x: f32, y: f32) -> [f32; 3] {
        let mut c = [0.5f32; 3];
        for b in &self.blobs {
            let d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
            if d2 < b.reach2 {
                let g = (-d2 * b.inv).exp();
                for (ci, bc) in c.iter_mut().zip(b.color) {
                    *ci += bc * g;
                }
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Smooth field: a translation plus a few broad Gaussian bumps per component.
struct SmoothFlow {
    base: [f32; 2],
    bumps: Vec<(f32, f32, f32, [f32; 2])>,
    gain: f32,
}

impl SmoothFlow {
    fn random(h: usize, w: usize, max_disp: f32, rng: &mut ChaCha8Rng) -> Self {
        let span = h.min(w) as f32;
        let bumps = (0..4)
            .map(|_| {
                let s = rng.random_range(0.5 * span..span);
                (
                    rng.random_range(0.0..w as f32),
                    rng.random_range(0.0..h as f32),
                    1.0 / (2.0 * s * s),
                    [rng.random_range(-0.5..0.5f32), rng.random_range(-0.5..0.5f32)],
                )
            })
            .collect();
        let mut f = SmoothFlow { base: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], bumps, gain: 1.0 };
        if max_disp == 0.0 {
            f.gain = 0.0;
            return f;
        }
        let mut peak = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                let v = f.eval(x as f32, y as f32);
                peak = peak.max(v[0].abs()).max(v[1].abs());
            }
        }
        f.gain = rng.random_range(0.5..1.0) * max_disp / peak.max(1e-6);
        f
    }

    fn eval(&self, x: f32, y: f32) -> [f32; 2] {
        let mut v = self.base;
        for &(cx, cy, inv, a) in &self.bumps {
            let g = (-((x - cx) * (x - cx) + (y - cy) * (y - cy)) * inv).exp();
            v[0] += a[0] * g;
            v[1] += a[1] * g;
        }
        [v[0] * self.gain, v[1] * self.gain]
    }

    fn field(&self, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(&[2, h, w]);
        let d = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                let v = self.eval(x as f32, y as f32);
                d[y * w + x] = v[0];
                d[h * w + y * w + x] = v[1];
            }
        }
        t
    }
}

fn render(tex: &Texture, h: usize, w: usize, flow: Option<&SmoothFlow>) -> Tensor {
    let mut img = Tensor::zeros(&[3, h, w]);
    let d = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f32, x as f32);
            let (mut sx, mut sy) = (px, py);
            if let Some(f) = flow {
                // solve s + f(s) = p
                for _ in 0..50 {
                    let v = f.eval(sx, sy);
                    let (nx, ny) = (px - v[0], py - v[1]);
                    let done = (nx - sx).abs() < 1e-5 && (ny - sy).abs() < 1e-5;
                    (sx, sy) = (nx, ny);
                    if done {
                        break;
                    }
                }
            }
            let c = tex.eval(sx, sy);
            for ch in 0..3 {
                d[ch * h * w + y * w + x] = c[ch];
            }
        }
    }
    img
}

/// Random triplet of size `h × w` with displacements bounded by `max_disp`.
pub fn make_synth(seed: u64, dims: (usize, usize), max_disp: f32) -> Result<SynthSample> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::Param("synthetic frames need positive dims".into()));
    }
    if !(max_disp >= 0.0 && max_disp < h.min(w) as f32 / 4.0) {
        return Err(Error::Param(format!("max_disp {max_disp} must be below min(H, W)/4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::random(h, w, max_disp + 8.0, &mut rng);
    let fp = SmoothFlow::random(h, w, max_disp, &mut rng);
    let fn_ = SmoothFlow::random(h, w, max_disp, &mut rng);
    Ok(SynthSample {
        frames: [render(&tex, h, w, Some(&fp)), render(&tex, h, w, None), render(&tex, h, w, Some(&fn_))],
        flow_prev: fp.field(h, w),
        flow_next: fn_.field(h, w),
        seed,
    })
}

/// PSNR (dB) of the centre frame against `frame` backward-warped by `flow`,
/// over pixels whose target stays inside the image.
pub fn warp_psnr(centre: &Tensor, frame: &Tensor, flow: &Tensor) -> Result<f64> {
    let (_, h, w) = centre.dims3()?;
    let mut se = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = (x as f32 + flow.at3(0, y, x), y as f32 + flow.at3(1, y, x));
            if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f32 || ty > (h - 1) as f32 {
                continue;
            }
            for c in 0..3 {
                let v = sample_plane(frame.plane(c), h, w, tx, ty);
                let e = (v - centre.at3(c, y, x)) as f64;
                se += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Param("no valid pixels to compare".into()));
    }
    let mse = se / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
