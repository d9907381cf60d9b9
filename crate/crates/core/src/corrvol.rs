//! All-pairs correlation volumes: construction, pyramid pooling, axis reversal,
//! windowed lookup and closed-form memory accounting.
//!
//! A level-`l` volume between feature maps of spatial size `h × w` is stored as a
//! rank-3 tensor `(h·w) × ceil(h/2^l) × ceil(w/2^l)`: one target map per source
//! pixel. Pooling only touches the target dims.

use std::cell::Cell;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensors::{avg_pool2d, gemm, sample_plane, sample_plane_slope, scatter_plane, Tensor};

thread_local! {
    static LIVE_VOLUME_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_VOLUME_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Bytes held by live [`CorrelationPyramid`]s on this thread.
pub fn live_volume_bytes() -> usize {
    LIVE_VOLUME_BYTES.with(Cell::get)
}

pub fn peak_volume_bytes() -> usize {
    PEAK_VOLUME_BYTES.with(Cell::get)
}

pub fn reset_peak_volume_bytes() {
    let live = live_volume_bytes();
    PEAK_VOLUME_BYTES.with(|p| p.set(live));
}

fn feature_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    f.dims3()
}

/// Level-0 volume: entry `(u, v)` is `<F_a(u), F_b(v)>`, times `1/sqrt(D_f)` when `normalize`.
pub fn build_base(fa: &Tensor, fb: &Tensor, normalize: bool) -> Result<Tensor> {
    let (d, h, w) = feature_dims(fa)?;
    if fb.shape() != fa.shape() {
        return Err(shape_err!("feature shapes differ: {:?} vs {:?}", fa.shape(), fb.shape()));
    }
    let n = h * w;
    let mut out = vec![0.0f32; n * n];
    // Each entry sums over d in the same order regardless of operand roles,
    // so (u, v) and the reversed pair (v, u) of the swapped call are bit-identical.
    gemm(n, d, n, fa.data(), (1, n as isize), fb.data(), (n as isize, 1), 0.0, &mut out);
    if normalize && d > 0 {
        let s = 1.0 / (d as f32).sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(vec![n, h, w], out)
}

fn norm_factor(d: usize, normalize: bool) -> f32 {
    if normalize && d > 0 {
        1.0 / (d as f32).sqrt()
    } else {
        1.0
    }
}

/// Correlation volume plus its pooled levels.
pub struct CorrelationPyramid {
    levels: Vec<Arc<Tensor>>,
    src_h: usize,
    src_w: usize,
    bytes: usize,
}

impl CorrelationPyramid {
    fn from_levels(levels: Vec<Tensor>, src_h: usize, src_w: usize) -> Self {
        let bytes = levels.iter().map(Tensor::bytes).sum();
        LIVE_VOLUME_BYTES.with(|live| {
            let now = live.get() + bytes;
            live.set(now);
            PEAK_VOLUME_BYTES.with(|p| p.set(p.get().max(now)));
        });
        CorrelationPyramid { levels: levels.into_iter().map(Arc::new).collect(), src_h, src_w, bytes }
    }

    pub fn levels(&self) -> &[Arc<Tensor>] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn base(&self) -> &Tensor {
        &self.levels[0]
    }

    /// Spatial size of the source feature map.
    pub fn source_dims(&self) -> (usize, usize) {
        (self.src_h, self.src_w)
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    /// Releases the pooled levels and hands back the base volume.
    pub fn into_base(mut self) -> Tensor {
        let base = self.levels.swap_remove(0);
        drop(self);
        Arc::try_unwrap(base).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl Drop for CorrelationPyramid {
    fn drop(&mut self) {
        LIVE_VOLUME_BYTES.with(|live| live.set(live.get().saturating_sub(self.bytes)));
    }
}

fn check_levels(num_levels: usize) -> Result<()> {
    if num_levels < 1 {
        return Err(Error::Param("num_levels must be at least 1".into()));
    }
    Ok(())
}

/// Pools the base volume `num_levels - 1` times over its target dims.
pub fn build_pyramid_fast(base: Tensor, num_levels: usize) -> Result<CorrelationPyramid> {
    check_levels(num_levels)?;
    let (n, h, w) = base.dims3()?;
    if n != h * w {
        return Err(shape_err!("base volume {:?} is not square in pixels", base.shape()));
    }
    let mut levels = vec![base];
    for _ in 1..num_levels {
        let next = avg_pool2d(levels.last().expect("non-empty"), 2)?;
        levels.push(next);
    }
    Ok(CorrelationPyramid::from_levels(levels, h, w))
}

/// Reference construction: level `l` correlates `F_a` with `F_b` pooled `l` times.
pub fn build_pyramid_naive(fa: &Tensor, fb: &Tensor, num_levels: usize, normalize: bool) -> Result<CorrelationPyramid> {
    check_levels(num_levels)?;
    let (d, h, w) = feature_dims(fa)?;
    if fb.shape() != fa.shape() {
        return Err(shape_err!("feature shapes differ: {:?} vs {:?}", fa.shape(), fb.shape()));
    }
    let n = h * w;
    let s = norm_factor(d, normalize);
    let mut levels = Vec::with_capacity(num_levels);
    let mut pooled = fb.clone();
    for l in 0..num_levels {
        if l > 0 {
            pooled = avg_pool2d(&pooled, 2)?;
        }
        let (_, ph, pw) = pooled.dims3()?;
        let m = ph * pw;
        // (n × m) = Faᵀ (n × d) · pooled (d × m)
        let mut out = vec![0.0f32; n * m];
        gemm(n, d, m, fa.data(), (1, n as isize), pooled.data(), (m as isize, 1), 0.0, &mut out);
        if s != 1.0 {
            out.iter_mut().for_each(|v| *v *= s);
        }
        levels.push(Tensor::new(vec![n, ph, pw], out)?);
    }
    Ok(CorrelationPyramid::from_levels(levels, h, w))
}

/// Swaps source and target axes of a level-0 volume: `C_ba(v, u) = C_ab(u, v)`.
pub fn reverse_volume(c_ab: &Tensor) -> Result<Tensor> {
    let (n, h, w) = c_ab.dims3()?;
    if n != h * w {
        return Err(shape_err!("volume {:?} is not square in pixels", c_ab.shape()));
    }
    let src = c_ab.data();
    let mut out = vec![0.0f32; n * n];
    const BLOCK: usize = 32;
    for u0 in (0..n).step_by(BLOCK) {
        for v0 in (0..n).step_by(BLOCK) {
            for u in u0..(u0 + BLOCK).min(n) {
                for v in v0..(v0 + BLOCK).min(n) {
                    out[v * n + u] = src[u * n + v];
                }
            }
        }
    }
    Tensor::new(vec![n, h, w], out)
}

/// Samples one pyramid level around `flow`-displaced positions.
///
/// `flow` is `2 × src_h × src_w`; output is `(2r+1)² × src_h × src_w` with
/// channel `a·(2r+1) + b` holding the offset `(dx, dy) = (b − r, a − r)`.
pub fn lookup_level(level: &Tensor, flow: &Tensor, level_idx: usize, radius: usize) -> Result<Tensor> {
    let (n, lh, lw) = level.dims3()?;
    let (two, sh, sw) = flow.dims3()?;
    if two != 2 || sh * sw != n {
        return Err(shape_err!("flow {:?} does not match volume {:?}", flow.shape(), level.shape()));
    }
    let win = 2 * radius + 1;
    let k = win * win;
    let inv = 1.0 / (1u32 << level_idx) as f32;
    let (fx, fy) = flow.data().split_at(n);
    let mut out = vec![0.0f32; k * n];
    for y in 0..sh {
        for x in 0..sw {
            let i = y * sw + x;
            let cx = (x as f32 + fx[i]) * inv;
            let cy = (y as f32 + fy[i]) * inv;
            let plane = level.plane(i);
            for a in 0..win {
                let oy = cy + a as f32 - radius as f32;
                for b in 0..win {
                    let ox = cx + b as f32 - radius as f32;
                    out[(a * win + b) * n + i] = sample_plane(plane, lh, lw, ox, oy);
                }
            }
        }
    }
    Tensor::new(vec![k, sh, sw], out)
}

/// Gradients of [`lookup_level`] with respect to the level and the flow.
pub fn lookup_level_backward(
    level: &Tensor,
    flow: &Tensor,
    level_idx: usize,
    radius: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, lh, lw) = level.dims3()?;
    let (_, sh, sw) = flow.dims3()?;
    let win = 2 * radius + 1;
    let inv = 1.0 / (1u32 << level_idx) as f32;
    let (fx, fy) = flow.data().split_at(n);
    let g = grad_out.data();
    let mut dlevel = vec![0.0f32; n * lh * lw];
    let mut dflow = vec![0.0f32; 2 * n];
    for y in 0..sh {
        for x in 0..sw {
            let i = y * sw + x;
            let cx = (x as f32 + fx[i]) * inv;
            let cy = (y as f32 + fy[i]) * inv;
            let plane = level.plane(i);
            let dplane = &mut dlevel[i * lh * lw..(i + 1) * lh * lw];
            let (mut gx, mut gy) = (0.0f32, 0.0f32);
            for a in 0..win {
                let oy = cy + a as f32 - radius as f32;
                for b in 0..win {
                    let ox = cx + b as f32 - radius as f32;
                    let go = g[(a * win + b) * n + i];
                    if go == 0.0 {
                        continue;
                    }
                    scatter_plane(dplane, lh, lw, ox, oy, go);
                    let (sx, sy) = sample_plane_slope(plane, lh, lw, ox, oy);
                    gx += go * sx;
                    gy += go * sy;
                }
            }
            dflow[i] = gx * inv;
            dflow[n + i] = gy * inv;
        }
    }
    Ok((
        Tensor::new(level.shape().to_vec(), dlevel)?,
        Tensor::new(flow.shape().to_vec(), dflow)?,
    ))
}

/// Concatenated lookups over every pyramid level: `L·(2r+1)²` channels per pixel.
pub fn lookup(pyr: &CorrelationPyramid, flow: &Tensor, radius: usize) -> Result<Tensor> {
    let parts = pyr
        .levels()
        .iter()
        .enumerate()
        .map(|(l, lev)| lookup_level(lev, flow, l, radius))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_channels(&refs)
}

impl Tape {
    /// Differentiable [`build_base`].
    pub fn corr_base(&self, fa: &Var, fb: &Var, normalize: bool) -> Result<Var> {
        let out = build_base(fa.value(), fb.value(), normalize)?;
        let (d, h, w) = fa.value().dims3()?;
        let n = h * w;
        let s = norm_factor(d, normalize);
        let (av, bv) = (fa.arc(), fb.arc());
        Ok(self.record(out, &[fa, fb], move |g| {
            // dFa (d × n) = s · Fb (d × n) · Gᵀ ; dFb = s · Fa · G
            let mut da = vec![0.0f32; d * n];
            gemm(d, n, n, bv.data(), (n as isize, 1), g.data(), (1, n as isize), 0.0, &mut da);
            let mut db = vec![0.0f32; d * n];
            gemm(d, n, n, av.data(), (n as isize, 1), g.data(), (n as isize, 1), 0.0, &mut db);
            if s != 1.0 {
                da.iter_mut().chain(db.iter_mut()).for_each(|v| *v *= s);
            }
            Ok(vec![Some(Tensor::new(vec![d, h, w], da)?), Some(Tensor::new(vec![d, h, w], db)?)])
        }))
    }

    /// Differentiable [`lookup_level`].
    pub fn lookup_level(&self, level: &Var, flow: &Var, level_idx: usize, radius: usize) -> Result<Var> {
        let out = lookup_level(level.value(), flow.value(), level_idx, radius)?;
        let (lv, fv) = (level.arc(), flow.arc());
        Ok(self.record(out, &[level, flow], move |g| {
            let (dl, df) = lookup_level_backward(&lv, &fv, level_idx, radius, g)?;
            Ok(vec![Some(dl), Some(df)])
        }))
    }

    /// Lookup across all levels of a pyramid held as tape values.
    pub fn lookup(&self, levels: &[Var], flow: &Var, radius: usize) -> Result<Var> {
        let parts = levels
            .iter()
            .enumerate()
            .map(|(l, lev)| self.lookup_level(lev, flow, l, radius))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var> = parts.iter().collect();
        self.concat(&refs)
    }
}

/// Closed-form size of the correlation volumes of one frame triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryModel {
    pub height: usize,
    pub width: usize,
    pub scale: usize,
    pub num_levels: usize,
    pub bytes_per_entry: usize,
    pub num_volumes: usize,
}

impl MemoryModel {
    /// fp32 entries, two volumes (one per temporal neighbour), four levels.
    pub fn three_frame(height: usize, width: usize, scale: usize) -> Self {
        MemoryModel { height, width, scale, num_levels: 4, bytes_per_entry: 4, num_volumes: 2 }
    }

    /// Volume dims at correlation resolution.
    pub fn corr_dims(&self) -> (usize, usize) {
        (self.height.div_ceil(self.scale), self.width.div_ceil(self.scale))
    }
}

/// Bytes of `num_volumes` pyramids: `Σ_l (Hc·Wc)·ceil(Hc/2^l)·ceil(Wc/2^l)` entries each.
pub fn memory_bytes(m: &MemoryModel) -> u64 {
    let (hc, wc) = m.corr_dims();
    let src = (hc * wc) as u64;
    let entries: u64 = (0..m.num_levels)
        .map(|l| {
            let d = 1usize << l;
            src * (hc.div_ceil(d) * wc.div_ceil(d)) as u64
        })
        .sum();
    entries * m.bytes_per_entry as u64 * m.num_volumes as u64
}

pub fn bytes_to_gib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

/// Convenience wrapper returning a pooled pyramid straight from features.
pub fn build_pyramid(fa: &Tensor, fb: &Tensor, num_levels: usize, normalize: bool) -> Result<CorrelationPyramid> {
    build_pyramid_fast(build_base(fa, fb, normalize)?, num_levels)
}

/// Pools a reversed base into the pyramid of the swapped frame pair.
pub fn reversed_pyramid(forward: &CorrelationPyramid) -> Result<CorrelationPyramid> {
    build_pyramid_fast(reverse_volume(forward.base())?, forward.num_levels())
}

/// In-place [`reverse_volume`]: a square transpose, so no second volume is allocated.
pub fn reverse_volume_in_place(c: &mut Tensor) -> Result<()> {
    let (n, h, w) = c.dims3()?;
    if n != h * w {
        return Err(shape_err!("volume {:?} is not square in pixels", c.shape()));
    }
    let d = c.data_mut();
    for u in 0..n {
        for v in u + 1..n {
            d.swap(u * n + v, v * n + u);
        }
    }
    Ok(())
}

/// Consumes the pyramid of `(a, b)` and returns the one of `(b, a)`.
pub fn into_reversed_pyramid(forward: CorrelationPyramid) -> Result<CorrelationPyramid> {
    let levels = forward.num_levels();
    let mut base = forward.into_base();
    reverse_volume_in_place(&mut base)?;
    build_pyramid_fast(base, levels)
}
