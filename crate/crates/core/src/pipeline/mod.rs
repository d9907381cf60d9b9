//! Video inference: padding, the caching session, the 2× protocol and the bench.

mod bench;

use std::collections::VecDeque;

use crate::corrvol::{self, CorrelationPyramid};
use crate::error::{shape_err, Error, Result};
use crate::model::{BidirFlow, Model, UpsampleMode};
use crate::tensors::{resize_bilinear, Tensor};

pub use bench::{bench, BenchConfig, BenchReport, BenchRow, Variant};

/// Zero rows and columns appended at the bottom and right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadSpec {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl PadSpec {
    pub fn is_empty(&self) -> bool {
        self.rows == 0 && self.cols == 0
    }
}

/// Pads `t` (`C×H×W`) with zeros so both spatial dims are multiples of `m`.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> (Tensor, PadSpec) {
    let (c, h, w) = t.dims3().expect("rank-3 tensor");
    let m = m.max(1);
    let (ph, pw) = (h.div_ceil(m).max(1) * m, w.div_ceil(m).max(1) * m);
    let spec = PadSpec { rows: ph - h, cols: pw - w, height: h, width: w };
    if spec.is_empty() {
        return (t.clone(), spec);
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let src = &t.plane(ch)[y * w..(y + 1) * w];
            d[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    (out, spec)
}

/// Removes the padding recorded in `spec`.
pub fn crop(t: &Tensor, spec: &PadSpec) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if h != spec.height + spec.rows || w != spec.width + spec.cols {
        return Err(shape_err!("tensor {}x{} does not match pad spec {:?}", h, w, spec));
    }
    if spec.is_empty() {
        return Ok(t.clone());
    }
    let (oh, ow) = (spec.height, spec.width);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            d[(ch * oh + y) * ow..(ch * oh + y + 1) * ow].copy_from_slice(&t.plane(ch)[y * w..y * w + ow]);
        }
    }
    Ok(out)
}

pub fn crop_flow(b: &BidirFlow, spec: &PadSpec) -> Result<BidirFlow> {
    Ok(BidirFlow {
        f_prev: crop(&b.f_prev, spec)?,
        f_next: crop(&b.f_next, spec)?,
        mol_alpha: crop(&b.mol_alpha, spec)?,
        mol_beta: crop(&b.mol_beta, spec)?,
    })
}

/// Stateless prediction for an unpadded triplet.
pub fn infer_triplet(model: &Model, frames: [&Tensor; 3], iters: usize) -> Result<BidirFlow> {
    let m = model.config().input_multiple();
    let padded: Vec<(Tensor, PadSpec)> = frames.iter().map(|f| pad_to_multiple(f, m)).collect();
    for (p, _) in &padded[1..] {
        if p.shape() != padded[0].0.shape() {
            return Err(shape_err!("frame shapes differ"));
        }
    }
    let out = model.forward([&padded[0].0, &padded[1].0, &padded[2].0], iters, UpsampleMode::FinalOnly)?;
    crop_flow(&out[0], &padded[1].1)
}

/// Runs at twice the input resolution and maps the flows back.
pub fn infer_upscaled2x(model: &Model, frames: [&Tensor; 3], iters: usize) -> Result<BidirFlow> {
    let (_, h, w) = frames[1].dims3()?;
    let up: Vec<Tensor> = frames.iter().map(|f| resize_bilinear(f, 2 * h, 2 * w)).collect::<Result<_>>()?;
    let big = infer_triplet(model, [&up[0], &up[1], &up[2]], iters)?;
    let down = |t: &Tensor, s: f32| resize_bilinear(t, h, w).map(|r| r.scale(s));
    Ok(BidirFlow {
        f_prev: down(&big.f_prev, 0.5)?,
        f_next: down(&big.f_next, 0.5)?,
        mol_alpha: down(&big.mol_alpha, 1.0)?,
        mol_beta: down(&big.mol_beta, 1.0)?,
    })
}

/// Which inference-time optimisations a session applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    /// Upsample only the final prediction.
    pub late_upsample: bool,
    /// Encode each frame once and keep its features for the window.
    pub feature_reuse: bool,
    /// Pool the base volume instead of correlating against pooled features.
    pub fast_corr: bool,
    /// Derive `C_{t,t−1}` by transposing the previous step's `C_{t−1,t}`.
    pub corr_reuse: bool,
}

impl SessionOptions {
    pub fn all() -> Self {
        SessionOptions { late_upsample: true, feature_reuse: true, fast_corr: true, corr_reuse: true }
    }

    pub fn none() -> Self {
        SessionOptions { late_upsample: false, feature_reuse: false, fast_corr: false, corr_reuse: false }
    }
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub frames: usize,
    pub steps: usize,
    pub encoder_calls: usize,
    pub volumes_built: usize,
    pub volumes_reused: usize,
}

struct Slot {
    frame: Tensor,
    feat: Option<Tensor>,
}

/// Sliding three-frame window over a video.
pub struct VideoSession<'m> {
    model: &'m Model,
    opts: SessionOptions,
    iters: usize,
    window: VecDeque<Slot>,
    cached: Option<CorrelationPyramid>,
    pad: Option<PadSpec>,
    stats: SessionStats,
}

impl<'m> VideoSession<'m> {
    pub fn new(model: &'m Model, iters: usize, opts: SessionOptions) -> Self {
        VideoSession { model, opts, iters, window: VecDeque::with_capacity(3), cached: None, pad: None, stats: SessionStats::default() }
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    /// Index of the frame the next prediction belongs to.
    pub fn center_index(&self) -> usize {
        self.stats.frames.saturating_sub(2)
    }

    pub fn cached_features(&self) -> usize {
        self.window.iter().filter(|s| s.feat.is_some()).count()
    }

    pub fn cached_volumes(&self) -> usize {
        self.cached.is_some() as usize
    }

    pub fn cached_volume_bytes(&self) -> usize {
        self.cached.as_ref().map_or(0, CorrelationPyramid::bytes)
    }

    /// Bytes held between steps: frames, features and the carried volume.
    pub fn retained_bytes(&self) -> usize {
        let slots: usize = self.window.iter().map(|s| s.frame.bytes() + s.feat.as_ref().map_or(0, Tensor::bytes)).sum();
        slots + self.cached.as_ref().map_or(0, CorrelationPyramid::bytes)
    }

    fn encode(&mut self, i: usize) -> Result<Tensor> {
        self.stats.encoder_calls += 1;
        self.model.feature_encoder(&self.window[i].frame)
    }

    fn build(&mut self, fa: &Tensor, fb: &Tensor) -> Result<CorrelationPyramid> {
        self.stats.volumes_built += 1;
        let cfg = self.model.config();
        if self.opts.fast_corr {
            corrvol::build_pyramid(fa, fb, cfg.num_levels, cfg.corr_normalize)
        } else {
            corrvol::build_pyramid_naive(fa, fb, cfg.num_levels, cfg.corr_normalize)
        }
    }

    /// Buffers a frame; once three are held, predicts for the middle one.
    pub fn push(&mut self, frame: &Tensor) -> Result<Option<BidirFlow>> {
        let m = self.model.config().input_multiple();
        let (padded, spec) = pad_to_multiple(frame, m);
        match self.pad {
            Some(p) if p != spec => return Err(shape_err!("frame {:?} differs from the session's frames", frame.shape())),
            _ => self.pad = Some(spec),
        }
        if self.window.len() == 3 {
            self.window.pop_front();
        }
        self.window.push_back(Slot { frame: padded, feat: None });
        self.stats.frames += 1;
        if self.opts.feature_reuse {
            let i = self.window.len() - 1;
            let f = self.encode(i)?;
            self.window[i].feat = Some(f);
        }
        if self.window.len() < 3 {
            return Ok(None);
        }
        self.predict().map(Some)
    }

    /// [`push`](Self::push) that insists on a prediction.
    pub fn step(&mut self, frame: &Tensor) -> Result<BidirFlow> {
        let have = self.window.len() + 1;
        self.push(frame)?.ok_or_else(|| Error::NotReady(format!("{} of 3 frames buffered", have.min(3))))
    }

    fn predict(&mut self) -> Result<BidirFlow> {
        let feats: Vec<Tensor> = if self.opts.feature_reuse {
            self.window.iter().map(|s| s.feat.clone().expect("encoded on push")).collect()
        } else {
            (0..3).map(|i| self.encode(i)).collect::<Result<_>>()?
        };
        let prev = match self.cached.take() {
            Some(fwd) if self.opts.corr_reuse => {
                self.stats.volumes_reused += 1;
                corrvol::into_reversed_pyramid(fwd)?
            }
            _ => self.build(&feats[1], &feats[0])?,
        };
        let next = self.build(&feats[1], &feats[2])?;
        let mode = if self.opts.late_upsample { UpsampleMode::FinalOnly } else { UpsampleMode::EveryIteration };
        let frames = [&self.window[0].frame, &self.window[1].frame, &self.window[2].frame];
        let mut out = self.model.estimate_with(frames, &prev, &next, self.iters, mode)?;
        drop(prev);
        if self.opts.corr_reuse {
            self.cached = Some(next);
        }
        self.stats.steps += 1;
        crop_flow(&out.pop().expect("prediction"), &self.pad.expect("set on push"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrvol::{live_volume_bytes, memory_bytes, peak_volume_bytes, reset_peak_volume_bytes, MemoryModel};
    use crate::model::ModelConfig;
    use crate::testutil::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| random_tensor(&[3, h, w], 0.5, &mut rng).map(|v| v + 0.5)).collect()
    }

    fn model() -> Model {
        Model::init(ModelConfig::tiny(16), 42).unwrap()
    }

    #[test]
    fn padding_cases() {
        let (t, s) = pad_to_multiple(&Tensor::zeros(&[3, 1080, 1920]), 16);
        assert_eq!(t.shape(), &[3, 1088, 1920]);
        assert_eq!((s.rows, s.cols), (8, 0));
        let x = Tensor::full(&[2, 32, 48], 1.5);
        let (same, s) = pad_to_multiple(&x, 16);
        assert!(s.is_empty() && same.bitwise_eq(&x));
        let (one, s) = pad_to_multiple(&Tensor::full(&[3, 1, 1], 0.5), 16);
        assert_eq!(one.shape(), &[3, 16, 16]);
        assert_eq!((s.rows, s.cols), (15, 15));
        assert_eq!(one.data().iter().filter(|&&v| v != 0.0).count(), 3);
        assert!(crop(&one, &s).unwrap().bitwise_eq(&Tensor::full(&[3, 1, 1], 0.5)));
    }

    #[test]
    fn session_matches_stateless_and_counts_calls() {
        let m = model();
        let frames = clip(5, 20, 40, 1);
        let mut s = VideoSession::new(&m, 2, SessionOptions::all());
        assert!(matches!(s.step(&frames[0]), Err(Error::NotReady(_))));
        assert!(matches!(s.step(&frames[1]), Err(Error::NotReady(_))));
        for t in 2..5 {
            let out = s.step(&frames[t]).unwrap();
            let want = infer_triplet(&m, [&frames[t - 2], &frames[t - 1], &frames[t]], 2).unwrap();
            assert!(out.bitwise_eq(&want), "step {t}");
            assert_eq!(out.dims(), (20, 40));
            assert!(s.cached_features() <= 3 && s.cached_volumes() <= 1);
        }
        let st = s.stats();
        assert_eq!((st.encoder_calls, st.volumes_built, st.volumes_reused, st.steps), (5, 4, 2, 3));
    }

    #[test]
    fn three_frames_three_encodes() {
        let m = model();
        let frames = clip(3, 16, 16, 2);
        let mut s = VideoSession::new(&m, 1, SessionOptions::all());
        let outs: Vec<_> = frames.iter().map(|f| s.push(f).unwrap()).collect();
        assert_eq!(outs.iter().filter(|o| o.is_some()).count(), 1);
        assert_eq!(s.stats().encoder_calls, 3);
    }

    #[test]
    fn baseline_session_recomputes_everything() {
        let m = model();
        let frames = clip(5, 16, 32, 3);
        let mut s = VideoSession::new(&m, 1, SessionOptions::none());
        for f in &frames {
            s.push(f).unwrap();
        }
        let st = s.stats();
        assert_eq!((st.encoder_calls, st.volumes_built, st.volumes_reused), (9, 6, 0));
    }

    #[test]
    fn session_rejects_size_change() {
        let m = model();
        let mut s = VideoSession::new(&m, 1, SessionOptions::all());
        s.push(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(s.push(&Tensor::zeros(&[3, 16, 32])).is_err());
    }

    #[test]
    fn live_volume_bytes_match_memory_model() {
        let m = model();
        let frames = clip(4, 64, 96, 4);
        let mut s = VideoSession::new(&m, 1, SessionOptions::all());
        let base = live_volume_bytes();
        reset_peak_volume_bytes();
        for f in &frames {
            s.push(f).unwrap();
        }
        let mm = MemoryModel::three_frame(64, 96, 16);
        assert_eq!((peak_volume_bytes() - base) as u64, memory_bytes(&mm));
        drop(s);
        assert_eq!(live_volume_bytes(), base);
    }

    #[test]
    fn upscaled_protocol_keeps_dims_and_halves_flow() {
        let m = model();
        let frames = clip(3, 16, 24, 5);
        let out = infer_upscaled2x(&m, [&frames[0], &frames[1], &frames[2]], 1).unwrap();
        assert_eq!(out.dims(), (16, 24));
        assert_eq!(out.mol_alpha.shape(), &[1, 16, 24]);
        // the flow mapping alone: a constant (4, 4) field at 2× maps back to (2, 2)
        let big = Tensor::full(&[2, 32, 48], 4.0);
        let back = resize_bilinear(&big, 16, 24).unwrap().scale(0.5);
        assert!(back.data().iter().all(|&v| v == 2.0));
    }
}
