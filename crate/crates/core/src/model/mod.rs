//! Three-frame bidirectional flow network.
//!
//! Every block is written once against [`Params`], a view of the weights on a
//! [`Tape`]. With an inference tape nothing is recorded, so the public tensor
//! API and the training path share exactly the same arithmetic.

pub mod attention;
pub mod upsample;
pub mod weights;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::corrvol::{self, CorrelationPyramid};
use crate::error::{shape_err, Error, Result};
use crate::tensors::Tensor;

pub use attention::{attend, attention_scale};
pub use upsample::{convex_upsample, convex_weights};
pub use weights::{Init, ParamSpec, Weights};

/// Name of the tensor that records the architecture inside a weight file.
pub const META_KEY: &str = "meta.config";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dim `D_f` of the correlation features.
    pub feature_dim: usize,
    /// Context / hidden dim `D_c`.
    pub context_dim: usize,
    /// Ratio of input to correlation resolution: 8, 16 or 24.
    pub corr_scale: usize,
    pub radius: usize,
    pub num_levels: usize,
    pub use_gma: bool,
    /// Default number of refinement iterations.
    pub iters: usize,
    pub num_frames: usize,
    /// Widths of the first four encoder stages.
    pub encoder_channels: [usize; 4],
    /// Divide correlations by `sqrt(D_f)`.
    pub corr_normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paired(512)
    }
}

impl ModelConfig {
    /// Config with `D_f = 2·D_c` and default everything else.
    pub fn paired(context_dim: usize) -> Self {
        ModelConfig {
            feature_dim: 2 * context_dim,
            context_dim,
            corr_scale: 16,
            radius: 4,
            num_levels: 4,
            use_gma: true,
            iters: 8,
            num_frames: 3,
            encoder_channels: [64, 96, 128, 128],
            corr_normalize: true,
        }
    }

    /// Small configuration for tests and toy training.
    pub fn tiny(context_dim: usize) -> Self {
        let mut c = ModelConfig::paired(context_dim);
        c.encoder_channels = [8, 16, 24, 32];
        c.radius = 3;
        c
    }

    pub fn upsample_factor(&self) -> usize {
        self.corr_scale
    }

    /// Frames must have dims divisible by this (16, or 48 at scale 24).
    pub fn input_multiple(&self) -> usize {
        let (a, b) = (16, self.corr_scale);
        let mut g = (a, b);
        while g.1 != 0 {
            g = (g.1, g.0 % g.1);
        }
        a / g.0 * b
    }

    /// Channels of one lookup: `L·(2r+1)²`.
    pub fn lookup_channels(&self) -> usize {
        let s = 2 * self.radius + 1;
        self.num_levels * s * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames != 3 {
            return Err(Error::Unsupported(format!("only 3-frame models are supported, got {}", self.num_frames)));
        }
        if ![8, 16, 24].contains(&self.corr_scale) {
            return Err(Error::Param(format!("corr_scale must be 8, 16 or 24, got {}", self.corr_scale)));
        }
        if self.context_dim < 8 || self.context_dim % 4 != 0 {
            return Err(Error::Param(format!("context_dim must be a multiple of 4 and >= 8, got {}", self.context_dim)));
        }
        if self.feature_dim == 0 || self.num_levels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::Param("feature_dim, num_levels and encoder widths must be positive".into()));
        }
        Ok(())
    }

    fn to_meta(&self) -> Tensor {
        let mut v = vec![
            self.feature_dim,
            self.context_dim,
            self.corr_scale,
            self.radius,
            self.num_levels,
            self.use_gma as usize,
            self.num_frames,
            self.corr_normalize as usize,
        ];
        v.extend_from_slice(&self.encoder_channels);
        Tensor::new(vec![v.len()], v.into_iter().map(|x| x as f32).collect()).expect("meta length")
    }

    /// Architecture stored in a weight file; `iters` is set to the default.
    pub fn from_weights(w: &Weights) -> Result<Self> {
        let m = w.require(META_KEY)?;
        let d: Vec<usize> = m.data().iter().map(|&x| x as usize).collect();
        if d.len() != 12 {
            return Err(Error::Format(format!("`{META_KEY}` has {} entries, expected 12", d.len())));
        }
        let cfg = ModelConfig {
            feature_dim: d[0],
            context_dim: d[1],
            corr_scale: d[2],
            radius: d[3],
            num_levels: d[4],
            use_gma: d[5] != 0,
            iters: 8,
            num_frames: d[6],
            corr_normalize: d[7] != 0,
            encoder_channels: [d[8], d[9], d[10], d[11]],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn final_stride(&self) -> (usize, usize) {
        // (stride, padding) of the last encoder stage, 3×3 kernel
        match self.corr_scale / 8 {
            3 => (3, 0),
            s => (s, 1),
        }
    }

    fn motion_widths(&self) -> (usize, usize, usize) {
        let dc = self.context_dim;
        (dc, dc / 2, dc / 4)
    }

    fn gru_input(&self) -> usize {
        if self.use_gma {
            3 * self.context_dim
        } else {
            2 * self.context_dim
        }
    }
}

/// Every parameter tensor of a model with this config, in initialisation order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv = |name: &str, cout: usize, cin: usize, k: usize, gain: f32, bias: bool| {
        specs.push(ParamSpec { name: format!("{name}.w"), shape: vec![cout, cin, k, k], init: Init::Scaled { gain } });
        if bias {
            specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zeros });
        }
    };
    let relu_gain = std::f32::consts::SQRT_2;
    let dc = cfg.context_dim;
    let ch = cfg.encoder_channels;
    for (prefix, cin, cout) in [("fnet", 3, cfg.feature_dim), ("cnet", 9, 2 * dc)] {
        let widths = [cin, ch[0], ch[1], ch[2], ch[3], cout];
        for i in 0..5 {
            let gain = if i < 4 { relu_gain } else { 1.0 };
            conv(&format!("{prefix}.{i}"), widths[i + 1], widths[i], 3, gain, true);
        }
    }
    let (c1, c2, f1) = cfg.motion_widths();
    conv("motion.convc1", c1, 2 * cfg.lookup_channels(), 1, relu_gain, true);
    conv("motion.convc2", c2, c1, 3, relu_gain, true);
    conv("motion.convf1", f1, 4, 7, relu_gain, true);
    conv("motion.convf2", f1, f1, 3, relu_gain, true);
    conv("motion.conv", dc - 4, c2 + f1, 3, relu_gain, true);
    if cfg.use_gma {
        conv("gma.q", dc, dc, 1, 1.0, false);
        conv("gma.k", dc, dc, 1, 1.0, false);
        conv("gma.proj", dc, dc, 1, 1.0, true);
    }
    for gate in ["z", "r", "q"] {
        conv(&format!("gru.{gate}"), dc, dc + cfg.gru_input(), 3, 1.0, true);
    }
    conv("flow_head.0", dc, dc, 3, relu_gain, true);
    conv("flow_head.1", 6, dc, 3, 0.1, true);
    let f = cfg.upsample_factor();
    conv("mask.0", dc, dc, 3, relu_gain, true);
    conv("mask.1", 9 * f * f, dc, 1, 1.0, true);
    specs
}

/// Paired flows of the centre frame plus per-pixel mixture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BidirFlow {
    /// `t → t−1`, `2×H×W`.
    pub f_prev: Tensor,
    /// `t → t+1`, `2×H×W`.
    pub f_next: Tensor,
    /// Mixing coefficient in `[0, 1]`, `1×H×W`.
    pub mol_alpha: Tensor,
    /// Log-scale of the wide component, `1×H×W`.
    pub mol_beta: Tensor,
}

impl BidirFlow {
    pub fn dims(&self) -> (usize, usize) {
        (self.f_prev.shape()[1], self.f_prev.shape()[2])
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BidirFlow {
            f_prev: Tensor::zeros(&[2, h, w]),
            f_next: Tensor::zeros(&[2, h, w]),
            mol_alpha: Tensor::full(&[1, h, w], 0.5),
            mol_beta: Tensor::zeros(&[1, h, w]),
        }
    }

    pub fn bitwise_eq(&self, o: &BidirFlow) -> bool {
        self.f_prev.bitwise_eq(&o.f_prev)
            && self.f_next.bitwise_eq(&o.f_next)
            && self.mol_alpha.bitwise_eq(&o.mol_alpha)
            && self.mol_beta.bitwise_eq(&o.mol_beta)
    }

    /// Both flows stacked as `[f_prev; f_next]`.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::concat_channels(&[&self.f_prev, &self.f_next])
    }
}

/// State carried between refinement iterations (all at correlation resolution).
#[derive(Debug, Clone)]
pub struct RefinementState {
    pub h: Tensor,
    pub g: Tensor,
    pub flow: BidirFlow,
    pub k: usize,
}

/// Whether a forward pass upsamples every prediction or only the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    EveryIteration,
    FinalOnly,
}

/// Weights exposed as tape variables.
pub struct Params<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var>,
}

impl<'t> Params<'t> {
    pub fn new(tape: &'t Tape, weights: &Weights) -> Self {
        let vars = weights
            .iter()
            .filter(|(k, _)| *k != META_KEY)
            .map(|(k, v)| (k.to_string(), tape.leaf(v.clone())))
            .collect();
        Params { tape, vars }
    }

    /// Params from explicit variables, e.g. perturbed copies of the weights.
    pub fn from_vars(tape: &'t Tape, named: impl IntoIterator<Item = (String, Var)>) -> Self {
        Params { tape, vars: named.into_iter().collect() }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::Param(format!("missing weight tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn conv(&self, name: &str, x: &Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.vars.get(&format!("{name}.b"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    /// Same-size conv, padding from the kernel size.
    fn conv_same(&self, name: &str, x: &Var) -> Result<Var> {
        let k = self.get(&format!("{name}.w"))?.shape()[2];
        self.conv(name, x, 1, k / 2)
    }
}

/// Tape-level bidirectional flow: `flow` stacks `[f_prev; f_next]`.
#[derive(Clone)]
pub struct FlowVars {
    pub flow: Var,
    pub alpha: Var,
    pub beta: Var,
}

impl FlowVars {
    pub fn to_bidir(&self) -> Result<BidirFlow> {
        let f = self.flow.value();
        Ok(BidirFlow {
            f_prev: f.slice_channels(0, 2)?,
            f_next: f.slice_channels(2, 4)?,
            mol_alpha: self.alpha.value().clone(),
            mol_beta: self.beta.value().clone(),
        })
    }

    fn from_bidir(tape: &Tape, b: &BidirFlow) -> Result<Self> {
        Ok(FlowVars {
            flow: tape.constant(b.stacked()?),
            alpha: tape.constant(b.mol_alpha.clone()),
            beta: tape.constant(b.mol_beta.clone()),
        })
    }
}

#[derive(Clone)]
pub struct StateVars {
    pub h: Var,
    pub g: Var,
    pub flow: FlowVars,
    pub k: usize,
}

impl StateVars {
    pub fn to_state(&self) -> Result<RefinementState> {
        Ok(RefinementState { h: self.h.value().clone(), g: self.g.value().clone(), flow: self.flow.to_bidir()?, k: self.k })
    }
}

fn check_frame(cfg: &ModelConfig, frame: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = frame.dims3()?;
    let m = cfg.input_multiple();
    if c != 3 {
        return Err(shape_err!("frames must have 3 channels, got {}", c));
    }
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(shape_err!("frame {}x{} is not a multiple of {}; pad it first", h, w, m));
    }
    Ok((h, w))
}

fn check_triplet(cfg: &ModelConfig, frames: [&Tensor; 3]) -> Result<(usize, usize)> {
    let dims = check_frame(cfg, frames[1])?;
    for f in [frames[0], frames[2]] {
        if f.shape() != frames[1].shape() {
            return Err(shape_err!("frame shapes differ: {:?} vs {:?}", f.shape(), frames[1].shape()));
        }
    }
    Ok(dims)
}

fn strided_cnn(p: &Params, cfg: &ModelConfig, prefix: &str, x: &Var) -> Result<Var> {
    let t = p.tape();
    let mut y = x.clone();
    for i in 0..3 {
        y = t.relu(&p.conv(&format!("{prefix}.{i}"), &y, 2, 1)?);
    }
    y = t.relu(&p.conv(&format!("{prefix}.3"), &y, 1, 1)?);
    let (s, pad) = cfg.final_stride();
    p.conv(&format!("{prefix}.4"), &y, s, pad)
}

/// Per-frame features at correlation resolution.
pub fn encoder_vars(p: &Params, cfg: &ModelConfig, frame: &Var) -> Result<Var> {
    check_frame(cfg, frame.value())?;
    strided_cnn(p, cfg, "fnet", frame)
}

/// Raw 6-channel head output.
fn flow_head_raw(p: &Params, h: &Var) -> Result<Var> {
    let y = p.tape().relu(&p.conv_same("flow_head.0", h)?);
    p.conv_same("flow_head.1", &y)
}

fn split_head(p: &Params, head: &Var) -> Result<(Var, Var, Var)> {
    let t = p.tape();
    Ok((t.slice(head, 0, 4)?, t.sigmoid(&t.slice(head, 4, 5)?), t.slice(head, 5, 6)?))
}

pub fn flow_head_vars(p: &Params, h: &Var) -> Result<FlowVars> {
    let (flow, alpha, beta) = split_head(p, &flow_head_raw(p, h)?)?;
    Ok(FlowVars { flow, alpha, beta })
}

/// `(g, h⁰, f⁰)` from the three frames, stacked in temporal order.
pub fn context_vars(p: &Params, cfg: &ModelConfig, frames: [&Var; 3]) -> Result<StateVars> {
    check_triplet(cfg, [frames[0].value(), frames[1].value(), frames[2].value()])?;
    let t = p.tape();
    let x = t.concat(&frames)?;
    let out = strided_cnn(p, cfg, "cnet", &x)?;
    let dc = cfg.context_dim;
    let h = t.tanh(&t.slice(&out, 0, dc)?);
    let g = t.relu(&t.slice(&out, dc, 2 * dc)?);
    let flow = flow_head_vars(p, &h)?;
    Ok(StateVars { h, g, flow, k: 0 })
}

pub fn motion_vars(p: &Params, cfg: &ModelConfig, c_prev: &Var, c_next: &Var, flow: &Var) -> Result<Var> {
    let want = cfg.lookup_channels();
    for c in [c_prev, c_next] {
        if c.shape()[0] != want {
            return Err(shape_err!("lookup has {} channels, radius/levels need {}", c.shape()[0], want));
        }
    }
    let t = p.tape();
    let corr = t.concat(&[c_prev, c_next])?;
    let c = t.relu(&p.conv_same("motion.convc1", &corr)?);
    let c = t.relu(&p.conv_same("motion.convc2", &c)?);
    let f = t.relu(&p.conv_same("motion.convf1", flow)?);
    let f = t.relu(&p.conv_same("motion.convf2", &f)?);
    let m = t.relu(&p.conv_same("motion.conv", &t.concat(&[&c, &f])?)?);
    t.concat(&[&m, flow])
}

/// `F_m + proj(attention(q(g), k(g), F_m))`.
pub fn gma_vars(p: &Params, cfg: &ModelConfig, fm: &Var, g: &Var) -> Result<Var> {
    let t = p.tape();
    let q = p.conv_same("gma.q", g)?;
    let k = p.conv_same("gma.k", g)?;
    let (_, h, w) = fm.value().dims3()?;
    let scale = attention_scale(h * w, cfg.context_dim) as f32;
    let agg = t.attend(&q, &k, fm, scale)?;
    t.add(fm, &p.conv_same("gma.proj", &agg)?)
}

/// Conv-GRU: `h' = (1−z)·h + z·q`.
pub fn gru_vars(p: &Params, h: &Var, x: &Var) -> Result<Var> {
    let t = p.tape();
    let hx = t.concat(&[h, x])?;
    let z = t.sigmoid(&p.conv_same("gru.z", &hx)?);
    let r = t.sigmoid(&p.conv_same("gru.r", &hx)?);
    let q = t.tanh(&p.conv_same("gru.q", &t.concat(&[&t.mul(&r, h)?, x])?)?);
    t.add(&t.mul(&t.one_minus(&z), h)?, &t.mul(&z, &q)?)
}

/// One refinement iteration against the two pyramids.
pub fn refine_vars(p: &Params, cfg: &ModelConfig, st: &StateVars, prev: &[Var], next: &[Var]) -> Result<StateVars> {
    let t = p.tape();
    let flow = &st.flow.flow;
    let c_prev = t.lookup(prev, &t.slice(flow, 0, 2)?, cfg.radius)?;
    let c_next = t.lookup(next, &t.slice(flow, 2, 4)?, cfg.radius)?;
    let fm = motion_vars(p, cfg, &c_prev, &c_next, flow)?;
    let x = if cfg.use_gma {
        let agg = gma_vars(p, cfg, &fm, &st.g)?;
        t.concat(&[&st.g, &fm, &agg])?
    } else {
        t.concat(&[&st.g, &fm])?
    };
    let h = gru_vars(p, &st.h, &x)?;
    let (delta, alpha, beta) = split_head(p, &flow_head_raw(p, &h)?)?;
    let flow = t.add(flow, &delta)?;
    Ok(StateVars { h, g: st.g.clone(), flow: FlowVars { flow, alpha, beta }, k: st.k + 1 })
}

/// Lifts a state's prediction to input resolution with the learned mask.
pub fn upsample_vars(p: &Params, cfg: &ModelConfig, st: &StateVars) -> Result<FlowVars> {
    let t = p.tape();
    let m = t.relu(&p.conv_same("mask.0", &st.h)?);
    let mask = t.scale(&p.conv_same("mask.1", &m)?, 0.25);
    let f = cfg.upsample_factor();
    Ok(FlowVars {
        flow: t.convex_upsample(&st.flow.flow, &mask, f, f as f32)?,
        alpha: t.convex_upsample(&st.flow.alpha, &mask, f, 1.0)?,
        beta: t.convex_upsample(&st.flow.beta, &mask, f, 1.0)?,
    })
}

/// Pooled pyramid levels on the tape.
pub fn pyramid_vars(t: &Tape, cfg: &ModelConfig, fa: &Var, fb: &Var) -> Result<Vec<Var>> {
    let mut levels = vec![t.corr_base(fa, fb, cfg.corr_normalize)?];
    for _ in 1..cfg.num_levels {
        let next = t.avg_pool(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(levels)
}

/// Context, refinement and upsampling given ready pyramid levels.
pub fn refine_all_vars(
    p: &Params,
    cfg: &ModelConfig,
    frames: [&Var; 3],
    prev: &[Var],
    next: &[Var],
    iters: usize,
    mode: UpsampleMode,
) -> Result<Vec<FlowVars>> {
    let mut st = context_vars(p, cfg, frames)?;
    let mut out = Vec::with_capacity(iters + 1);
    if mode == UpsampleMode::EveryIteration {
        out.push(upsample_vars(p, cfg, &st)?);
    }
    for _ in 0..iters {
        st = refine_vars(p, cfg, &st, prev, next)?;
        if mode == UpsampleMode::EveryIteration {
            out.push(upsample_vars(p, cfg, &st)?);
        }
    }
    if mode == UpsampleMode::FinalOnly {
        out.push(upsample_vars(p, cfg, &st)?);
    }
    Ok(out)
}

/// Full differentiable pass from frames to upsampled predictions.
pub fn forward_vars(p: &Params, cfg: &ModelConfig, frames: [&Var; 3], iters: usize, mode: UpsampleMode) -> Result<Vec<FlowVars>> {
    check_triplet(cfg, [frames[0].value(), frames[1].value(), frames[2].value()])?;
    let feats = frames.iter().map(|f| encoder_vars(p, cfg, f)).collect::<Result<Vec<_>>>()?;
    let t = p.tape();
    let prev = pyramid_vars(t, cfg, &feats[1], &feats[0])?;
    let next = pyramid_vars(t, cfg, &feats[1], &feats[2])?;
    refine_all_vars(p, cfg, frames, &prev, &next, iters, mode)
}

/// Network plus its weights.
#[derive(Clone)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
}

fn level_vars(t: &Tape, pyr: &CorrelationPyramid) -> Vec<Var> {
    pyr.levels().iter().map(|l| t.constant_arc(Arc::clone(l))).collect()
}

impl Model {
    /// Wraps existing weights after checking every tensor is present.
    pub fn new(cfg: ModelConfig, mut weights: Weights) -> Result<Self> {
        cfg.validate()?;
        weights.check_specs(&param_specs(&cfg))?;
        weights.insert(META_KEY, cfg.to_meta());
        Ok(Model { cfg, weights })
    }

    /// Seeded random weights.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = Weights::init(&param_specs(&cfg), seed);
        Model::new(cfg, w)
    }

    /// Loads weights whose file records the architecture.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let w = Weights::load(path)?;
        let cfg = ModelConfig::from_weights(&w)?;
        Model::new(cfg, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Changes the default iteration count.
    pub fn set_iters(&mut self, iters: usize) {
        self.cfg.iters = iters;
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    fn with_params<T>(&self, f: impl FnOnce(&Params) -> Result<T>) -> Result<T> {
        let tape = Tape::inference();
        let p = Params::new(&tape, &self.weights);
        f(&p)
    }

    pub fn feature_encoder(&self, frame: &Tensor) -> Result<Tensor> {
        self.with_params(|p| Ok(encoder_vars(p, &self.cfg, &p.tape().constant(frame.clone()))?.value().clone()))
    }

    /// `(g, h⁰, f⁰)` for a frame triplet.
    pub fn context_network(&self, frames: [&Tensor; 3]) -> Result<RefinementState> {
        self.with_params(|p| {
            let t = p.tape();
            let v: Vec<Var> = frames.iter().map(|f| t.constant((*f).clone())).collect();
            context_vars(p, &self.cfg, [&v[0], &v[1], &v[2]])?.to_state()
        })
    }

    pub fn flow_head(&self, h: &Tensor) -> Result<BidirFlow> {
        self.with_params(|p| flow_head_vars(p, &p.tape().constant(h.clone()))?.to_bidir())
    }

    pub fn motion_features(&self, c_prev: &Tensor, c_next: &Tensor, flow: &BidirFlow) -> Result<Tensor> {
        self.with_params(|p| {
            let t = p.tape();
            let fm = motion_vars(p, &self.cfg, &t.constant(c_prev.clone()), &t.constant(c_next.clone()), &t.constant(flow.stacked()?))?;
            Ok(fm.value().clone())
        })
    }

    pub fn gma_aggregate(&self, fm: &Tensor, g: &Tensor) -> Result<Tensor> {
        if !self.cfg.use_gma {
            return Err(Error::Param("model was built without attention".into()));
        }
        self.with_params(|p| {
            let t = p.tape();
            Ok(gma_vars(p, &self.cfg, &t.constant(fm.clone()), &t.constant(g.clone()))?.value().clone())
        })
    }

    pub fn updater(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        self.with_params(|p| {
            let t = p.tape();
            Ok(gru_vars(p, &t.constant(h.clone()), &t.constant(x.clone()))?.value().clone())
        })
    }

    pub fn refine_step(&self, st: &RefinementState, prev: &CorrelationPyramid, next: &CorrelationPyramid) -> Result<RefinementState> {
        self.with_params(|p| {
            let t = p.tape();
            let sv = StateVars {
                h: t.constant(st.h.clone()),
                g: t.constant(st.g.clone()),
                flow: FlowVars::from_bidir(t, &st.flow)?,
                k: st.k,
            };
            refine_vars(p, &self.cfg, &sv, &level_vars(t, prev), &level_vars(t, next))?.to_state()
        })
    }

    /// Upsampled prediction of a refinement state.
    pub fn upsample(&self, st: &RefinementState) -> Result<BidirFlow> {
        self.with_params(|p| {
            let t = p.tape();
            let sv = StateVars {
                h: t.constant(st.h.clone()),
                g: t.constant(st.g.clone()),
                flow: FlowVars::from_bidir(t, &st.flow)?,
                k: st.k,
            };
            upsample_vars(p, &self.cfg, &sv)?.to_bidir()
        })
    }

    /// Pyramids `C_{t,t−1}` and `C_{t,t+1}` from centre and neighbour features.
    pub fn pyramids(&self, feats: [&Tensor; 3]) -> Result<(CorrelationPyramid, CorrelationPyramid)> {
        let (l, n) = (self.cfg.num_levels, self.cfg.corr_normalize);
        Ok((corrvol::build_pyramid(feats[1], feats[0], l, n)?, corrvol::build_pyramid(feats[1], feats[2], l, n)?))
    }

    /// Refinement from ready pyramids; the frames only feed the context network.
    pub fn estimate_with(
        &self,
        frames: [&Tensor; 3],
        prev: &CorrelationPyramid,
        next: &CorrelationPyramid,
        iters: usize,
        mode: UpsampleMode,
    ) -> Result<Vec<BidirFlow>> {
        self.with_params(|p| {
            let t = p.tape();
            let v: Vec<Var> = frames.iter().map(|f| t.constant((*f).clone())).collect();
            let outs = refine_all_vars(p, &self.cfg, [&v[0], &v[1], &v[2]], &level_vars(t, prev), &level_vars(t, next), iters, mode)?;
            outs.iter().map(FlowVars::to_bidir).collect()
        })
    }

    /// Stateless pass over a padded triplet: `iters + 1` predictions with
    /// [`UpsampleMode::EveryIteration`], the final one with [`UpsampleMode::FinalOnly`].
    pub fn forward(&self, frames: [&Tensor; 3], iters: usize, mode: UpsampleMode) -> Result<Vec<BidirFlow>> {
        check_triplet(&self.cfg, frames)?;
        let feats = frames.iter().map(|f| self.feature_encoder(f)).collect::<Result<Vec<_>>>()?;
        let (prev, next) = self.pyramids([&feats[0], &feats[1], &feats[2]])?;
        self.estimate_with(frames, &prev, &next, iters, mode)
    }

    /// Final prediction with the configured iteration count.
    pub fn infer(&self, frames: [&Tensor; 3]) -> Result<BidirFlow> {
        let mut out = self.forward(frames, self.cfg.iters, UpsampleMode::FinalOnly)?;
        Ok(out.pop().expect("one prediction"))
    }
}
