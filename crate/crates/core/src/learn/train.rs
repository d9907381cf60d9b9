//! Desk-scale training on synthetic triplets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::learn::loss::{sequence_loss_flows, LossConfig};
use crate::learn::synth::{make_synth, SynthSample};
use crate::metrics::epe;
use crate::model::{forward_vars, Model, ModelConfig, Params, UpsampleMode};
use crate::tensors::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update; call once per step with every gradient.
    pub fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let w = model
                .weights_mut()
                .get_mut(name)
                .ok_or_else(|| Error::Param(format!("no weight `{name}` to update")))?;
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *wi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dims: (usize, usize),
    pub max_disp: f32,
    pub steps: usize,
    pub lr: f32,
    /// Refinement iterations during training.
    pub iters: usize,
    /// Size of the cycled training pool.
    pub pool: usize,
    /// Samples averaged per optimiser step.
    pub batch: usize,
    pub heldout: usize,
    /// Global gradient-norm clip.
    pub clip: f32,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::tiny(64),
            dims: (64, 96),
            max_disp: 4.0,
            steps: 500,
            lr: 1e-3,
            iters: 4,
            pool: 16,
            batch: 1,
            heldout: 8,
            clip: 1.0,
            seed: 42,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub epe: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    pub heldout_epe_before: f64,
    pub heldout_epe_after: f64,
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    /// Mean loss over the training pool (cached pools only, else NaN).
    pub pool_loss_before: f64,
    pub pool_loss_after: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,epe\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.epe);
        }
        s
    }
}

fn pool_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Mean bidirectional EPE of the final prediction.
pub fn sample_epe(model: &Model, s: &SynthSample, iters: usize) -> Result<f64> {
    let out = model.forward([&s.frames[0], &s.frames[1], &s.frames[2]], iters, UpsampleMode::FinalOnly)?;
    let f = &out[0];
    Ok(0.5 * (epe(&f.f_prev, &s.flow_prev, None)? + epe(&f.f_next, &s.flow_next, None)?))
}

/// Mean final-prediction EPE over held-out samples.
pub fn heldout_epe(model: &Model, samples: &[SynthSample], iters: usize) -> Result<f64> {
    let total: f64 = samples.iter().map(|s| sample_epe(model, s, iters)).sum::<Result<f64>>()?;
    Ok(total / samples.len().max(1) as f64)
}

/// Mean sequence loss over held-out samples, evaluated without a tape.
pub fn heldout_loss(model: &Model, samples: &[SynthSample], iters: usize, loss_cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let preds = model.forward([&s.frames[0], &s.frames[1], &s.frames[2]], iters, UpsampleMode::EveryIteration)?;
        total += sequence_loss_flows(&preds, (&s.flow_prev, &s.flow_next), loss_cfg)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Loss, gradients per weight name, and final-prediction EPE for one sample.
pub fn loss_and_grads(model: &Model, s: &SynthSample, iters: usize, loss_cfg: &LossConfig) -> Result<(f64, Vec<(String, Tensor)>, f64)> {
    let tape = Tape::new(true);
    let p = Params::new(&tape, model.weights());
    let frames: Vec<Var> = s.frames.iter().map(|f| tape.constant(f.clone())).collect();
    let preds = forward_vars(&p, model.config(), [&frames[0], &frames[1], &frames[2]], iters, UpsampleMode::EveryIteration)?;
    let loss = tape.sequence_loss(&preds, (&s.flow_prev, &s.flow_next), loss_cfg)?;
    let last = preds.last().expect("prediction").to_bidir()?;
    let e = 0.5 * (epe(&last.f_prev, &s.flow_prev, None)? + epe(&last.f_next, &s.flow_next, None)?);
    let value = loss.value().item() as f64;
    let mut grads = tape.backward(&loss)?;
    let named: Vec<(String, Tensor)> = p
        .iter()
        .map(|(name, var)| {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(var.shape()));
            (name.to_string(), g)
        })
        .collect();
    Ok((value, named, e))
}

/// Trains `model` in place; each step draws the next sample of a fixed pool.
pub fn train_toy(model: &mut Model, cfg: &TrainConfig, mut on_step: impl FnMut(&TrainRow)) -> Result<TrainLog> {
    cfg.loss.validate()?;
    if cfg.pool == 0 || cfg.batch == 0 {
        return Err(Error::Param("training pool and batch must hold at least one sample".into()));
    }
    let cached = cfg.pool <= 256;
    let pool = if cached {
        (0..cfg.pool).map(|i| make_synth(pool_seed(cfg.seed, i), cfg.dims, cfg.max_disp)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let held = (0..cfg.heldout)
        .map(|i| make_synth(pool_seed(cfg.seed ^ 0x5eed_0f_f1e1d, i), cfg.dims, cfg.max_disp))
        .collect::<Result<Vec<_>>>()?;
    let before = heldout_epe(model, &held, cfg.iters)?;
    let loss_before = heldout_loss(model, &held, cfg.iters, &cfg.loss)?;
    let pool_loss = |m: &Model| if cached { heldout_loss(m, &pool, cfg.iters, &cfg.loss) } else { Ok(f64::NAN) };
    let pool_before = pool_loss(model)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (mut loss, mut e) = (0.0, 0.0);
        let mut grads: Vec<(String, Tensor)> = Vec::new();
        for j in 0..cfg.batch {
            let i = (step * cfg.batch + j) % cfg.pool;
            let fresh;
            let s = if cached {
                &pool[i]
            } else {
                fresh = make_synth(pool_seed(cfg.seed, i), cfg.dims, cfg.max_disp)?;
                &fresh
            };
            let (l, g, ej) = loss_and_grads(model, s, cfg.iters, &cfg.loss)?;
            loss += l / cfg.batch as f64;
            e += ej / cfg.batch as f64;
            if grads.is_empty() {
                grads = g;
            } else {
                for ((_, acc), (_, gj)) in grads.iter_mut().zip(&g) {
                    acc.data_mut().iter_mut().zip(gj.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        if cfg.batch > 1 {
            let k = 1.0 / cfg.batch as f32;
            grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= k));
        }
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::Diverged(format!("step {step}: loss {loss}, gradients finite: {}", grads.iter().all(|(_, g)| g.all_finite()))));
        }
        let norm = grads.iter().map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sum::<f64>().sqrt();
        if cfg.clip > 0.0 && norm > cfg.clip as f64 {
            let k = (cfg.clip as f64 / norm) as f32;
            for (_, g) in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        if cfg.lr != 0.0 {
            opt.step(model, &grads)?;
        }
        let row = TrainRow { step, loss, epe: e };
        on_step(&row);
        rows.push(row);
    }
    let after = heldout_epe(model, &held, cfg.iters)?;
    let loss_after = heldout_loss(model, &held, cfg.iters, &cfg.loss)?;
    Ok(TrainLog {
        rows,
        heldout_epe_before: before,
        heldout_epe_after: after,
        heldout_loss_before: loss_before,
        heldout_loss_after: loss_after,
        pool_loss_before: pool_before,
        pool_loss_after: pool_loss(model)?,
    })
}
