//! Directional central-difference checks of tape gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::learn::loss::{sequence_loss_flows, LossConfig};
use crate::learn::synth::SynthSample;
use crate::model::{forward_vars, Model, Params, UpsampleMode, Weights, META_KEY};
use crate::tensors::Tensor;

/// Outcome of a gradient check: one entry per input tensor plus one for a
/// direction that moves every input at once.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<InputCheck>,
    pub joint: InputCheck,
}

#[derive(Debug, Clone, Copy)]
pub struct InputCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl InputCheck {
    fn new(analytic: f64, numeric: f64, magnitude: f64) -> Self {
        let scale = analytic.abs().max(numeric.abs()).max(magnitude).max(1e-6);
        InputCheck { analytic, numeric, rel_error: (analytic - numeric).abs() / scale }
    }
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().map(|c| c.rel_error).fold(self.joint.rel_error, f64::max)
    }
}

/// Compares backprop against central differences of `Σ r ⊙ f(inputs)`.
///
/// For every input a random direction is drawn: each entry is kept with
/// probability `fraction` and given a random sign. The analytic directional
/// derivative is checked against `(L(x+εv) − L(x−εv)) / 2ε`. The relative
/// error is taken against `Σ|g_i v_i|` when that exceeds both estimates, so a
/// directional derivative that cancels to near zero is not judged by f32 noise.
pub fn grad_check<F>(inputs: &[Tensor], f: F, eps: f32, fraction: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let probe = {
        let t = Tape::inference();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs)?.shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::from_fn(&probe, |_| rng.random_range(-1.0f32..1.0));
    let projected = |t: &Tape, v: &[Var]| -> Result<Var> {
        let y = f(t, v)?;
        Ok(t.sum(&t.mul(&y, &t.constant(r.clone()))?))
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&t, &vs)?;
        Ok(y.value().data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };
    grad_check_with(inputs, projected, eval, eps, fraction, seed)
}

/// [`grad_check`] for a scalar objective whose value is also available from
/// an independent evaluator `eval`, typically one that accumulates in f64.
pub fn grad_check_with<F, E>(inputs: &[Tensor], f: F, eval: E, eps: f32, fraction: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
    E: Fn(&[Tensor]) -> Result<f64>,
{
    check_eps(eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(Arc::new(t.clone()))).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::Param(format!("objective must be scalar, got {:?}", out.shape())));
    }
    let grads = tape.backward(&out)?;

    let dirs: Vec<Tensor> = inputs
        .iter()
        .map(|x| {
            let mut dir = Tensor::from_fn(x.shape(), |_| {
                if rng.random_bool(fraction) {
                    if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                } else {
                    0.0
                }
            });
            if dir.data().iter().all(|&d| d == 0.0) && x.numel() > 0 {
                let k = rng.random_range(0..x.numel());
                dir.data_mut()[k] = 1.0;
            }
            dir
        })
        .collect();
    let shifted = |which: Option<usize>, s: f32| -> Result<f64> {
        let xs = inputs
            .iter()
            .zip(&dirs)
            .enumerate()
            .map(|(i, (x, d))| if which.is_none_or(|w| w == i) { x.zip_map(d, |a, d| a + s * d) } else { Ok(x.clone()) })
            .collect::<Result<Vec<_>>>()?;
        eval(&xs)
    };
    let central = |which: Option<usize>| -> Result<f64> { Ok((shifted(which, eps)? - shifted(which, -eps)?) / (2.0 * eps as f64)) };

    let mut per_input = Vec::with_capacity(inputs.len());
    let (mut joint_a, mut joint_m) = (0.0, 0.0);
    for (i, dir) in dirs.iter().enumerate() {
        let (analytic, magnitude) = match grads.get(&vars[i]) {
            Some(g) => g.data().iter().zip(dir.data()).fold((0.0, 0.0), |(s, m), (&a, &b)| {
                let t = a as f64 * b as f64;
                (s + t, m + t.abs())
            }),
            None => (0.0, 0.0),
        };
        joint_a += analytic;
        joint_m += magnitude;
        per_input.push(InputCheck::new(analytic, central(Some(i))?, magnitude));
    }
    let joint = InputCheck::new(joint_a, central(None)?, joint_m);
    Ok(GradCheckReport { per_input, joint })
}

fn check_eps(eps: f32) -> Result<()> {
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Param(format!("eps {eps} outside [1e-4, 1e-2]")));
    }
    Ok(())
}

/// End-to-end check of the training loss gradient with respect to every
/// weight of `model`, with the numeric side run through the inference forward
/// pass and the f64 sequence loss.
pub fn model_grad_check(model: &Model, sample: &SynthSample, iters: usize, eps: f32, seed: u64) -> Result<(GradCheckReport, Vec<String>)> {
    let (names, tensors): (Vec<String>, Vec<Tensor>) =
        model.weights().iter().filter(|(k, _)| *k != META_KEY).map(|(k, v)| (k.to_string(), (**v).clone())).unzip();
    let cfg = model.config();
    let loss_cfg = LossConfig::default();
    let gt = (&sample.flow_prev, &sample.flow_next);
    let fr = &sample.frames;
    let report = grad_check_with(
        &tensors,
        |t, v| {
            let p = Params::from_vars(t, names.iter().cloned().zip(v.iter().cloned()));
            let frames: Vec<Var> = fr.iter().map(|f| t.constant(f.clone())).collect();
            let preds = forward_vars(&p, cfg, [&frames[0], &frames[1], &frames[2]], iters, UpsampleMode::EveryIteration)?;
            t.sequence_loss(&preds, gt, &loss_cfg)
        },
        |xs| {
            let mut w = Weights::new();
            for (n, x) in names.iter().zip(xs) {
                w.insert(n, x.clone());
            }
            let m = Model::new(cfg.clone(), w)?;
            let out = m.forward([&fr[0], &fr[1], &fr[2]], iters, UpsampleMode::EveryIteration)?;
            sequence_loss_flows(&out, gt, &loss_cfg)
        },
        eps,
        1.0,
        seed,
    )?;
    Ok((report, names))
}
