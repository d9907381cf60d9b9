//! Built-in oracle suite, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corrvol::{build_base, build_pyramid, build_pyramid_naive, reverse_volume};
use crate::error::Result;
use crate::learn::{grad_check, make_synth, mix_laplace, mix_laplace_grad, model_grad_check};
use crate::metrics::{epe, fl_all, onepx, wauc};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{infer_triplet, SessionOptions, VideoSession};
use crate::tensors::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {:<22} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn pyramid_equivalence(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=16));
        let fa = rand_tensor(&[d, h, w], rng, 1.0);
        let fb = rand_tensor(&[d, h, w], rng, 1.0);
        let fast = build_pyramid(&fa, &fb, 4, true)?;
        let naive = build_pyramid_naive(&fa, &fb, 4, true)?;
        for (a, b) in fast.levels().iter().zip(naive.levels()) {
            let scale = b.max_abs().max(1e-6) as f64;
            let dev = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
            worst = worst.max(dev / scale);
        }
    }
    Ok((worst <= 1e-5, format!("max relative deviation {worst:.2e} over 50 pairs")))
}

fn reversal(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut ok = 0;
    for _ in 0..50 {
        let (h, w, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=16));
        let fa = rand_tensor(&[d, h, w], rng, 1.0);
        let fb = rand_tensor(&[d, h, w], rng, 1.0);
        if reverse_volume(&build_base(&fa, &fb, true)?)?.bitwise_eq(&build_base(&fb, &fa, true)?) {
            ok += 1;
        }
    }
    Ok((ok == 50, format!("{ok}/50 reversed volumes bitwise-equal")))
}

fn cache_equivalence(seed: u64) -> Result<(bool, String)> {
    let model = Model::init(ModelConfig::tiny(16), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Tensor> = (0..5).map(|_| Tensor::from_fn(&[3, 40, 56], |_| rng.random())).collect();
    let mut session = VideoSession::new(&model, 3, SessionOptions::all());
    let mut equal = 0;
    for t in 0..frames.len() {
        if let Some(out) = session.push(&frames[t])? {
            let want = infer_triplet(&model, [&frames[t - 2], &frames[t - 1], &frames[t]], 3)?;
            equal += out.bitwise_eq(&want) as usize;
        }
    }
    let st = session.stats();
    let counts = st.encoder_calls == 5 && st.volumes_built == 4;
    Ok((
        equal == 3 && counts,
        format!("{equal}/3 steps bitwise-equal, {} encoder calls, {} volumes built", st.encoder_calls, st.volumes_built),
    ))
}

fn scalar_gradients(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..200 {
        let (gt, mu) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        if f64::abs(gt - mu) < 1e-3 {
            continue;
        }
        let (alpha, beta) = (rng.random_range(0.01..0.99), rng.random_range(-2.0..4.0));
        let (_, dmu, da, db) = mix_laplace_grad(gt, alpha, beta, mu);
        let num = [
            (mix_laplace(gt, alpha, beta, mu + h) - mix_laplace(gt, alpha, beta, mu - h)) / (2.0 * h),
            (mix_laplace(gt, alpha + h, beta, mu) - mix_laplace(gt, alpha - h, beta, mu)) / (2.0 * h),
            (mix_laplace(gt, alpha, beta + h, mu) - mix_laplace(gt, alpha, beta - h, mu)) / (2.0 * h),
        ];
        for (a, n) in [dmu, da, db].into_iter().zip(num) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
    }
    (worst <= 1e-3, format!("max relative error {worst:.2e}"))
}

fn tape_gradients(rng: &mut ChaCha8Rng, seed: u64) -> Result<(bool, String)> {
    let flow = rand_tensor(&[4, 3, 4], rng, 2.0);
    let alpha = Tensor::from_fn(&[1, 3, 4], |_| rng.random_range(0.1..0.9));
    let beta = rand_tensor(&[1, 3, 4], rng, 1.0);
    let gt = rand_tensor(&[2, 3, 4], rng, 3.0);
    let loss = grad_check(&[flow.slice_channels(0, 2)?, alpha, beta], |t, v| t.mol_loss(&v[0], &v[1], &v[2], &gt), 1e-3, 1.0, seed)?;
    let model = Model::init(ModelConfig::tiny(8), seed)?;
    let sample = make_synth(seed, (32, 48), 3.0)?;
    let (e2e, _) = model_grad_check(&model, &sample, 2, 1e-4, seed)?;
    let (a, b) = (loss.max_rel_error(), e2e.joint.rel_error);
    Ok((a <= 1e-3 && b <= 5e-3, format!("loss {a:.2e} (limit 1e-3), tiny model {b:.2e} (limit 5e-3)")))
}

fn metric_oracles(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let gt = rand_tensor(&[2, 8, 8], rng, 60.0);
        let pred = gt.zip_map(&rand_tensor(&[2, 8, 8], rng, 6.0), |a, b| a + b)?;
        let n = 64usize;
        let (mut sum, mut out1, mut fl) = (0.0f64, 0usize, 0usize);
        let mut errs = Vec::with_capacity(n);
        for i in 0..n {
            let du = (pred.data()[i] - gt.data()[i]) as f64;
            let dv = (pred.data()[n + i] - gt.data()[n + i]) as f64;
            let e = (du * du + dv * dv).sqrt();
            let g = ((gt.data()[i] as f64).powi(2) + (gt.data()[n + i] as f64).powi(2)).sqrt();
            sum += e;
            out1 += (e > 1.0) as usize;
            fl += (e > 3.0 && e > 0.05 * g) as usize;
            errs.push(e);
        }
        let mut area = 0.0;
        for b in 0..100 {
            let x = (b as f64 + 0.5) * 0.05;
            let inl = errs.iter().filter(|&&e| e <= x).count() as f64 / n as f64;
            area += inl * (1.0 - x / 5.0) * 0.05;
        }
        let oracle = [sum / n as f64, 100.0 * out1 as f64 / n as f64, 100.0 * fl as f64 / n as f64, 100.0 * 0.4 * area];
        let got = [epe(&pred, &gt, None)?, onepx(&pred, &gt, None)?, fl_all(&pred, &gt, None)?, wauc(&pred, &gt, None)?];
        for (a, b) in oracle.iter().zip(got) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max deviation from loop oracles {worst:.2e}")))
}

/// Runs every check; failures are reported, not raised.
pub fn run_selfcheck(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        out.push(CheckOutcome { name, passed, detail });
    };
    push("pyramid fast/naive", pyramid_equivalence(&mut rng));
    push("volume reversal", reversal(&mut rng));
    push("session cache", cache_equivalence(seed));
    push("MoL scalar gradients", Ok(scalar_gradients(&mut rng)));
    push("tape gradients", tape_gradients(&mut rng, seed));
    push("metric oracles", metric_oracles(&mut rng));
    out
}
