//! Runtime and memory of the inference optimisations, toggled cumulatively.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SessionOptions, VideoSession};
use crate::corrvol::{live_volume_bytes, peak_volume_bytes, reset_peak_volume_bytes};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensors::{live_tensor_bytes, peak_tensor_bytes, reset_peak_tensor_bytes, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    LateUpsample,
    FeatureReuse,
    FastCorr,
    CorrReuse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::LateUpsample, Variant::FeatureReuse, Variant::FastCorr, Variant::CorrReuse];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::LateUpsample => "+late_upsample",
            Variant::FeatureReuse => "+feature_reuse",
            Variant::FastCorr => "+fast_corr",
            Variant::CorrReuse => "+corr_reuse",
        }
    }

    /// Session options with this and every earlier optimisation enabled.
    pub fn options(self) -> SessionOptions {
        let k = Variant::ALL.iter().position(|&v| v == self).expect("listed");
        SessionOptions { late_upsample: k >= 1, feature_reuse: k >= 2, fast_corr: k >= 3, corr_reuse: k >= 4 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    /// Timed steps per variant.
    pub repeats: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { height: 256, width: 448, repeats: 20, iters: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub runtime_ms_mean: f64,
    pub runtime_ms_std: f64,
    /// Peak tensor bytes of a step plus what the session holds between steps.
    pub peak_bytes: usize,
    /// Peak bytes of live correlation pyramids.
    pub peak_volume_bytes: usize,
    pub times_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, v: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Fractional runtime reduction of `v` against the baseline.
    pub fn reduction(&self, v: Variant) -> Option<f64> {
        let base = self.row(Variant::Baseline)?.runtime_ms_mean;
        Some(1.0 - self.row(v)?.runtime_ms_mean / base)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,runtime_ms_mean,runtime_ms_std,peak_bytes\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.3},{:.3},{}", r.variant.name(), r.runtime_ms_mean, r.runtime_ms_std, r.peak_bytes);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{}x{}, {} iterations, {} timed steps per variant\n{:<16} {:>10} {:>9} {:>14} {:>14}\n",
            self.config.height, self.config.width, self.config.iters, self.config.repeats, "variant", "mean ms", "std ms", "peak bytes", "volume bytes"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>10.2} {:>9.2} {:>14} {:>14}",
                r.variant.name(),
                r.runtime_ms_mean,
                r.runtime_ms_std,
                r.peak_bytes,
                r.peak_volume_bytes
            );
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Times one warm session step per variant per round, rotating the variant
/// order between rounds so drift in machine load spreads evenly.
pub fn bench(model: &Model, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Param("bench needs positive dims and repeats".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames: Vec<Tensor> = (0..cfg.repeats + 3)
        .map(|_| Tensor::from_fn(&[3, cfg.height, cfg.width], |_| rng.random::<f32>()))
        .collect();
    let mut sessions: Vec<VideoSession> = Variant::ALL.iter().map(|v| VideoSession::new(model, cfg.iters, v.options())).collect();
    for s in sessions.iter_mut() {
        for f in &frames[..3] {
            s.push(f)?;
        }
    }
    let k = Variant::ALL.len();
    let mut times = vec![Vec::with_capacity(cfg.repeats); k];
    let mut peaks = vec![0usize; k];
    let mut vol_peaks = vec![0usize; k];
    for round in 0..cfg.repeats {
        let frame = &frames[3 + round];
        for j in 0..k {
            let i = (j + round) % k;
            // bytes of other sessions and of the inputs are not this step's
            let outside = live_tensor_bytes() - sessions[i].retained_bytes();
            let vol_outside = live_volume_bytes() - sessions[i].cached_volume_bytes();
            reset_peak_tensor_bytes();
            reset_peak_volume_bytes();
            let t0 = Instant::now();
            let out = sessions[i].push(frame)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            drop(out);
            times[i].push(dt);
            peaks[i] = peaks[i].max(peak_tensor_bytes() - outside);
            vol_peaks[i] = vol_peaks[i].max(peak_volume_bytes() - vol_outside);
        }
    }
    let rows = Variant::ALL
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let (m, s) = mean_std(&times[i]);
            BenchRow { variant, runtime_ms_mean: m, runtime_ms_std: s, peak_bytes: peaks[i], peak_volume_bytes: vol_peaks[i], times_ms: times[i].clone() }
        })
        .collect();
    Ok(BenchReport { config: *cfg, rows })
}
