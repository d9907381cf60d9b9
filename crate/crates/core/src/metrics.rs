//! Flow accuracy metrics and the motion-vector histogram.
//!
//! All aggregates pool pixels (not files) and accumulate in `f64`.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::tensors::Tensor;

/// Magnitude ranges of the bucketed metrics: `[0,10)`, `[10,40)`, `[40,∞)`.
pub const BUCKETS: [(&str, f64, f64); 3] = [("s0-10", 0.0, 10.0), ("s10-40", 10.0, 40.0), ("s40+", 40.0, f64::INFINITY)];

/// Per-pixel endpoint errors with validity.
#[derive(Debug, Clone)]
pub struct FlowError {
    /// Euclidean error per pixel, row-major.
    pub err: Vec<f64>,
    /// Ground-truth magnitude per pixel.
    pub gt_norm: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowError {
    pub fn new(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<Self> {
        let (c, h, w) = pred.dims3()?;
        if c != 2 || gt.shape() != pred.shape() {
            return Err(shape_err!("prediction {:?} and ground truth {:?} must both be 2×H×W", pred.shape(), gt.shape()));
        }
        let n = h * w;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(shape_err!("mask has {} entries for {} pixels", m.len(), n));
            }
        }
        let (p, g) = (pred.data(), gt.data());
        let mut err = Vec::with_capacity(n);
        let mut gt_norm = Vec::with_capacity(n);
        for i in 0..n {
            let (du, dv) = (p[i] as f64 - g[i] as f64, p[n + i] as f64 - g[n + i] as f64);
            let e = (du * du + dv * dv).sqrt();
            err.push(e);
            gt_norm.push((g[i] as f64).hypot(g[n + i] as f64));
        }
        let valid = (0..n).map(|i| mask.is_none_or(|m| m[i])).collect();
        Ok(FlowError { err, gt_norm, valid })
    }

    fn errors(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.err.iter().zip(&self.gt_norm).zip(&self.valid).filter(|(_, &v)| v).map(|((&e, &g), _)| (e, g))
    }
}

fn valid_errors(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    let fe = FlowError::new(pred, gt, mask)?;
    Ok(fe.errors().collect())
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn no_pixels() -> Error {
    Error::Param("no valid pixels".into())
}

/// Mean endpoint error over valid pixels.
pub fn epe(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    mean(valid_errors(pred, gt, mask)?.into_iter().map(|(e, _)| e)).ok_or_else(no_pixels)
}

/// Mean endpoint error within each ground-truth magnitude bucket; `None` for an empty bucket.
pub fn epe_buckets(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<[Option<f64>; 3]> {
    let errs = valid_errors(pred, gt, mask)?;
    Ok(BUCKETS.map(|(_, lo, hi)| mean(errs.iter().filter(|(_, g)| *g >= lo && *g < hi).map(|(e, _)| *e))))
}

/// Percentage of valid pixels with error strictly above 1 px.
pub fn onepx(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    mean(valid_errors(pred, gt, mask)?.into_iter().map(|(e, _)| if e > 1.0 { 100.0 } else { 0.0 })).ok_or_else(no_pixels)
}

#[inline]
fn is_fl_outlier(e: f64, g: f64) -> bool {
    e > 3.0 && e > 0.05 * g
}

/// Percentage of valid pixels whose error exceeds both 3 px and 5% of the true magnitude.
pub fn fl_all(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    mean(valid_errors(pred, gt, mask)?.into_iter().map(|(e, g)| if is_fl_outlier(e, g) { 100.0 } else { 0.0 }))
        .ok_or_else(no_pixels)
}

pub const WAUC_BINS: usize = 100;

/// Weighted inlier-curve area in `[0, 100]` from raw errors, midpoint rule on 100 bins.
pub fn wauc_from_errors(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let dx = 5.0 / WAUC_BINS as f64;
    let mut acc = 0.0;
    for i in 0..WAUC_BINS {
        let x = (i as f64 + 0.5) * dx;
        let inliers = sorted.partition_point(|&e| e <= x) as f64;
        acc += 100.0 * inliers / n * (5.0 - x) / 5.0 * dx;
    }
    Some(0.4 * acc)
}

pub fn wauc(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let errs: Vec<f64> = valid_errors(pred, gt, mask)?.into_iter().map(|(e, _)| e).collect();
    wauc_from_errors(&errs).ok_or_else(no_pixels)
}

/// Pixel-pooled metrics over any number of flow pairs.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    errors: Vec<f64>,
    gt_norms: Vec<f64>,
}

/// Metrics laid out as EPE (avg + buckets), 1px (avg + buckets), WAUC, Fl.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub pixels: usize,
    pub epe: f64,
    pub epe_buckets: [Option<f64>; 3],
    pub onepx: f64,
    pub onepx_buckets: [Option<f64>; 3],
    pub wauc: f64,
    pub fl: f64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<()> {
        for (e, g) in valid_errors(pred, gt, mask)? {
            self.errors.push(e);
            self.gt_norms.push(g);
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.errors.len()
    }

    pub fn report(&self) -> Option<MetricReport> {
        let pairs = || self.errors.iter().copied().zip(self.gt_norms.iter().copied());
        let in_bucket = |lo: f64, hi: f64| move |&(_, g): &(f64, f64)| g >= lo && g < hi;
        let pct = |e: f64| if e > 1.0 { 100.0 } else { 0.0 };
        Some(MetricReport {
            pixels: self.errors.len(),
            epe: mean(pairs().map(|(e, _)| e))?,
            epe_buckets: BUCKETS.map(|(_, lo, hi)| mean(pairs().filter(in_bucket(lo, hi)).map(|(e, _)| e))),
            onepx: mean(pairs().map(|(e, _)| pct(e)))?,
            onepx_buckets: BUCKETS.map(|(_, lo, hi)| mean(pairs().filter(in_bucket(lo, hi)).map(|(e, _)| pct(e)))),
            wauc: wauc_from_errors(&self.errors)?,
            fl: mean(pairs().map(|(e, g)| if is_fl_outlier(e, g) { 100.0 } else { 0.0 }))?,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "name,pixels,epe,epe_s0-10,epe_s10-40,epe_s40+,1px,1px_s0-10,1px_s10-40,1px_s40+,wauc,fl";

    pub fn csv_row(&self, name: &str) -> String {
        let mut s = format!("{name},{},{}", self.pixels, cell(Some(self.epe)));
        for v in self.epe_buckets {
            let _ = write!(s, ",{}", cell(v));
        }
        let _ = write!(s, ",{}", cell(Some(self.onepx)));
        for v in self.onepx_buckets {
            let _ = write!(s, ",{}", cell(v));
        }
        let _ = write!(s, ",{},{}", cell(Some(self.wauc)), cell(Some(self.fl)));
        s
    }

    /// Aligned text table, one row per named report.
    pub fn table(rows: &[(String, MetricReport)]) -> String {
        let header = ["", "EPE", "s0-10", "s10-40", "s40+", "1px", "s0-10", "s10-40", "s40+", "WAUC", "Fl"];
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|(name, r)| {
                let mut v = vec![name.clone(), cell(Some(r.epe))];
                v.extend(r.epe_buckets.map(cell));
                v.push(cell(Some(r.onepx)));
                v.extend(r.onepx_buckets.map(cell));
                v.push(cell(Some(r.wauc)));
                v.push(cell(Some(r.fl)));
                v
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(header.to_vec(), &mut out);
        for r in &body {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

/// Histogram extent: rows cover `[−half_h, half_h)`, columns `[−half_w, half_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramConfig {
    pub half_h: i64,
    pub half_w: i64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig { half_h: 1080, half_w: 1920 }
    }
}

impl HistogramConfig {
    pub fn dims(&self) -> (usize, usize) {
        (2 * self.half_h as usize, 2 * self.half_w as usize)
    }
}

/// Counts of motion vectors per unit bin. Row `u + half_h` holds
/// `floor(f[0]) = u`, column `v + half_w` holds `floor(f[1]) = v`.
#[derive(Debug, Clone)]
pub struct MotionHistogram {
    pub cfg: HistogramConfig,
    pub counts: Vec<u64>,
    pub clipped: u64,
    pub total: u64,
}

impl MotionHistogram {
    pub fn new(cfg: HistogramConfig) -> Self {
        let (h, w) = cfg.dims();
        MotionHistogram { cfg, counts: vec![0; h * w], clipped: 0, total: 0 }
    }

    pub fn add(&mut self, flow: &Tensor) -> Result<()> {
        let (c, h, w) = flow.dims3()?;
        if c != 2 {
            return Err(shape_err!("flow must have 2 channels, got {}", c));
        }
        let n = h * w;
        let (rows, cols) = self.cfg.dims();
        for i in 0..n {
            self.total += 1;
            let (a, b) = (flow.data()[i], flow.data()[n + i]);
            if !a.is_finite() || !b.is_finite() {
                self.clipped += 1;
                continue;
            }
            let u = (a as f64).floor() as i64 + self.cfg.half_h;
            let v = (b as f64).floor() as i64 + self.cfg.half_w;
            if u < 0 || v < 0 || u >= rows as i64 || v >= cols as i64 {
                self.clipped += 1;
            } else {
                self.counts[u as usize * cols + v as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn binned(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, u: i64, v: i64) -> u64 {
        let (_, cols) = self.cfg.dims();
        self.counts[(u + self.cfg.half_h) as usize * cols + (v + self.cfg.half_w) as usize]
    }

    /// Non-zero bins as `(u, v, count)`.
    pub fn nonzero(&self) -> Vec<(i64, i64, u64)> {
        let (_, cols) = self.cfg.dims();
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| ((i / cols) as i64 - self.cfg.half_h, (i % cols) as i64 - self.cfg.half_w, c))
            .collect()
    }

    /// `log(1 + count)` scaled to 8 bits, row-major.
    pub fn log_image(&self) -> Vec<u8> {
        let peak = self.counts.iter().copied().max().unwrap_or(0);
        let denom = (1.0 + peak as f64).ln();
        self.counts
            .iter()
            .map(|&c| if denom > 0.0 { (255.0 * (1.0 + c as f64).ln() / denom).round() as u8 } else { 0 })
            .collect()
    }
}

pub fn motion_histogram(flows: &[Tensor], cfg: HistogramConfig) -> Result<MotionHistogram> {
    let mut h = MotionHistogram::new(cfg);
    for f in flows {
        h.add(f)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(h: usize, w: usize, u: f32, v: f32) -> Tensor {
        Tensor::from_fn(&[2, h, w], |i| if i < h * w { u } else { v })
    }

    /// Per-pixel loops straight from the definitions.
    struct Oracle {
        e: Vec<f64>,
        g: Vec<f64>,
    }

    impl Oracle {
        fn new(p: &Tensor, t: &Tensor) -> Self {
            let (_, h, w) = p.dims3().unwrap();
            let mut e = vec![];
            let mut g = vec![];
            for y in 0..h {
                for x in 0..w {
                    let du = p.at3(0, y, x) as f64 - t.at3(0, y, x) as f64;
                    let dv = p.at3(1, y, x) as f64 - t.at3(1, y, x) as f64;
                    e.push((du * du + dv * dv).sqrt());
                    g.push(((t.at3(0, y, x) as f64).powi(2) + (t.at3(1, y, x) as f64).powi(2)).sqrt());
                }
            }
            Oracle { e, g }
        }
        fn epe(&self) -> f64 {
            self.e.iter().sum::<f64>() / self.e.len() as f64
        }
        fn onepx(&self) -> f64 {
            100.0 * self.e.iter().filter(|&&e| e > 1.0).count() as f64 / self.e.len() as f64
        }
        fn fl(&self) -> f64 {
            let n = self.e.iter().zip(&self.g).filter(|(&e, &g)| e > 3.0 && e > 0.05 * g).count();
            100.0 * n as f64 / self.e.len() as f64
        }
        fn wauc(&self) -> f64 {
            let mut acc = 0.0;
            for i in 0..100 {
                let x = 0.05 * i as f64 + 0.025;
                let f = 100.0 * self.e.iter().filter(|&&e| e <= x).count() as f64 / self.e.len() as f64;
                acc += f * (5.0 - x) / 5.0 * 0.05;
            }
            2.0 / 5.0 * acc
        }
    }

    #[test]
    fn metrics_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let gt = random_tensor(&[2, 8, 8], 50.0, &mut rng);
            let noise = random_tensor(&[2, 8, 8], 4.0, &mut rng);
            let pred = gt.zip_map(&noise, |a, b| a + b).unwrap();
            let o = Oracle::new(&pred, &gt);
            assert!((epe(&pred, &gt, None).unwrap() - o.epe()).abs() < 1e-6);
            assert!((onepx(&pred, &gt, None).unwrap() - o.onepx()).abs() < 1e-6);
            assert!((fl_all(&pred, &gt, None).unwrap() - o.fl()).abs() < 1e-6);
            assert!((wauc(&pred, &gt, None).unwrap() - o.wauc()).abs() < 1e-6);
        }
    }

    #[test]
    fn epe_cases() {
        let gt = uniform(4, 4, 1.0, 2.0);
        assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
        assert_eq!(epe(&uniform(4, 4, 4.0, 6.0), &gt, None).unwrap(), 5.0);
        assert!(epe(&gt, &gt, Some(&[false; 16])).is_err());
        assert!(epe(&gt, &uniform(4, 5, 0.0, 0.0), None).is_err());
    }

    #[test]
    fn buckets_partition_and_absent_when_empty() {
        let gt = uniform(2, 2, 3.0, 4.0);
        let b = epe_buckets(&uniform(2, 2, 3.0, 5.0), &gt, None).unwrap();
        assert_eq!(b, [Some(1.0), None, None]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_tensor(&[2, 8, 8], 60.0, &mut rng);
        let fe = FlowError::new(&gt, &gt, None).unwrap();
        let counts: usize = BUCKETS.iter().map(|(_, lo, hi)| fe.gt_norm.iter().filter(|&&g| g >= *lo && g < *hi).count()).sum();
        assert_eq!(counts, 64);
    }

    #[test]
    fn onepx_is_strict() {
        let gt = uniform(2, 2, 0.0, 0.0);
        assert_eq!(onepx(&uniform(2, 2, 1.0, 0.0), &gt, None).unwrap(), 0.0);
        let half = Tensor::from_fn(&[2, 2, 2], |i| if i < 2 { 2.0 } else { 0.0 });
        assert_eq!(onepx(&half, &gt, None).unwrap(), 50.0);
        assert_eq!(onepx(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn fl_needs_both_clauses() {
        let gt = uniform(1, 1, 100.0, 0.0);
        assert_eq!(fl_all(&uniform(1, 1, 104.0, 0.0), &gt, None).unwrap(), 0.0);
        let gt = uniform(1, 1, 10.0, 0.0);
        assert_eq!(fl_all(&uniform(1, 1, 14.0, 0.0), &gt, None).unwrap(), 100.0);
        assert_eq!(fl_all(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn wauc_analytic_cases() {
        let gt = uniform(3, 3, 0.0, 0.0);
        assert!((wauc(&gt, &gt, None).unwrap() - 100.0).abs() < 0.1);
        assert!((wauc(&uniform(3, 3, 1.5, 2.0), &gt, None).unwrap() - 25.0).abs() < 0.1);
        assert!(wauc(&uniform(3, 3, 5.1, 0.0), &gt, None).unwrap().abs() < 0.1);
    }

    #[test]
    fn report_and_table() {
        let gt = uniform(2, 2, 3.0, 4.0);
        let mut acc = MetricAccumulator::new();
        acc.add(&gt, &gt, None).unwrap();
        let r = acc.report().unwrap();
        assert_eq!((r.epe, r.onepx, r.fl), (0.0, 0.0, 0.0));
        assert!((r.wauc - 100.0).abs() < 1e-9);
        assert_eq!(r.epe_buckets[1], None);
        let row = r.csv_row("a");
        assert_eq!(row.split(',').count(), MetricReport::CSV_HEADER.split(',').count());
        let t = MetricReport::table(&[("all".into(), r)]);
        assert_eq!(t.lines().count(), 2);
        assert!(MetricAccumulator::new().report().is_none());
    }

    #[test]
    fn histogram_single_bin_and_conservation() {
        let cfg = HistogramConfig::default();
        let h = motion_histogram(&[uniform(5, 7, 3.2, -1.7)], cfg).unwrap();
        assert_eq!(h.get(3, -2), 35);
        assert_eq!(h.nonzero(), vec![(3, -2, 35)]);
        assert_eq!(h.clipped, 0);
        let empty = motion_histogram(&[], cfg).unwrap();
        assert_eq!(empty.binned(), 0);
        assert_eq!(cfg.dims(), (2160, 3840));
    }

    #[test]
    fn histogram_edges_are_half_open() {
        let cfg = HistogramConfig { half_h: 2, half_w: 2 };
        let f = Tensor::new(vec![2, 1, 4], vec![1.0, -2.0, 2.0, 1.999, 0.0, -2.0, 0.0, -3.0]).unwrap();
        let h = motion_histogram(&[f], cfg).unwrap();
        assert_eq!(h.get(1, 0), 1);
        assert_eq!(h.get(-2, -2), 1);
        assert_eq!(h.clipped, 2);
        assert_eq!(h.binned() + h.clipped, 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn histogram_conserves(seed in any::<u64>(), n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = HistogramConfig { half_h: 8, half_w: 16 };
            let flows: Vec<Tensor> = (0..n).map(|_| random_tensor(&[2, 4, 5], 20.0, &mut rng)).collect();
            let h = motion_histogram(&flows, cfg).unwrap();
            prop_assert_eq!(h.binned() + h.clipped, (n * 20) as u64);
            prop_assert_eq!(h.total, (n * 20) as u64);
        }

        #[test]
        fn wauc_monotone_in_errors(seed in any::<u64>(), k in 0usize..16, bump in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errs: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..6.0)).collect();
            let mut worse = errs.clone();
            worse[k] += bump;
            prop_assert!(wauc_from_errors(&worse).unwrap() <= wauc_from_errors(&errs).unwrap() + 1e-12);
        }
    }
}
