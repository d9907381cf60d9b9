use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::Args;
use memfof::corrvol::{bytes_to_gib, memory_bytes, MemoryModel};
use memfof::flowio::{colorize, read_flo, read_image, write_flo, write_rgb, RgbImage};
use memfof::learn::{train_toy as run_training, TrainConfig};
use memfof::metrics::{HistogramConfig, MetricAccumulator, MetricReport, MotionHistogram};
use memfof::model::{BidirFlow, Model};
use memfof::pipeline::{bench as run_bench, BenchConfig};
use memfof::pipeline::{infer_upscaled2x, VideoSession};
use memfof::selfcheck::run_selfcheck;
use memfof::tensors::Tensor;

use crate::config::RunConfig;
use crate::Failure;

const IMAGE_EXTS: &[&str] = &["png", "ppm"];

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

/// Files in `dir` with one of `exts`, sorted by file name.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// A directory of PNG/PPM frames (sorted by name) or at least three frame paths in order
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory
    #[arg(short, long)]
    out: PathBuf,
}

fn load_frames(inputs: &[PathBuf]) -> Result<Vec<Tensor>, Failure> {
    let paths = match inputs {
        [dir] if dir.is_dir() => list_files(dir, IMAGE_EXTS)?,
        _ => inputs.to_vec(),
    };
    if paths.len() < 3 {
        return Err(Failure::usage(format!("need at least 3 frames, got {}", paths.len())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = read_image(p).map_err(|e| io_err(p, e))?;
        if let Some(first) = frames.first() {
            let first: &Tensor = first;
            if f.shape() != first.shape() {
                return Err(Failure::usage(format!("{} is {:?}, expected {:?} like {}", p.display(), f.shape(), first.shape(), paths[0].display())));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Splits `centers` into at most `jobs` contiguous ranges.
fn split(centers: Range<usize>, jobs: usize) -> Vec<Range<usize>> {
    let n = centers.len();
    let k = jobs.clamp(1, n.max(1));
    (0..k)
        .map(|j| centers.start + j * n / k..centers.start + (j + 1) * n / k)
        .filter(|r| !r.is_empty())
        .collect()
}

fn write_pair(out: &Path, center: usize, flow: &BidirFlow, viz: bool) -> Result<(), Failure> {
    for (tag, f) in [("fwd", &flow.f_next), ("bwd", &flow.f_prev)] {
        let p = out.join(format!("{center:04}_{tag}.flo"));
        write_flo(&p, f).map_err(|e| io_err(&p, e))?;
        if viz {
            let p = out.join(format!("{center:04}_{tag}.png"));
            let img = colorize(f, None)?;
            write_rgb(&p, &img).map_err(|e| io_err(&p, e))?;
        }
    }
    Ok(())
}

fn estimate_range(model: &Model, frames: &[Tensor], centers: Range<usize>, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (iters, viz) = (cfg.iters(), cfg.viz.unwrap_or(false));
    if cfg.upscale2x.unwrap_or(false) {
        for c in centers {
            let flow = infer_upscaled2x(model, [&frames[c - 1], &frames[c], &frames[c + 1]], iters)?;
            write_pair(out, c, &flow, viz)?;
        }
        return Ok(());
    }
    let mut session = VideoSession::new(model, iters, cfg.session_options());
    session.push(&frames[centers.start - 1])?;
    session.push(&frames[centers.start])?;
    for c in centers {
        let flow = session.step(&frames[c + 1])?;
        write_pair(out, c, &flow, viz)?;
    }
    Ok(())
}

pub fn estimate(args: &EstimateArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let frames = load_frames(&args.inputs)?;
    let model = cfg.build_model()?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let ranges = split(1..frames.len() - 1, cfg.jobs());
    std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|r| {
                let (model, frames, out) = (&model, &frames, &args.out);
                s.spawn(move || estimate_range(model, frames, r.clone(), cfg, out))
            })
            .collect();
        handles.into_iter().map(|h| h.join().map_err(|_| Failure::invariant("worker thread panicked"))?).collect::<Result<(), _>>()
    })?;
    println!("wrote {} flow pairs to {}", frames.len() - 2, args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted .flo files
    pred: PathBuf,
    /// Directory of ground-truth .flo files with matching names
    gt: PathBuf,
    /// Also write the per-file and aggregate rows as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Ground truth is valid where finite and below the Middlebury unknown-flow marker.
fn valid_mask(gt: &Tensor) -> Vec<bool> {
    let n = gt.numel() / 2;
    let ok = |v: f32| v.is_finite() && v.abs() < 1e9;
    (0..n).map(|i| ok(gt.data()[i]) && ok(gt.data()[n + i])).collect()
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let names = |d: &Path| -> Result<BTreeSet<String>, Failure> { Ok(list_files(d, &["flo"])?.iter().map(|p| file_name(p)).collect()) };
    let (pred, gt) = (names(&args.pred)?, names(&args.gt)?);
    let mut missing: Vec<String> = pred.difference(&gt).map(|n| format!("{n}: no ground truth")).collect();
    missing.extend(gt.difference(&pred).map(|n| format!("{n}: no prediction")));
    for m in &missing {
        eprintln!("missing counterpart: {m}");
    }
    let common: Vec<&String> = pred.intersection(&gt).collect();
    if common.is_empty() {
        return Err(Failure::usage(format!("no file names shared by {} and {}", args.pred.display(), args.gt.display())));
    }
    let mut total = MetricAccumulator::new();
    let mut rows = Vec::new();
    for name in common {
        let (pp, gp) = (args.pred.join(name), args.gt.join(name));
        let p = read_flo(&pp).map_err(|e| io_err(&pp, e))?;
        let g = read_flo(&gp).map_err(|e| io_err(&gp, e))?;
        let mask = valid_mask(&g);
        let mut acc = MetricAccumulator::new();
        acc.add(&p, &g, Some(&mask)).map_err(|e| io_err(&pp, e))?;
        total.add(&p, &g, Some(&mask))?;
        match acc.report() {
            Some(r) => rows.push((name.clone(), r)),
            None => eprintln!("{name}: no valid ground-truth pixels"),
        }
    }
    let all = total.report().ok_or_else(|| Failure::usage("no valid ground-truth pixels in any file"))?;
    rows.push(("all".to_string(), all));
    print!("{}", MetricReport::table(&rows));
    if let Some(path) = &args.csv {
        let mut s = format!("{}\n", MetricReport::CSV_HEADER);
        for (n, r) in &rows {
            let _ = writeln!(s, "{}", r.csv_row(n));
        }
        std::fs::write(path, s).map_err(|e| io_err(path, e))?;
    }
    if !missing.is_empty() {
        return Err(Failure::usage(format!("{} file(s) lacked a counterpart and were excluded", missing.len())));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 448)]
    width: usize,
    /// Timed steps per variant
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Run at correlation scales 8, 16 and 24 in turn
    #[arg(long)]
    sweep: bool,
    /// Also write the rows as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn bench(args: &BenchArgs, cfg: &RunConfig) -> Result<(), Failure> {
    if args.sweep && cfg.weights.is_some() {
        return Err(Failure::usage("--sweep re-initialises the model at each scale and cannot use --weights"));
    }
    let scales = if args.sweep { vec![8, 16, 24] } else { vec![cfg.scale.unwrap_or(16)] };
    let mut csv = String::new();
    let mut summary = Vec::new();
    for scale in scales {
        let run = RunConfig { scale: Some(scale), ..cfg.clone() };
        let model = run.build_model()?;
        let scale = model.config().corr_scale;
        let m = model.config().input_multiple();
        let (ph, pw) = (args.height.div_ceil(m) * m, args.width.div_ceil(m) * m);
        let bc = BenchConfig { height: args.height, width: args.width, repeats: args.repeats, iters: run.iters(), seed: run.seed()? };
        let report = run_bench(&model, &bc)?;
        let predicted = memory_bytes(&MemoryModel::three_frame(ph, pw, scale));
        println!("scale {scale} (padded to {ph}x{pw})");
        print!("{}", report.to_table());
        let measured: Vec<usize> = report.rows.iter().map(|r| r.peak_volume_bytes).collect();
        let agree = measured.iter().all(|&b| b as u64 == predicted);
        println!(
            "volume bytes: predicted {predicted} ({:.4} GiB), measured {} [{}]\n",
            bytes_to_gib(predicted),
            measured.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("/"),
            if agree { "match" } else { "MISMATCH" }
        );
        for (i, line) in report.to_csv().lines().enumerate() {
            if i > 0 || csv.is_empty() {
                let _ = writeln!(csv, "{},{line}", if i == 0 { "scale".to_string() } else { scale.to_string() });
            }
        }
        summary.push((scale, predicted, agree));
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, &csv).map_err(|e| io_err(path, e))?;
    }
    if summary.len() > 1 {
        println!("scale  volume_bytes");
        for (s, b, _) in &summary {
            println!("{s:>5}  {b}");
        }
        if !summary.windows(2).all(|w| w[1].1 < w[0].1) {
            return Err(Failure::invariant("volume bytes are not decreasing in scale"));
        }
    }
    if let Some((s, _, _)) = summary.iter().find(|x| !x.2) {
        return Err(Failure::invariant(format!("measured volume bytes differ from the memory model at scale {s}")));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct HistogramArgs {
    /// Directory of .flo files
    flows: PathBuf,
    /// Output PNG with log-scaled counts
    out: PathBuf,
    /// CSV of non-zero bins [default: OUT with a .csv extension]
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Rows cover horizontal motion in [-half_h, half_h)
    #[arg(long, default_value_t = 1080)]
    half_h: i64,
    /// Columns cover vertical motion in [-half_w, half_w)
    #[arg(long, default_value_t = 1920)]
    half_w: i64,
}

pub fn histogram(args: &HistogramArgs) -> Result<(), Failure> {
    if args.half_h <= 0 || args.half_w <= 0 {
        return Err(Failure::usage("histogram extents must be positive"));
    }
    let files = list_files(&args.flows, &["flo"])?;
    if files.is_empty() {
        return Err(Failure::usage(format!("no .flo files in {}", args.flows.display())));
    }
    let mut hist = MotionHistogram::new(HistogramConfig { half_h: args.half_h, half_w: args.half_w });
    for p in &files {
        let f = read_flo(p).map_err(|e| io_err(p, e))?;
        hist.add(&f).map_err(|e| io_err(p, e))?;
    }
    if hist.binned() + hist.clipped != hist.total {
        return Err(Failure::invariant(format!("{} binned + {} clipped != {} vectors", hist.binned(), hist.clipped, hist.total)));
    }
    let (h, w) = hist.cfg.dims();
    let img = RgbImage { width: w, height: h, data: hist.log_image().iter().flat_map(|&v| [v, v, v]).collect() };
    write_rgb(&args.out, &img).map_err(|e| io_err(&args.out, e))?;
    let csv_path = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut csv = String::from("u,v,count\n");
    for (u, v, c) in hist.nonzero() {
        let _ = writeln!(csv, "{u},{v},{c}");
    }
    std::fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    println!("{} files, {} vectors, {} binned, {} clipped", files.len(), hist.total, hist.binned(), hist.clipped);
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Where to write the trained weights
    #[arg(short, long)]
    out: PathBuf,
    /// Per-step loss and EPE as CSV
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
}

pub fn train_toy(args: &TrainArgs, cfg: &RunConfig) -> Result<(), Failure> {
    let seed = cfg.seed()?;
    let defaults = TrainConfig::default();
    let mut model = match cfg.weights {
        Some(_) => cfg.build_model()?,
        None => Model::init(cfg.model_config(), seed)?,
    };
    let tc = TrainConfig {
        model: model.config().clone(),
        dims: (args.height, args.width),
        steps: args.steps,
        lr: args.lr.unwrap_or(defaults.lr),
        iters: cfg.iters.unwrap_or(defaults.iters),
        seed,
        ..defaults
    };
    if tc.steps > 0 {
        let log = run_training(&mut model, &tc, |r| {
            if r.step % 50 == 0 || r.step + 1 == tc.steps {
                eprintln!("step {:>5}  loss {:.5}  epe {:.4}", r.step, r.loss, r.epe);
            }
        })?;
        println!("held-out EPE {:.4} -> {:.4}", log.heldout_epe_before, log.heldout_epe_after);
        if let Some(p) = &args.log {
            std::fs::write(p, log.to_csv()).map_err(|e| io_err(p, e))?;
        }
    } else if let Some(p) = &args.log {
        std::fs::write(p, "step,loss,epe\n").map_err(|e| io_err(p, e))?;
    }
    model.weights().save(&args.out).map_err(|e| io_err(&args.out, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn selfcheck(cfg: &RunConfig) -> Result<(), Failure> {
    let report = run_selfcheck(cfg.seed()?);
    for c in &report {
        println!("{c}");
    }
    let failed = report.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::invariant(format!("{failed} of {} checks failed", report.len())));
    }
    println!("all {} checks passed", report.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_covers_centers_in_order() {
        assert_eq!(split(1..9, 3), vec![1..3, 3..6, 6..9]);
        assert_eq!(split(1..2, 4), vec![1..2]);
        assert_eq!(split(1..5, 1), vec![1..5]);
    }

    #[test]
    fn unknown_flow_is_masked() {
        let gt = Tensor::new(vec![2, 1, 3], vec![0.0, 1e9, f32::NAN, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(valid_mask(&gt), vec![true, false, false]);
    }
}
