//! Run configuration: `key=value` file values overlaid by command-line flags.

use std::path::{Path, PathBuf};

use memfof::model::{Model, ModelConfig};
use memfof::pipeline::SessionOptions;

use crate::Failure;

pub const KEYS: &[&str] = &[
    "weights",
    "iters",
    "scale",
    "gma",
    "context_dim",
    "upscale2x",
    "viz",
    "jobs",
    "seed",
    "late_upsample",
    "feature_reuse",
    "fast_corr",
    "corr_reuse",
];

pub const DEFAULT_ITERS: usize = 8;
pub const DEFAULT_CONTEXT_DIM: usize = 64;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub iters: Option<usize>,
    pub scale: Option<usize>,
    pub gma: Option<bool>,
    pub context_dim: Option<usize>,
    pub upscale2x: Option<bool>,
    pub viz: Option<bool>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub late_upsample: Option<bool>,
    pub feature_reuse: Option<bool>,
    pub fast_corr: Option<bool>,
    pub corr_reuse: Option<bool>,
}

fn parse_bool(key: &str, v: &str) -> Result<bool, Failure> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Failure::usage(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, Failure> {
    v.parse().map_err(|_| Failure::usage(format!("`{key}` expects a non-negative integer, got `{v}`")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "weights" => c.weights = Some(PathBuf::from(v)),
                "iters" => c.iters = Some(parse_num(k, v)?),
                "scale" => c.scale = Some(parse_num(k, v)?),
                "gma" => c.gma = Some(parse_bool(k, v)?),
                "context_dim" => c.context_dim = Some(parse_num(k, v)?),
                "upscale2x" => c.upscale2x = Some(parse_bool(k, v)?),
                "viz" => c.viz = Some(parse_bool(k, v)?),
                "jobs" => c.jobs = Some(parse_num(k, v)?),
                "seed" => c.seed = Some(parse_num(k, v)?),
                "late_upsample" => c.late_upsample = Some(parse_bool(k, v)?),
                "feature_reuse" => c.feature_reuse = Some(parse_bool(k, v)?),
                "fast_corr" => c.fast_corr = Some(parse_bool(k, v)?),
                "corr_reuse" => c.corr_reuse = Some(parse_bool(k, v)?),
                _ => return Err(Failure::usage(format!("config line {}: unknown key `{k}` (known: {})", n + 1, KEYS.join(", ")))),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        RunConfig {
            weights: top.weights.or(self.weights),
            iters: top.iters.or(self.iters),
            scale: top.scale.or(self.scale),
            gma: top.gma.or(self.gma),
            context_dim: top.context_dim.or(self.context_dim),
            upscale2x: top.upscale2x.or(self.upscale2x),
            viz: top.viz.or(self.viz),
            jobs: top.jobs.or(self.jobs),
            seed: top.seed.or(self.seed),
            late_upsample: top.late_upsample.or(self.late_upsample),
            feature_reuse: top.feature_reuse.or(self.feature_reuse),
            fast_corr: top.fast_corr.or(self.fast_corr),
            corr_reuse: top.corr_reuse.or(self.corr_reuse),
        }
    }

    /// Seed from the config, else `MEMFOF_SEED`, else 0.
    pub fn seed(&self) -> Result<u64, Failure> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("MEMFOF_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| Failure::usage(format!("MEMFOF_SEED must be an unsigned integer, got `{v}`"))),
            Err(_) => Ok(0),
        }
    }

    pub fn iters(&self) -> usize {
        self.iters.unwrap_or(DEFAULT_ITERS)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    pub fn session_options(&self) -> SessionOptions {
        let d = SessionOptions::all();
        SessionOptions {
            late_upsample: self.late_upsample.unwrap_or(d.late_upsample),
            feature_reuse: self.feature_reuse.unwrap_or(d.feature_reuse),
            fast_corr: self.fast_corr.unwrap_or(d.fast_corr),
            corr_reuse: self.corr_reuse.unwrap_or(d.corr_reuse),
        }
    }

    /// Architecture for freshly initialised weights.
    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::tiny(self.context_dim.unwrap_or(DEFAULT_CONTEXT_DIM));
        c.corr_scale = self.scale.unwrap_or(c.corr_scale);
        c.use_gma = self.gma.unwrap_or(c.use_gma);
        c.iters = self.iters();
        c
    }

    /// Loads `weights` when given, otherwise seeds a fresh model.
    pub fn build_model(&self) -> Result<Model, Failure> {
        let mut model = match &self.weights {
            Some(p) => {
                let m = Model::load(p).map_err(|e| Failure::usage(format!("weights {}: {e}", p.display())))?;
                let c = m.config();
                let clash = [
                    ("scale", self.scale.is_some_and(|s| s != c.corr_scale)),
                    ("gma", self.gma.is_some_and(|g| g != c.use_gma)),
                    ("context_dim", self.context_dim.is_some_and(|d| d != c.context_dim)),
                ];
                if let Some((k, _)) = clash.iter().find(|(_, bad)| *bad) {
                    return Err(Failure::usage(format!("`{k}` conflicts with the architecture stored in {}", p.display())));
                }
                m
            }
            None => {
                let cfg = self.model_config();
                cfg.validate().map_err(Failure::from)?;
                Model::init(cfg, self.seed()?).map_err(Failure::from)?
            }
        };
        model.set_iters(self.iters());
        Ok(model)
    }
}
