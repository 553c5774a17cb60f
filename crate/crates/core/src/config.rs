//! Flat `key = value` run configuration with command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{EnsembleMode, SampleConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sample: SampleConfig,
    pub train_root: Option<PathBuf>,
    pub train_manifest: String,
    pub out_dir: Option<PathBuf>,
    /// Min-max normalise predictions before computing metrics.
    pub normalize_predictions: bool,
}

impl RunConfig {
    pub fn new() -> Self {
        Self { train_manifest: "train.txt".into(), normalize_predictions: true, ..Default::default() }
    }
}

/// Every accepted key, in serialisation order.
pub const KEYS: &[&str] = &[
    "T",
    "beta_start",
    "beta_end",
    "learning_rate",
    "batch_size",
    "image_size",
    "max_steps",
    "lambda_vlb",
    "simple_weight",
    "static_weight",
    "augment_flip",
    "augment_crop",
    "augment_jitter",
    "jitter_strength",
    "crop_min_scale",
    "seed",
    "checkpoint_interval",
    "grad_clip",
    "encoder",
    "encoder_widths",
    "cond_width",
    "unet_widths",
    "time_width",
    "use_iam",
    "iam_residual",
    "use_fusion",
    "sample_steps",
    "ensemble",
    "ensemble_mode",
    "sample_seed",
    "trace",
    "train_root",
    "train_manifest",
    "out_dir",
    "normalize_predictions",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("key {key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v = parse_list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| Error::Config(format!("key {key}: expected {N} comma-separated values, got {}", v.len())))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "T" => t.diffusion_steps = parse(key, value)?,
            "beta_start" => t.beta_start = parse(key, value)?,
            "beta_end" => t.beta_end = parse(key, value)?,
            "learning_rate" | "lr" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "image_size" => {
                let v = value.trim();
                t.image_size = match v.split_once('x') {
                    Some((h, w)) => (parse(key, h)?, parse(key, w)?),
                    None => {
                        let s = parse(key, v)?;
                        (s, s)
                    }
                }
            }
            "max_steps" => t.max_steps = parse(key, value)?,
            "lambda_vlb" => t.lambda_vlb = parse(key, value)?,
            "simple_weight" => t.simple_weight = parse(key, value)?,
            "static_weight" => t.static_weight = parse(key, value)?,
            "augment_flip" => t.augment.flip = parse_bool(key, value)?,
            "augment_crop" => t.augment.crop = parse_bool(key, value)?,
            "augment_jitter" => t.augment.jitter = parse_bool(key, value)?,
            "jitter_strength" => t.augment.jitter_strength = parse(key, value)?,
            "crop_min_scale" => t.augment.crop_min_scale = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "encoder" => {
                if value.trim() != "toy" {
                    return Err(Error::Config(format!("key encoder: unsupported encoder {value:?} (available: toy)")));
                }
            }
            "encoder_widths" => m.conditioning.encoder_widths = parse_array(key, value)?,
            "cond_width" => m.conditioning.cond_width = parse(key, value)?,
            "unet_widths" => m.denoiser.widths = parse_array(key, value)?,
            "time_width" => m.denoiser.time_width = parse(key, value)?,
            "use_iam" => m.denoiser.use_iam = parse_bool(key, value)?,
            "iam_residual" => m.denoiser.iam_residual = parse_bool(key, value)?,
            "use_fusion" => m.conditioning.fusion = parse_bool(key, value)?,
            "sample_steps" => {
                let v = value.trim();
                self.sample.steps = if v.is_empty() || v == "full" { None } else { Some(parse(key, v)?) }
            }
            "ensemble" => self.sample.ensemble = parse(key, value)?,
            "ensemble_mode" => self.sample.mode = parse(key, value)?,
            "sample_seed" => self.sample.seed = parse(key, value)?,
            "trace" => self.sample.trace = parse_list(key, value)?,
            "train_root" => self.train_root = Some(PathBuf::from(value.trim())),
            "train_manifest" => self.train_manifest = value.trim().to_string(),
            "out_dir" => self.out_dir = Some(PathBuf::from(value.trim())),
            "normalize_predictions" => self.normalize_predictions = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        // The bottleneck width follows the conditioning width.
        self.model.denoiser.bottleneck_width = self.model.conditioning.cond_width;
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &self.model;
        Some(match key {
            "T" => t.diffusion_steps.to_string(),
            "beta_start" => t.beta_start.to_string(),
            "beta_end" => t.beta_end.to_string(),
            "learning_rate" | "lr" => t.learning_rate.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "image_size" => format!("{}x{}", t.image_size.0, t.image_size.1),
            "max_steps" => t.max_steps.to_string(),
            "lambda_vlb" => t.lambda_vlb.to_string(),
            "simple_weight" => t.simple_weight.to_string(),
            "static_weight" => t.static_weight.to_string(),
            "augment_flip" => t.augment.flip.to_string(),
            "augment_crop" => t.augment.crop.to_string(),
            "augment_jitter" => t.augment.jitter.to_string(),
            "jitter_strength" => t.augment.jitter_strength.to_string(),
            "crop_min_scale" => t.augment.crop_min_scale.to_string(),
            "seed" => t.seed.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "encoder" => "toy".to_string(),
            "encoder_widths" => join(&m.conditioning.encoder_widths),
            "cond_width" => m.conditioning.cond_width.to_string(),
            "unet_widths" => join(&m.denoiser.widths),
            "time_width" => m.denoiser.time_width.to_string(),
            "use_iam" => m.denoiser.use_iam.to_string(),
            "iam_residual" => m.denoiser.iam_residual.to_string(),
            "use_fusion" => m.conditioning.fusion.to_string(),
            "sample_steps" => self.sample.steps.map_or("full".to_string(), |s| s.to_string()),
            "ensemble" => self.sample.ensemble.to_string(),
            "ensemble_mode" => self.sample.mode.to_string(),
            "sample_seed" => self.sample.seed.to_string(),
            "trace" => join(&self.sample.trace),
            "train_root" => self.train_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "train_manifest" => self.train_manifest.clone(),
            "out_dir" => self.out_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "normalize_predictions" => self.normalize_predictions.to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = self.get(key).expect("listed key");
            if v.is_empty() && matches!(*key, "train_root" | "out_dir") {
                continue;
            }
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    /// Parses config text; later lines override earlier ones.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.sample.validate(self.train.diffusion_steps)
    }

    /// Fails naming `key` when an optional path is unset.
    pub fn require_path<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }
}

/// Reads `path` (if given), then applies `overrides` in order; overrides win.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(EnsembleMode::Mean),
            "majority" => Ok(EnsembleMode::Majority),
            other => Err(Error::Config(format!("unknown ensemble mode {other:?} (mean, majority)"))),
        }
    }
}

impl std::fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsembleMode::Mean => "mean",
            EnsembleMode::Majority => "majority",
        })
    }
}
