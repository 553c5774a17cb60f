//! Command-line front end: `train`, `sample`, `eval`, `synth` and
//! `schedule-dump`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::imageops::{self, FilterType};
use image::Luma;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::parse_config;
use crate::data_io::{batch_images, generate_synthetic, list_stems, load_image, save_probability, DatasetSpec, SynthConfig, DEFAULT_EXTENSIONS};
use crate::error::{Error, Result};
use crate::metrics::evaluate_dataset;
use crate::sampler::{sample, sample_ensemble, EnsembleMode};
use crate::schedule::NoiseSchedule;
use crate::trainer::{train, TrainOptions, TrainingSet};

pub fn version_line() -> String {
    format!("camodiff {} (checkpoint format {FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
}

#[derive(Parser, Debug)]
#[command(name = "camodiff", about = "Mask diffusion for camouflaged object segmentation", disable_version_flag = true)]
struct Cli {
    /// Print artifact and checkpoint-format versions.
    #[arg(long, short = 'V')]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a dataset root holding Imgs/ and GT/.
    Train(TrainArgs),
    /// Sample masks for every image in a directory.
    Sample(SampleArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic camouflage dataset.
    Synth(SynthArgs),
    /// Print the noise schedule as CSV.
    #[command(name = "schedule-dump")]
    ScheduleDump(ScheduleArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (config key `train_root`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest file under the dataset root (config key `train_manifest`).
    #[arg(long)]
    manifest: Option<String>,
    /// Output directory for checkpoints and `loss.csv` (config key `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, alias = "learning-rate")]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "T")]
    steps_t: Option<usize>,
    /// Disable the attention module at the bottleneck.
    #[arg(long)]
    no_iam: bool,
    /// Use only the deepest encoder feature as conditioning.
    #[arg(long)]
    no_fusion: bool,
    /// Print progress every N steps.
    #[arg(long, default_value_t = 100)]
    progress: u64,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Respaced step count; defaults to the checkpoint's `sample_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Run every step of the trained schedule.
    #[arg(long, conflicts_with = "steps")]
    full: bool,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    mode: Option<EnsembleMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent timesteps for clean-mask snapshots, comma separated.
    #[arg(long, value_delimiter = ',')]
    trace: Vec<usize>,
    /// Configuration whose schedule must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Skip per-image min-max normalisation of predictions.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.35)]
    contrast: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long = "T", default_value_t = crate::schedule::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = crate::schedule::DEFAULT_BETA_START)]
    beta_start: f64,
    #[arg(long, default_value_t = crate::schedule::DEFAULT_BETA_END)]
    beta_end: f64,
    /// Respace to this many steps before printing.
    #[arg(long)]
    respace: Option<usize>,
}

impl clap::ValueEnum for EnsembleMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[EnsembleMode::Mean, EnsembleMode::Majority]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            EnsembleMode::Mean => "mean",
            EnsembleMode::Majority => "majority",
        }))
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.version {
        println!("{}", version_line());
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("ERROR usage: a subcommand is required (train, sample, eval, synth, schedule-dump)");
        return 2;
    };
    let result = match command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ScheduleDump(a) => cmd_schedule(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {e}", e.code());
            1
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    put("train_root", a.data.map(|p| p.display().to_string()));
    put("train_manifest", a.manifest);
    put("out_dir", a.out.map(|p| p.display().to_string()));
    put("max_steps", a.max_steps.map(|v| v.to_string()));
    put("batch_size", a.batch_size.map(|v| v.to_string()));
    put("learning_rate", a.lr.map(|v| v.to_string()));
    put("seed", a.seed.map(|v| v.to_string()));
    put("T", a.steps_t.map(|v| v.to_string()));
    put("use_iam", a.no_iam.then(|| "false".into()));
    put("use_fusion", a.no_fusion.then(|| "false".into()));
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let config = parse_config(a.config.as_deref(), &overrides)?;
    let root = config.require_path("train_root", &config.train_root)?;
    let out = config.require_path("out_dir", &config.out_dir)?.to_path_buf();
    let spec = DatasetSpec::open(root, Some(&config.train_manifest))?;
    let data = TrainingSet::load(&spec)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let outcome = train(&data, &config, TrainOptions { out_dir: Some(out.clone()), resume, progress_every: a.progress })?;
    let last = outcome.log.last().map(|r| format!(", final total loss {:.6}", r.loss.total)).unwrap_or_default();
    println!("trained to step {}{last}; checkpoint {}", outcome.checkpoint.step, out.join("final.ckpt").display());
    Ok(())
}

/// Resizes `img` to `(w, h)` when needed.
fn fit(img: &crate::data_io::RgbImage, w: u32, h: u32) -> crate::data_io::RgbImage {
    if img.dimensions() == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, w, h, FilterType::Triangle)
    }
}

/// Writes a probability mask sampled at `(sw, sh)` back at `(w, h)`.
fn write_mask(path: &Path, probs: &[f64], (sw, sh): (u32, u32), (w, h): (u32, u32)) -> Result<()> {
    if (sw, sh) == (w, h) {
        return save_probability(path, w, h, probs);
    }
    let small = image::ImageBuffer::<Luma<f32>, Vec<f32>>::from_fn(sw, sh, |x, y| Luma([probs[(y * sw + x) as usize] as f32]));
    let big = imageops::resize(&small, w, h, FilterType::Triangle);
    let data: Vec<f64> = big.pixels().map(|p| f64::from(p.0[0])).collect();
    save_probability(path, w, h, &data)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(path) = &a.config {
        let cfg = parse_config(Some(path), &[])?;
        let (x, y) = (&cfg.train, &ck.config.train);
        if (x.diffusion_steps, x.beta_start, x.beta_end) != (y.diffusion_steps, y.beta_start, y.beta_end) {
            return Err(Error::Checkpoint(format!("schedule in {} differs from the checkpoint's", path.display())));
        }
    }
    let model = ck.to_model()?;
    let parent: NoiseSchedule = ck.config.train.schedule()?;
    let opts = &ck.config.sample;
    let steps = if a.full { None } else { a.steps.or(opts.steps) };
    let ensemble = a.ensemble.unwrap_or(opts.ensemble);
    let mode = a.mode.unwrap_or(opts.mode);
    let seed = a.seed.unwrap_or(opts.seed);
    let trace = if a.trace.is_empty() { opts.trace.clone() } else { a.trace };
    let (th, tw) = ck.config.train.image_size;
    let exts: Vec<String> = DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect();
    let stems = list_stems(&a.images, &exts)?;
    if stems.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", a.images.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for stem in &stems {
        let path = exts.iter().map(|e| a.images.join(format!("{stem}.{e}"))).find(|p| p.is_file()).expect("listed stem");
        let img = load_image(&path)?;
        let orig = img.dimensions();
        let batch = batch_images(&[&fit(&img, tw as u32, th as u32)])?;
        let size = (tw as u32, th as u32);
        if ensemble > 1 {
            let mask = sample_ensemble(&model, &parent, &batch, steps, ensemble, seed, mode)?;
            write_mask(&a.out.join(format!("{stem}.png")), mask.data(), size, orig)?;
        } else {
            let tr = sample(&model, &parent, &batch, steps, seed, &trace)?;
            write_mask(&a.out.join(format!("{stem}.png")), tr.final_mask.data(), size, orig)?;
            for snap in &tr.snapshots {
                write_mask(&a.out.join(format!("{stem}_t{:03}.png", snap.t)), snap.mask.data(), size, orig)?;
            }
        }
    }
    println!("wrote {} masks to {}", stems.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dataset(&a.pred, &a.gt, !a.raw)?;
    for name in &report.unmatched {
        eprintln!("WARN unmatched: {name}");
    }
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&report.to_json()).expect("plain values serialise");
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    println!("{}", crate::metrics::REPORT_HEADER);
    println!("{}", report.mean_row());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig { count: a.count, image_size: a.size, contrast: a.contrast, seed: a.seed, ..Default::default() };
    let spec = generate_synthetic(&config, &a.out)?;
    println!("wrote {} pairs to {} ({} in train.txt)", a.count, a.out.display(), spec.len());
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs) -> Result<()> {
    let mut s = NoiseSchedule::linear(a.steps, a.beta_start, a.beta_end)?;
    if let Some(n) = a.respace {
        s = s.respace(n)?;
    }
    let mut out = std::io::stdout().lock();
    out.write_all(s.to_csv().as_bytes()).map_err(|e| Error::io("<stdout>", e))
}
