//! Training loop: corrupt the ground truth, run conditioning and denoiser,
//! back-propagate the hybrid objective and take an Adam step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use camodiff_nn::{Adam, AdamConfig, Float, ParamGrads, Tape, Tensor};
use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data_io::{batch_images, batch_masks, load_pair, BinaryMask, DatasetSpec, RgbImage};
use crate::diffusion::{q_sample, DenoiserOutput, MaskSpace, MaskTensor};
use crate::error::{Error, Result};
use crate::model::{mask_tensor, ImageBatch, Model, ModelConfig};
use crate::objectives::{evaluate_objective, LossBreakdown, LossWeights, ObjectiveEval, ObjectiveInputs, DEFAULT_LAMBDA_VLB};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
    /// Brightness, contrast and saturation factors are drawn from
    /// `1 ± jitter_strength`.
    pub jitter_strength: f64,
    /// Smallest crop side as a fraction of the source side.
    pub crop_min_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, crop: true, jitter: true, jitter_strength: 0.2, crop_min_scale: 0.75 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip: false, crop: false, jitter: false, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub max_steps: u64,
    pub lambda_vlb: f64,
    pub simple_weight: f64,
    pub static_weight: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_interval: u64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            learning_rate: 1e-4,
            batch_size: 16,
            image_size: (64, 64),
            max_steps: 5000,
            lambda_vlb: DEFAULT_LAMBDA_VLB,
            simple_weight: 1.0,
            static_weight: 1.0,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_interval: 1000,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image_size {h}x{w} must be a positive multiple of 32")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        if self.lambda_vlb < 0.0 || self.simple_weight < 0.0 || self.static_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        let a = &self.augment;
        if !(0.0..1.0).contains(&a.jitter_strength) || !(a.crop_min_scale > 0.0 && a.crop_min_scale <= 1.0) {
            return Err(Error::Config("jitter_strength must be in [0, 1) and crop_min_scale in (0, 1]".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { simple: self.simple_weight, vlb: self.lambda_vlb, static_term: self.static_weight }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, ..Default::default() }
    }
}

/// Random source for one purpose at one step, independent of everything
/// that ran before, so a resumed run replays the same draws.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

const STREAM_NOISE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: &TrainConfig) -> Result<Self> {
        let model = Model::new(model_config, config.seed)?;
        let optimizer = Adam::new(&model.params, config.adam());
        Ok(Self { model, optimizer, step: 0 })
    }
}

/// Forward pass plus gradients of the weighted objective for every
/// parameter. `frozen_mean` pins the bound's model mean (see
/// [`evaluate_objective`]).
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads<T: Float>(
    model: &Model<T>,
    images: &ImageBatch,
    y0: &MaskTensor,
    t: &[usize],
    eps: &[f64],
    schedule: &NoiseSchedule,
    weights: LossWeights,
    frozen_mean: Option<&[f64]>,
) -> Result<(ObjectiveEval, ParamGrads<T>)> {
    let y0 = y0.to_diffusion();
    let yt = q_sample(&y0, t, eps, schedule)?;
    let mut tape = Tape::new(&model.params);
    let x = tape.input(images.to_tensor());
    let y = tape.input(mask_tensor(&yt));
    let cond = model.network.condition(&mut tape, x)?;
    let parent_t: Vec<usize> = t.iter().map(|&ti| schedule.original_index(ti)).collect();
    let vars = model.network.denoise(&mut tape, x, y, &parent_t, cond.fused.f)?;

    let (n, h, w) = (y0.batch(), y0.height(), y0.width());
    let output = DenoiserOutput::new(n, h, w, tape.value(vars.eps).to_f64(), tape.value(vars.v).to_f64())?;
    let static_mask = MaskTensor::new(n, h, w, tape.value(cond.static_mask).to_f64(), MaskSpace::Probability)?;
    let inputs = ObjectiveInputs { y0: &y0, yt: &yt, t, eps_true: eps, output: &output, static_mask: &static_mask };
    let eval = evaluate_objective(inputs, schedule, weights, frozen_mean)?;

    let shape = [n, 1, h, w];
    let seeds = [
        (vars.eps, Tensor::from_f64(&shape, &eval.grad_eps)),
        (vars.v, Tensor::from_f64(&shape, &eval.grad_v)),
        (cond.static_mask, Tensor::from_f64(&shape, &eval.grad_static)),
    ];
    let grads = tape.backward(&seeds).into_params();
    Ok((eval, grads))
}

/// Draws per-element timesteps in `[1, T]` and standard normal noise.
pub fn draw_noise<R: Rng>(rng: &mut R, batch: usize, pixels: usize, steps: usize) -> (Vec<usize>, Vec<f64>) {
    let t = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    let eps = (0..batch * pixels).map(|_| rng.sample(StandardNormal)).collect();
    (t, eps)
}

/// One optimisation step on `(images, masks)`; `masks` are 0/1 in
/// probability space. Advances `state.step` only on success.
pub fn train_step(state: &mut TrainState, images: &ImageBatch, masks: &MaskTensor, config: &TrainConfig, schedule: &NoiseSchedule) -> Result<LossBreakdown> {
    if masks.batch() != images.batch || masks.height() != images.height || masks.width() != images.width {
        return Err(Error::Shape("image and mask batches differ".into()));
    }
    let mut rng = step_rng(config.seed, state.step, STREAM_NOISE);
    let (t, eps) = draw_noise(&mut rng, masks.batch(), masks.pixels(), schedule.steps());
    let (eval, mut grads) = loss_and_grads(&state.model, images, masks, &t, &eps, schedule, config.weights(), None)?;
    if !eval.breakdown.is_finite() {
        let batch_index = eval.per_element.iter().position(|e| e.iter().any(|v| !v.is_finite())).unwrap_or(0);
        return Err(Error::Divergence { step: state.step, batch_index });
    }
    let norm = grads.clip_global_norm(config.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Divergence { step: state.step, batch_index: 0 });
    }
    state.optimizer.step(&mut state.model.params, &grads);
    state.step += 1;
    Ok(eval.breakdown)
}

/// Geometric transforms applied identically to image and mask, colour
/// jitter on the image only, then resize to `size = (height, width)`.
pub fn augment<R: Rng>(image: &RgbImage, mask: &BinaryMask, rng: &mut R, config: &AugmentConfig, size: (usize, usize)) -> (RgbImage, BinaryMask) {
    let mut img = image.clone();
    let mut m = mask.clone();
    if config.crop {
        let (w, h) = img.dimensions();
        let scale = rng.random_range(config.crop_min_scale..=1.0);
        let cw = ((w as f64 * scale).round() as u32).clamp(1, w);
        let ch = ((h as f64 * scale).round() as u32).clamp(1, h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        img = imageops::crop_imm(&img, x0, y0, cw, ch).to_image();
        m = imageops::crop_imm(&m, x0, y0, cw, ch).to_image();
    }
    if config.flip && rng.random::<bool>() {
        imageops::flip_horizontal_in_place(&mut img);
        imageops::flip_horizontal_in_place(&mut m);
    }
    if config.jitter {
        let s = config.jitter_strength;
        let mut factor = || rng.random_range(1.0 - s..=1.0 + s) as f32;
        let (b, c, sat) = (factor(), factor(), factor());
        let gray = |p: [f32; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        img.pixels_mut().for_each(|p| p.0 = p.0.map(|v| (v * b).clamp(0.0, 1.0)));
        let mean = img.pixels().map(|p| gray(p.0)).sum::<f32>() / (img.width() * img.height()) as f32;
        img.pixels_mut().for_each(|p| p.0 = p.0.map(|v| ((v - mean) * c + mean).clamp(0.0, 1.0)));
        img.pixels_mut().for_each(|p| {
            let g = gray(p.0);
            p.0 = p.0.map(|v| ((v - g) * sat + g).clamp(0.0, 1.0));
        });
    }
    let (w, h) = (size.1 as u32, size.0 as u32);
    if img.dimensions() != (w, h) {
        img = imageops::resize(&img, w, h, FilterType::Triangle);
        m = imageops::resize(&m, w, h, FilterType::Nearest);
    }
    (img, m)
}

/// Images and masks held in memory for training.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub images: Vec<RgbImage>,
    pub masks: Vec<BinaryMask>,
}

impl TrainingSet {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        let mut set = Self::default();
        for stem in &spec.stems {
            let (img, mask) = load_pair(spec, stem)?;
            set.images.push(img);
            set.masks.push(mask);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Dataset indices for the batch at `step`: epoch-wise shuffles seeded by
/// `(seed, epoch)`, read sequentially.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let pos = step * batch as u64 + j;
            let epoch = pos / len as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(&mut step_rng(seed, epoch, STREAM_SHUFFLE));
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[(pos % len as u64) as usize]
        })
        .collect()
}

/// Augmented batch for `step`.
pub fn make_batch(data: &TrainingSet, config: &TrainConfig, step: u64) -> Result<(ImageBatch, MaskTensor)> {
    let idx = batch_indices(data.len(), config.batch_size, config.seed, step);
    let mut rng = step_rng(config.seed, step, STREAM_AUGMENT);
    let pairs: Vec<(RgbImage, BinaryMask)> =
        idx.iter().map(|&i| augment(&data.images[i], &data.masks[i], &mut rng, &config.augment, config.image_size)).collect();
    let imgs: Vec<&RgbImage> = pairs.iter().map(|p| &p.0).collect();
    let masks: Vec<&BinaryMask> = pairs.iter().map(|p| &p.1).collect();
    Ok((batch_images(&imgs)?, batch_masks(&masks)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str = "step,simple,vlb,static,total";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!("{},{:.8e},{:.8e},{:.8e},{:.8e}", self.step, l.simple, l.vlb, l.static_term, l.total)
    }
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints and `loss.csv` go here when set.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Print a progress line every this many steps (0: silent).
    pub progress_every: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn write_checkpoint(dir: &Path, name: &str, ck: &Checkpoint) -> Result<()> {
    ck.save(&dir.join(name))
}

/// Runs `train_step` until `config.train.max_steps`, starting from the
/// resume checkpoint if one is given.
pub fn train(data: &TrainingSet, config: &RunConfig, options: TrainOptions) -> Result<TrainOutcome> {
    let tc = &config.train;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let schedule = tc.schedule()?;
    let mut state = match options.resume {
        Some(ck) => ck.into_state(tc)?,
        None => TrainState::new(config.model.clone(), tc)?,
    };
    let mut log_file = None;
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("loss.csv");
        let append = state.step > 0 && path.is_file();
        let mut f = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&path).map_err(|e| Error::io(&path, e))?;
        if !append {
            writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        log_file = Some((f, path));
    }
    let mut log = Vec::new();
    while state.step < tc.max_steps {
        let (images, masks) = make_batch(data, tc, state.step)?;
        let step = state.step;
        let loss = train_step(&mut state, &images, &masks, tc, &schedule)?;
        let row = LogRow { step, loss };
        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if options.progress_every > 0 && (step + 1) % options.progress_every == 0 {
            eprintln!("step {:>6}  simple {:.4}  vlb {:.4}  static {:.4}", step + 1, loss.simple, loss.vlb, loss.static_term);
        }
        log.push(row);
        if let Some(dir) = &options.out_dir {
            if tc.checkpoint_interval > 0 && state.step % tc.checkpoint_interval == 0 && state.step < tc.max_steps {
                write_checkpoint(dir, &format!("checkpoint_{:06}.ckpt", state.step), &Checkpoint::from_state(&state, config))?;
            }
        }
    }
    let checkpoint = Checkpoint::from_state(&state, config);
    if let Some(dir) = &options.out_dir {
        write_checkpoint(dir, "final.ckpt", &checkpoint)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
