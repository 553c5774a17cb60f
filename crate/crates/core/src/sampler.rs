//! Ancestral sampling from pure noise under image conditioning, plus
//! multi-sample ensembles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{p_mean_variance, sample_from, MaskSpace, MaskTensor};
use crate::error::{Error, Result};
use crate::model::{ImageBatch, Model};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleMode {
    #[default]
    Mean,
    /// Pixelwise vote of members binarized at 0.5; ties go to foreground.
    Majority,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    /// Respaced step count; `None` runs every step of the trained schedule.
    pub steps: Option<usize>,
    pub ensemble: usize,
    pub mode: EnsembleMode,
    pub seed: u64,
    /// Parent-schedule timesteps at which to keep clean-mask snapshots.
    pub trace: Vec<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: None, ensemble: 1, mode: EnsembleMode::Mean, seed: 0, trace: Vec::new() }
    }
}

impl SampleConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if let Some(s) = self.steps {
            if s == 0 || s > total_steps {
                return Err(Error::Config(format!("sample_steps {s} must be in [1, {total_steps}]")));
            }
        }
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble must be at least 1".into()));
        }
        if let Some(&t) = self.trace.iter().find(|&&t| t == 0 || t > total_steps) {
            return Err(Error::Config(format!("trace timestep {t} outside [1, {total_steps}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Parent-schedule timestep the snapshot was taken at.
    pub t: usize,
    /// Clean-mask estimate in probability space.
    pub mask: MaskTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// Ordered by decreasing `t`.
    pub snapshots: Vec<Snapshot>,
    pub final_mask: MaskTensor,
}

/// Maps each requested parent timestep to the nearest retained step of
/// `schedule` (ties go to the later step). Returns the steps
/// in decreasing order, deduplicated.
fn trace_steps(schedule: &NoiseSchedule, trace_at: &[usize]) -> Vec<usize> {
    let idx = schedule.original_indices();
    let mut steps: Vec<usize> = trace_at
        .iter()
        .map(|&t| {
            let k = idx.iter().enumerate().min_by_key(|(i, &o)| (o.abs_diff(t), std::cmp::Reverse(*i))).map(|(i, _)| i).unwrap_or(0);
            k + 1
        })
        .collect();
    steps.sort_unstable_by(|a, b| b.cmp(a));
    steps.dedup();
    steps
}

/// The sampling schedule for `num_steps` (`None`: the parent itself).
pub fn sampling_schedule(parent: &NoiseSchedule, num_steps: Option<usize>) -> Result<NoiseSchedule> {
    match num_steps {
        Some(n) if n > parent.steps() => Err(Error::Config(format!("num_steps {n} exceeds the trained schedule's {} steps", parent.steps()))),
        Some(n) if n == parent.steps() => Ok(parent.clone()),
        Some(n) => parent.respace(n),
        None => Ok(parent.clone()),
    }
}

fn check_parent(parent: &NoiseSchedule) -> Result<()> {
    if parent.is_respaced() {
        return Err(Error::Config("sampling needs the trained (unrespaced) schedule".into()));
    }
    Ok(())
}

/// One reverse chain with a precomputed conditioning feature.
fn run_chain(
    model: &Model<f32>,
    images: &ImageBatch,
    feature: &camodiff_nn::Tensor<f32>,
    schedule: &NoiseSchedule,
    seed: u64,
    trace: &[usize],
) -> Result<SampleTrace> {
    let (n, h, w) = (images.batch, images.height, images.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = (0..n * h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = MaskTensor::new(n, h, w, init, MaskSpace::Diffusion)?;
    let mut snapshots = Vec::new();
    let to_prob = |d: &[f64]| MaskTensor::new(n, h, w, d.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(), MaskSpace::Probability);
    for s in (1..=schedule.steps()).rev() {
        let parent_t = vec![schedule.original_index(s); n];
        let out = model.predict(images, &y, &parent_t, feature)?;
        let t = vec![s; n];
        let step = p_mean_variance(&out, &y, &t, schedule)?;
        if trace.contains(&s) {
            snapshots.push(Snapshot { t: schedule.original_index(s), mask: to_prob(&step.pred_y0)? });
        }
        if s == 1 {
            return Ok(SampleTrace { snapshots, final_mask: to_prob(&step.pred_y0)? });
        }
        y = sample_from(&step, &y, &t, &mut rng);
    }
    unreachable!("schedules have at least one step")
}

/// Draws `y_T ~ N(0, I)` and runs the reverse chain down to `t = 1` over
/// `parent` (respaced to `num_steps` when given). Conditioning is computed
/// once. `trace_at` lists parent timesteps for snapshots, each mapped to
/// the nearest retained step.
pub fn sample(model: &Model<f32>, parent: &NoiseSchedule, images: &ImageBatch, num_steps: Option<usize>, seed: u64, trace_at: &[usize]) -> Result<SampleTrace> {
    check_parent(parent)?;
    let schedule = sampling_schedule(parent, num_steps)?;
    for &t in trace_at {
        parent.check_t(t)?;
    }
    let cond = model.condition(images)?;
    run_chain(model, images, &cond.feature, &schedule, seed, &trace_steps(&schedule, trace_at))
}

/// Seed of ensemble member `k`; member 0 uses the base seed.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs `num_samples` chains with seeds from [`member_seed`] and combines
/// their final masks. Conditioning is shared across members.
pub fn sample_ensemble(
    model: &Model<f32>,
    parent: &NoiseSchedule,
    images: &ImageBatch,
    num_steps: Option<usize>,
    num_samples: usize,
    seed: u64,
    mode: EnsembleMode,
) -> Result<MaskTensor> {
    if num_samples == 0 {
        return Err(Error::Config("ensemble needs at least one sample".into()));
    }
    check_parent(parent)?;
    let schedule = sampling_schedule(parent, num_steps)?;
    let cond = model.condition(images)?;
    let members = (0..num_samples)
        .map(|k| run_chain(model, images, &cond.feature, &schedule, member_seed(seed, k), &[]).map(|t| t.final_mask))
        .collect::<Result<Vec<_>>>()?;
    combine(&members, mode)
}

/// Pixelwise combination of same-shaped probability masks.
pub fn combine(members: &[MaskTensor], mode: EnsembleMode) -> Result<MaskTensor> {
    let first = members.first().ok_or_else(|| Error::Config("nothing to combine".into()))?;
    if members.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Shape("ensemble members differ in shape".into()));
    }
    if members.len() == 1 {
        return Ok(first.clone());
    }
    let k = members.len() as f64;
    let data = (0..first.data().len())
        .map(|i| match mode {
            EnsembleMode::Mean => members.iter().map(|m| m.data()[i]).sum::<f64>() / k,
            EnsembleMode::Majority => {
                let votes = members.iter().filter(|m| m.data()[i] >= 0.5).count() as f64;
                f64::from(u8::from(2.0 * votes >= k))
            }
        })
        .collect();
    MaskTensor::new(first.batch(), first.height(), first.width(), data, MaskSpace::Probability)
}

/// Elementwise `mask >= threshold` as a 0/1 probability mask.
pub fn binarize(mask: &MaskTensor, threshold: f64) -> Result<MaskTensor> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let p = mask.to_probability();
    let data = p.data().iter().map(|&v| f64::from(u8::from(v >= threshold))).collect();
    MaskTensor::new(p.batch(), p.height(), p.width(), data, MaskSpace::Probability)
}
