//! Forward (noising) and reverse (denoising) Gaussian process math on masks.
//!
//! Everything here is a pure function of its arguments; randomness is always
//! passed in explicitly. Timesteps are 1-based and given per batch element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSpace {
    /// Values nominally in `[-1, 1]`; the space the diffusion runs in.
    Diffusion,
    /// Values clamped to `[0, 1]`.
    Probability,
}

/// Batched single-channel mask, row-major `(batch, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    space: MaskSpace,
}

impl MaskTensor {
    pub fn new(batch: usize, height: usize, width: usize, mut data: Vec<f64>, space: MaskSpace) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {batch}x1x{height}x{width}",
                data.len()
            )));
        }
        if space == MaskSpace::Probability {
            data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        Ok(Self { batch, height, width, data, space })
    }

    pub fn zeros(batch: usize, height: usize, width: usize, space: MaskSpace) -> Self {
        Self { batch, height, width, data: vec![0.0; batch * height * width], space }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn space(&self) -> MaskSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Values of batch element `b`.
    pub fn item(&self, b: usize) -> &[f64] {
        &self.data[b * self.pixels()..(b + 1) * self.pixels()]
    }

    pub fn same_shape(&self, other: &MaskTensor) -> bool {
        (self.batch, self.height, self.width) == (other.batch, other.height, other.width)
    }

    /// `d = 2p - 1`.
    pub fn to_diffusion(&self) -> MaskTensor {
        match self.space {
            MaskSpace::Diffusion => self.clone(),
            MaskSpace::Probability => self.with_data(self.data.iter().map(|p| 2.0 * p - 1.0).collect(), MaskSpace::Diffusion),
        }
    }

    /// `p = (d + 1) / 2`, clamped to `[0, 1]`.
    pub fn to_probability(&self) -> MaskTensor {
        match self.space {
            MaskSpace::Probability => self.clone(),
            MaskSpace::Diffusion => self.with_data(
                self.data.iter().map(|d| ((d + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
                MaskSpace::Probability,
            ),
        }
    }

    fn with_data(&self, data: Vec<f64>, space: MaskSpace) -> MaskTensor {
        debug_assert_eq!(data.len(), self.data.len());
        MaskTensor { data, space, ..*self }
    }

    fn map_shape(&self, data: Vec<f64>) -> MaskTensor {
        self.with_data(data, self.space)
    }
}

/// Network prediction for one batch: noise estimate and the variance
/// interpolation fraction, both shaped like the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub eps: Vec<f64>,
    /// Interpolation weight in `[0, 1]` between `log beta_t` (1) and the
    /// clipped posterior log-variance (0).
    pub v: Vec<f64>,
}

impl DenoiserOutput {
    pub fn new(batch: usize, height: usize, width: usize, eps: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = batch * height * width;
        if eps.len() != n || v.len() != n {
            return Err(Error::Shape(format!("denoiser output lengths ({}, {}) != {n}", eps.len(), v.len())));
        }
        Ok(Self { batch, height, width, eps, v })
    }

    fn matches(&self, m: &MaskTensor) -> bool {
        (self.batch, self.height, self.width) == (m.batch, m.height, m.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStepOutput {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub log_variance: Vec<f64>,
    /// Clean-mask estimate implied by the predicted noise, clamped to `[-1, 1]`.
    pub pred_y0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Clipped at `t = 1` (see [`NoiseSchedule::posterior_log_variance_clipped`]).
    pub log_variance: Vec<f64>,
}

/// Coefficient form of the forward noising step.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseForm {
    /// `sqrt(a) * y + sqrt(1 - a) * eps`, the variance-preserving form.
    Standard,
    /// `sqrt(a) * y + (1 - a) * eps`, kept only to compare against.
    Literal,
}

fn check_batch(t: &[usize], batch: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t.len() != batch {
        return Err(Error::Shape(format!("{} timesteps for batch of {batch}", t.len())));
    }
    t.iter().try_for_each(|&ti| schedule.check_t(ti))
}

fn check_same(a: &MaskTensor, b: &MaskTensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.batch, a.height, a.width, b.batch, b.height, b.width
        )));
    }
    Ok(())
}

/// Closed-form marginal `y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(y0: &MaskTensor, t: &[usize], eps: &[f64], schedule: &NoiseSchedule) -> Result<MaskTensor> {
    q_sample_with_form(y0, t, eps, schedule, NoiseForm::Standard)
}

#[doc(hidden)]
pub fn q_sample_with_form(y0: &MaskTensor, t: &[usize], eps: &[f64], schedule: &NoiseSchedule, form: NoiseForm) -> Result<MaskTensor> {
    check_batch(t, y0.batch, schedule)?;
    if eps.len() != y0.data.len() {
        return Err(Error::Shape(format!("noise has {} values, mask {}", eps.len(), y0.data.len())));
    }
    let p = y0.pixels();
    let mut out = Vec::with_capacity(y0.data.len());
    for (b, &tb) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(tb);
        let (cs, cn) = match form {
            NoiseForm::Standard => (ab.sqrt(), (1.0 - ab).sqrt()),
            NoiseForm::Literal => (ab.sqrt(), 1.0 - ab),
        };
        out.extend((b * p..(b + 1) * p).map(|i| cs * y0.data[i] + cn * eps[i]));
    }
    Ok(y0.with_data(out, MaskSpace::Diffusion))
}

/// Step-by-step forward chain `y_s = sqrt(alpha_s) y_{s-1} + sqrt(1 - alpha_s) eps_s`
/// for `s = 1..=t`, applied to every element of `y0`.
pub fn q_sample_iterative(y0: &MaskTensor, t: usize, seed: u64, schedule: &NoiseSchedule) -> Result<MaskTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    q_sample_iterative_with(y0, t, &mut rng, schedule)
}

pub fn q_sample_iterative_with<R: Rng>(y0: &MaskTensor, t: usize, rng: &mut R, schedule: &NoiseSchedule) -> Result<MaskTensor> {
    schedule.check_t(t)?;
    let mut y = y0.data.clone();
    for s in 1..=t {
        let (a, n) = (schedule.alpha(s).sqrt(), schedule.beta(s).sqrt());
        for v in y.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = a * *v + n * e;
        }
    }
    Ok(y0.with_data(y, MaskSpace::Diffusion))
}

/// `(y_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)` without clamping.
pub fn predict_y0_unclamped(yt: &MaskTensor, t: &[usize], eps_pred: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_batch(t, yt.batch, schedule)?;
    if eps_pred.len() != yt.data.len() {
        return Err(Error::Shape("predicted noise does not match mask".into()));
    }
    let p = yt.pixels();
    let mut out = Vec::with_capacity(yt.data.len());
    for (b, &tb) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(tb);
        let (inv, c) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
        out.extend((b * p..(b + 1) * p).map(|i| (yt.data[i] - c * eps_pred[i]) * inv));
    }
    Ok(out)
}

pub fn predict_y0_from_eps(yt: &MaskTensor, t: &[usize], eps_pred: &[f64], schedule: &NoiseSchedule) -> Result<MaskTensor> {
    let raw = predict_y0_unclamped(yt, t, eps_pred, schedule)?;
    Ok(yt.with_data(raw.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), MaskSpace::Diffusion))
}

/// Parameters of `q(y_{t-1} | y_t, y_0)`.
pub fn q_posterior(y0: &MaskTensor, yt: &MaskTensor, t: &[usize], schedule: &NoiseSchedule) -> Result<Posterior> {
    check_same(y0, yt, "q_posterior")?;
    check_batch(t, y0.batch, schedule)?;
    Ok(posterior_from_slices(y0.data(), yt.data(), t, y0.pixels(), schedule))
}

fn posterior_from_slices(y0: &[f64], yt: &[f64], t: &[usize], p: usize, schedule: &NoiseSchedule) -> Posterior {
    let n = y0.len();
    let (mut mean, mut variance, mut log_variance) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (b, &tb) in t.iter().enumerate() {
        let (c0, ct) = (schedule.posterior_mean_coef_y0(tb), schedule.posterior_mean_coef_yt(tb));
        let (var, lv) = (schedule.posterior_variance(tb), schedule.posterior_log_variance_clipped(tb));
        for i in b * p..(b + 1) * p {
            mean.push(c0 * y0[i] + ct * yt[i]);
            variance.push(var);
            log_variance.push(lv);
        }
    }
    Posterior { mean, variance, log_variance }
}

/// Learned-variance reverse step parameters. The mean goes through the
/// clamped clean-mask estimate; the log-variance interpolates between
/// `log beta_t` and the clipped posterior log-variance with weight `v`.
pub fn p_mean_variance(out: &DenoiserOutput, yt: &MaskTensor, t: &[usize], schedule: &NoiseSchedule) -> Result<ReverseStepOutput> {
    if !out.matches(yt) {
        return Err(Error::Shape("denoiser output does not match mask".into()));
    }
    let pred_y0 = predict_y0_from_eps(yt, t, &out.eps, schedule)?.into_data();
    let post = posterior_from_slices(&pred_y0, yt.data(), t, yt.pixels(), schedule);
    let p = yt.pixels();
    let mut log_variance = Vec::with_capacity(pred_y0.len());
    for (b, &tb) in t.iter().enumerate() {
        let (max_log, min_log) = (schedule.beta(tb).ln(), schedule.posterior_log_variance_clipped(tb));
        log_variance.extend((b * p..(b + 1) * p).map(|i| out.v[i] * max_log + (1.0 - out.v[i]) * min_log));
    }
    let variance = log_variance.iter().map(|l| l.exp()).collect();
    Ok(ReverseStepOutput { mean: post.mean, variance, log_variance, pred_y0 })
}

/// One ancestral sampling step; no noise is added at `t = 1`.
pub fn p_sample_step<R: Rng>(out: &DenoiserOutput, yt: &MaskTensor, t: &[usize], schedule: &NoiseSchedule, rng: &mut R) -> Result<MaskTensor> {
    let step = p_mean_variance(out, yt, t, schedule)?;
    Ok(sample_from(&step, yt, t, rng))
}

pub(crate) fn sample_from<R: Rng>(step: &ReverseStepOutput, yt: &MaskTensor, t: &[usize], rng: &mut R) -> MaskTensor {
    let p = yt.pixels();
    let mut next = Vec::with_capacity(step.mean.len());
    for (b, &tb) in t.iter().enumerate() {
        for i in b * p..(b + 1) * p {
            let z: f64 = rng.sample(StandardNormal);
            let z = if tb == 1 { 0.0 } else { z };
            next.push(step.mean[i] + (0.5 * step.log_variance[i]).exp() * z);
        }
    }
    yt.map_shape(next)
}

/// `KL(N(m1, e^lv1) || N(m2, e^lv2))` in nats.
pub fn normal_kl(mean1: f64, logvar1: f64, mean2: f64, logvar2: f64) -> f64 {
    0.5 * (-1.0 + logvar2 - logvar1 + (logvar1 - logvar2).exp() + (mean1 - mean2).powi(2) * (-logvar2).exp())
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;
const LOG_FLOOR: f64 = 1e-12;

/// Log-likelihood of `x` under a Gaussian discretised into 256 bins over
/// `[-1, 1]`, with the outermost bins extended to infinity. Returns the
/// log-probability and its derivative with respect to `log_variance`.
pub fn discretized_gaussian_log_likelihood(x: f64, mean: f64, log_variance: f64) -> (f64, f64) {
    let inv_std = (-0.5 * log_variance).exp();
    let centered = x - mean;
    let plus_in = inv_std * (centered + BIN_HALF_WIDTH);
    let min_in = inv_std * (centered - BIN_HALF_WIDTH);
    // d(z)/d(log_variance) = -z / 2 for z = inv_std * c
    if x < -0.999 {
        let cdf = std_normal_cdf(plus_in);
        if cdf <= LOG_FLOOR {
            return (LOG_FLOOR.ln(), 0.0);
        }
        (cdf.ln(), std_normal_pdf(plus_in) / cdf * (-0.5 * plus_in))
    } else if x > 0.999 {
        let tail = 0.5 * libm::erfc(min_in / std::f64::consts::SQRT_2);
        if tail <= LOG_FLOOR {
            return (LOG_FLOOR.ln(), 0.0);
        }
        (tail.ln(), -std_normal_pdf(min_in) / tail * (-0.5 * min_in))
    } else {
        let delta = std_normal_cdf(plus_in) - std_normal_cdf(min_in);
        if delta <= LOG_FLOOR {
            return (LOG_FLOOR.ln(), 0.0);
        }
        let d = (std_normal_pdf(plus_in) * (-0.5 * plus_in) - std_normal_pdf(min_in) * (-0.5 * min_in)) / delta;
        (delta.ln(), d)
    }
}

/// Per-element variational bound terms plus their derivative with respect
/// to `out.v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VlbEval {
    /// One value per batch element, averaged over pixels, in nats.
    pub terms: Vec<f64>,
    /// `d terms[b] / d v[b, i]`, laid out like the mask.
    pub grad_v: Vec<f64>,
    /// The model mean the terms were evaluated against.
    pub model_mean: Vec<f64>,
}

/// Variational bound term for each batch element: the Gaussian KL to the
/// true posterior for `t > 1`, and the discretised decoder NLL at `t = 1`.
pub fn vlb_terms(y0: &MaskTensor, yt: &MaskTensor, t: &[usize], out: &DenoiserOutput, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    Ok(vlb_terms_with_grad(y0, yt, t, out, schedule, None)?.terms)
}

/// As [`vlb_terms`]; `mean_override` replaces the model mean (which never
/// receives gradient from this term).
pub fn vlb_terms_with_grad(
    y0: &MaskTensor,
    yt: &MaskTensor,
    t: &[usize],
    out: &DenoiserOutput,
    schedule: &NoiseSchedule,
    mean_override: Option<&[f64]>,
) -> Result<VlbEval> {
    check_same(y0, yt, "vlb_terms")?;
    let model = p_mean_variance(out, yt, t, schedule)?;
    let model_mean = match mean_override {
        Some(m) if m.len() == model.mean.len() => m.to_vec(),
        Some(_) => return Err(Error::Shape("mean override does not match mask".into())),
        None => model.mean,
    };
    let truth = posterior_from_slices(y0.data(), yt.data(), t, y0.pixels(), schedule);
    let p = y0.pixels();
    let inv_p = 1.0 / p as f64;
    let mut terms = Vec::with_capacity(t.len());
    let mut grad_v = vec![0.0; y0.data.len()];
    for (b, &tb) in t.iter().enumerate() {
        let dlv_dv = schedule.beta(tb).ln() - schedule.posterior_log_variance_clipped(tb);
        let mut acc = 0.0;
        for i in b * p..(b + 1) * p {
            let lv = model.log_variance[i];
            let dterm_dlv = if tb == 1 {
                let (ll, dll) = discretized_gaussian_log_likelihood(y0.data[i], model_mean[i], lv);
                acc -= ll;
                -dll
            } else {
                let (mq, lq) = (truth.mean[i], truth.log_variance[i]);
                acc += normal_kl(mq, lq, model_mean[i], lv);
                0.5 * (1.0 - (lq - lv).exp() - (mq - model_mean[i]).powi(2) * (-lv).exp())
            };
            grad_v[i] = dterm_dlv * dlv_dv * inv_p;
        }
        terms.push(acc * inv_p);
    }
    Ok(VlbEval { terms, grad_v, model_mean })
}

/// `KL(q(y_T | y_0) || N(0, I))` per batch element, averaged over pixels.
/// Has no trainable parameters; reported as a diagnostic only.
pub fn terminal_kl(y0: &MaskTensor, schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(schedule.steps());
    let (lv, scale) = ((1.0 - ab).ln(), ab.sqrt());
    (0..y0.batch)
        .map(|b| y0.item(b).iter().map(|&v| normal_kl(scale * v, lv, 0.0, 0.0)).sum::<f64>() / y0.pixels() as f64)
        .collect()
}
