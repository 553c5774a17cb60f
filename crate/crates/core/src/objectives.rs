//! Hybrid training objective: noise regression, learned-variance bound and
//! static-mask regression, with analytic gradients for the network outputs.

use crate::diffusion::{vlb_terms_with_grad, DenoiserOutput, MaskSpace, MaskTensor};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_LAMBDA_VLB: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub simple: f64,
    pub vlb: f64,
    pub static_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.simple, self.vlb, self.static_term, self.total].iter().all(|v| v.is_finite())
    }
}

/// Weights of the three terms. The default is unit weight on the noise and
/// static terms and [`DEFAULT_LAMBDA_VLB`] on the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub simple: f64,
    pub vlb: f64,
    pub static_term: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { simple: 1.0, vlb: DEFAULT_LAMBDA_VLB, static_term: 1.0 }
    }
}

fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mse over {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

fn mse_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let k = 2.0 / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| k * (x - y)).collect()
}

/// Mean squared error between predicted and true noise.
pub fn loss_simple(eps_pred: &[f64], eps_true: &[f64]) -> Result<f64> {
    mse(eps_pred, eps_true)
}

/// Batch mean of the per-element bound terms. Only the variance channel is
/// trained by this term; the model mean is treated as a constant.
pub fn loss_vlb(y0: &MaskTensor, yt: &MaskTensor, t: &[usize], out: &DenoiserOutput, schedule: &NoiseSchedule) -> Result<f64> {
    let e = vlb_terms_with_grad(y0, yt, t, out, schedule, None)?;
    Ok(e.terms.iter().sum::<f64>() / e.terms.len() as f64)
}

/// Mean squared error between the static mask and the ground truth, both
/// in probability space.
pub fn loss_static(y_m: &MaskTensor, y0_prob: &MaskTensor) -> Result<f64> {
    if y_m.space() != MaskSpace::Probability || y0_prob.space() != MaskSpace::Probability {
        return Err(Error::Shape("static loss expects probability-space masks".into()));
    }
    if !y_m.same_shape(y0_prob) {
        return Err(Error::Shape("static mask and ground truth differ in shape".into()));
    }
    mse(y_m.data(), y0_prob.data())
}

pub fn loss_total(simple: f64, vlb: f64, static_term: f64, lambda_vlb: f64) -> LossBreakdown {
    LossBreakdown { simple, vlb, static_term, total: simple + lambda_vlb * vlb + static_term }
}

/// Everything the objective needs from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    /// Clean mask in diffusion space.
    pub y0: &'a MaskTensor,
    pub yt: &'a MaskTensor,
    /// Timesteps of `schedule`, one per batch element.
    pub t: &'a [usize],
    pub eps_true: &'a [f64],
    pub output: &'a DenoiserOutput,
    /// Static mask prediction in probability space.
    pub static_mask: &'a MaskTensor,
}

/// Loss values plus gradients with respect to the three network outputs.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub grad_eps: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub grad_static: Vec<f64>,
    /// Per-element simple/vlb/static sums, used to locate non-finite values.
    pub per_element: Vec<[f64; 3]>,
    /// Model mean the bound was evaluated against.
    pub model_mean: Vec<f64>,
}

/// Evaluates the weighted objective. `frozen_mean` replaces the model mean
/// inside the bound (used to hold the detached mean fixed while
/// differentiating numerically).
pub fn evaluate_objective(
    inputs: ObjectiveInputs<'_>,
    schedule: &NoiseSchedule,
    weights: LossWeights,
    frozen_mean: Option<&[f64]>,
) -> Result<ObjectiveEval> {
    let ObjectiveInputs { y0, yt, t, eps_true, output, static_mask } = inputs;
    let simple = loss_simple(&output.eps, eps_true)?;
    let vlb_eval = vlb_terms_with_grad(y0, yt, t, output, schedule, frozen_mean)?;
    let batch = vlb_eval.terms.len();
    let vlb = vlb_eval.terms.iter().sum::<f64>() / batch as f64;
    let y0_prob = y0.to_probability();
    let static_term = loss_static(static_mask, &y0_prob)?;

    let breakdown = LossBreakdown {
        simple,
        vlb,
        static_term,
        total: weights.simple * simple + weights.vlb * vlb + weights.static_term * static_term,
    };
    let grad_eps = mse_grad(&output.eps, eps_true).into_iter().map(|g| g * weights.simple).collect();
    let gv = weights.vlb / batch as f64;
    let grad_v = vlb_eval.grad_v.iter().map(|g| g * gv).collect();
    let grad_static = mse_grad(static_mask.data(), y0_prob.data()).into_iter().map(|g| g * weights.static_term).collect();

    let p = y0.pixels();
    let per_element = (0..batch)
        .map(|b| {
            let r = b * p..(b + 1) * p;
            let s: f64 = output.eps[r.clone()].iter().zip(&eps_true[r.clone()]).map(|(a, e)| (a - e).powi(2)).sum();
            let st: f64 = static_mask.data()[r.clone()].iter().zip(&y0_prob.data()[r]).map(|(a, e)| (a - e).powi(2)).sum();
            [s, vlb_eval.terms[b], st]
        })
        .collect();
    Ok(ObjectiveEval { breakdown, grad_eps, grad_v, grad_static, per_element, model_mean: vlb_eval.model_mean })
}
