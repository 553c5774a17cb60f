//! Linear noise schedule and the per-step coefficient tables derived from it.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the most. All tables are kept in `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variance: Vec<f64>,
    posterior_log_variance_clipped: Vec<f64>,
    posterior_mean_coef_y0: Vec<f64>,
    posterior_mean_coef_yt: Vec<f64>,
    original_indices: Vec<usize>,
    respaced: bool,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config(format!("schedule needs at least one step, got {steps}")));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) || beta_start > beta_end {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
        };
        Ok(Self::from_betas(betas, (1..=steps).collect(), false))
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    fn from_betas(betas: Vec<f64>, original_indices: Vec<usize>, respaced: bool) -> Self {
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Self::build(betas, alpha_bars, original_indices, respaced)
    }

    fn build(betas: Vec<f64>, alpha_bars: Vec<f64>, original_indices: Vec<usize>, respaced: bool) -> Self {
        let steps = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let prev = |i: usize| if i == 0 { 1.0 } else { alpha_bars[i - 1] };
        let posterior_variance: Vec<f64> =
            (0..steps).map(|i| betas[i] * (1.0 - prev(i)) / (1.0 - alpha_bars[i])).collect();
        let posterior_mean_coef_y0 = (0..steps).map(|i| betas[i] * prev(i).sqrt() / (1.0 - alpha_bars[i])).collect();
        let posterior_mean_coef_yt =
            (0..steps).map(|i| (1.0 - prev(i)) * alphas[i].sqrt() / (1.0 - alpha_bars[i])).collect();
        // The t = 1 posterior variance is exactly zero; its log borrows t = 2.
        let first_log = if steps >= 2 && posterior_variance[1] > 0.0 {
            posterior_variance[1].ln()
        } else {
            betas[0].ln()
        };
        let posterior_log_variance_clipped = (0..steps)
            .map(|i| if i == 0 { first_log } else { posterior_variance[i].ln() })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variance,
            posterior_log_variance_clipped,
            posterior_mean_coef_y0,
            posterior_mean_coef_yt,
            original_indices,
            respaced,
        }
    }

    /// Keep `num_steps` evenly strided timesteps (always including `T`, and
    /// `1` when more than one step is kept) and recompute betas so the
    /// retained cumulative products equal the parent's.
    pub fn respace(&self, num_steps: usize) -> Result<Self> {
        if self.respaced {
            return Err(Error::Config("schedule is already respaced".into()));
        }
        let total = self.steps();
        if num_steps < 1 || num_steps > total {
            return Err(Error::Config(format!("respaced step count {num_steps} must be in [1, {total}]")));
        }
        let kept = strided_timesteps(total, num_steps);
        let alpha_bars: Vec<f64> = kept.iter().map(|&t| self.alpha_bar(t)).collect();
        let betas = alpha_bars
            .iter()
            .scan(1.0, |last, &ab| {
                let b = 1.0 - ab / *last;
                *last = ab;
                Some(b)
            })
            .collect();
        // Parent products are copied, not re-multiplied, so lookups match exactly.
        Ok(Self::build(betas, alpha_bars, kept, true))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn is_respaced(&self) -> bool {
        self.respaced
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `alpha_bar(t - 1)` with the convention `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    pub fn posterior_log_variance_clipped(&self, t: usize) -> f64 {
        self.posterior_log_variance_clipped[t - 1]
    }

    pub fn posterior_mean_coef_y0(&self, t: usize) -> f64 {
        self.posterior_mean_coef_y0[t - 1]
    }

    pub fn posterior_mean_coef_yt(&self, t: usize) -> f64 {
        self.posterior_mean_coef_yt[t - 1]
    }

    /// Parent-schedule timestep for respaced step `t`.
    pub fn original_index(&self, t: usize) -> usize {
        self.original_indices[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variance
    }

    pub fn original_indices(&self) -> &[usize] {
        &self.original_indices
    }

    /// `t,beta,alpha_bar,posterior_variance` rows, one per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,posterior_variance\n");
        for t in 1..=self.steps() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                self.original_index(t),
                self.beta(t),
                self.alpha_bar(t),
                self.posterior_variance(t)
            ));
        }
        out
    }
}

/// `count` timesteps in `[1, total]`, evenly strided, first `1` and last `total`.
pub fn strided_timesteps(total: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![total];
    }
    let span = total - 1;
    let den = count - 1;
    (0..count).map(|i| 1 + (i * span + den / 2) / den).collect()
}
