//! Parameterised building blocks shared by the conditioning branch and the
//! denoiser. Each block only stores [`ParamId`]s, so one block description
//! can be evaluated against stores of any float type.

use camodiff_nn::{Float, ParamId, ParamStore, Tape, Var};
use rand::Rng;

pub(crate) const GN_EPS: f64 = 1e-5;
pub(crate) const MAX_GROUPS: usize = 8;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(format!("{name}.beta"), &[channels], 0.0);
        Self { gamma, beta, groups: group_count(channels) }
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.group_norm(x, g, b, self.groups, GN_EPS)
    }
}

/// Largest group count not above eight that divides `channels` and leaves
/// at least two channels per group. With one channel per group the norm
/// would erase the per-channel timestep shift entirely.
pub(crate) fn group_count(channels: usize) -> usize {
    (1..=MAX_GROUPS.min(channels / 2)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[din, dout], din, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[dout], din, rng));
        Self { weight, bias }
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// GN, SiLU, conv, time shift, GN, SiLU, conv, plus a pointwise skip when
/// the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, temb: usize, rng: &mut R) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Dense::new(store, &format!("{name}.time"), temb, cout, true, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    /// `act_emb` is the already-activated timestep embedding `[n, temb]`.
    pub fn apply<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var, act_emb: Var) -> Var {
        let h = self.norm1.apply(tape, x);
        let h = tape.silu(h);
        let h = self.conv1.apply(tape, h);
        let shift = self.time.apply(tape, act_emb);
        let h = tape.add_channel(h, shift);
        let h = self.norm2.apply(tape, h);
        let h = tape.silu(h);
        let h = self.conv2.apply(tape, h);
        let skip = match &self.skip {
            Some(s) => s.apply(tape, x),
            None => x,
        };
        tape.add(h, skip)
    }
}
