//! Time-conditioned UNet predicting noise and the variance fraction, with
//! injection attention at the stride-32 bottleneck.

use camodiff_nn::{Float, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::iam::{AttentionProduct, Iam, IamVars};
use crate::layers::{group_count, Conv, Dense, Norm, ResBlock};

pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Widths at strides 1, 2, 4, 8, 16.
    pub widths: [usize; LEVELS],
    /// Bottleneck width at stride 32; must equal the conditioning width.
    pub bottleneck_width: usize,
    /// Sinusoidal and hidden width of the timestep embedding (even).
    pub time_width: usize,
    pub use_iam: bool,
    /// Add the attention output to the bottleneck instead of replacing it.
    pub iam_residual: bool,
    #[doc(hidden)]
    pub iam_product: AttentionProduct,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 96, 128, 160],
            bottleneck_width: 64,
            time_width: 128,
            use_iam: true,
            iam_residual: true,
            iam_product: AttentionProduct::Literal,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.bottleneck_width == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.time_width == 0 || self.time_width % 2 != 0 {
            return Err(Error::Config(format!("time_width must be positive and even, got {}", self.time_width)));
        }
        Ok(())
    }
}

/// `[sin(t f_k), cos(t f_k)]` with `f_k = 10000^(-k / half)`, one row per
/// batch element.
pub fn sinusoidal_embedding(t: &[usize], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(t.len() * width);
    for &ti in t {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    time_in: Dense,
    time_out: Dense,
    stem: Conv,
    down_blocks: Vec<ResBlock>,
    downsamples: Vec<Conv>,
    bottleneck: ResBlock,
    iam: Option<Iam>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    out_norm: Norm,
    out_conv: Conv,
}

/// Tape handles of one denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    /// `[n, 1, h, w]` predicted noise.
    pub eps: Var,
    /// `[n, 1, h, w]` variance fraction in `[0, 1]`.
    pub v: Var,
    /// Bottleneck feature before injection attention.
    pub bottleneck: Var,
    pub attention: Option<IamVars>,
}

impl Denoiser {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (w, c, tw) = (config.widths, config.bottleneck_width, config.time_width);
        let time_in = Dense::new(store, "unet.time.fc1", tw, tw, true, rng);
        let time_out = Dense::new(store, "unet.time.fc2", tw, tw, true, rng);
        let stem = Conv::new(store, "unet.stem", 4, w[0], 3, 1, rng);
        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        for i in 0..LEVELS {
            down_blocks.push(ResBlock::new(store, &format!("unet.down{i}"), w[i], w[i], tw, rng));
            let next = if i + 1 < LEVELS { w[i + 1] } else { c };
            downsamples.push(Conv::new(store, &format!("unet.down{i}.resample"), w[i], next, 3, 2, rng));
        }
        let bottleneck = ResBlock::new(store, "unet.bottleneck", c, c, tw, rng);
        let iam = config.use_iam.then(|| Iam::new(store, "iam", c, rng).with_product(config.iam_product));
        let mid = ResBlock::new(store, "unet.mid", c, c, tw, rng);
        let mut up_blocks = Vec::new();
        let mut below = c;
        for i in (0..LEVELS).rev() {
            up_blocks.push(ResBlock::new(store, &format!("unet.up{i}"), below + w[i], w[i], tw, rng));
            below = w[i];
        }
        let out_norm = Norm::new(store, "unet.out.norm", w[0]);
        let out_conv = Conv::new(store, "unet.out.conv", w[0], 2, 3, 1, rng);
        debug_assert_eq!(out_norm.groups, group_count(w[0]));
        Ok(Self { config, time_in, time_out, stem, down_blocks, downsamples, bottleneck, iam, mid, up_blocks, out_norm, out_conv })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn iam(&self) -> Option<&Iam> {
        self.iam.as_ref()
    }

    /// `image: [n, 3, h, w]`, `y_t: [n, 1, h, w]`, `cond: [n, C, h/32, w/32]`;
    /// `t` holds one timestep of the parent schedule per batch element.
    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, image: Var, y_t: Var, t: &[usize], cond: Var) -> Result<DenoiserVars> {
        let si = tape.shape(image).to_vec();
        let sy = tape.shape(y_t).to_vec();
        if si.len() != 4 || si[1] != 3 || sy != [si[0], 1, si[2], si[3]] {
            return Err(Error::Shape(format!("image {si:?} and mask {sy:?} do not align")));
        }
        crate::conditioning::check_divisible(si[2], si[3])?;
        let (n, h, w) = (si[0], si[2], si[3]);
        let expect_cond = [n, self.config.bottleneck_width, h / 32, w / 32];
        if tape.shape(cond) != expect_cond {
            return Err(Error::Shape(format!("conditioning feature {:?}, expected {expect_cond:?}", tape.shape(cond))));
        }
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", t.len())));
        }

        let tw = self.config.time_width;
        let sin = tape.input(Tensor::from_f64(&[n, tw], &sinusoidal_embedding(t, tw)));
        let e = self.time_in.apply(tape, sin);
        let e = tape.silu(e);
        let e = self.time_out.apply(tape, e);
        let emb = tape.silu(e);

        let x = tape.concat(image, y_t);
        let mut hcur = self.stem.apply(tape, x);
        let mut skips = Vec::with_capacity(LEVELS);
        for (block, down) in self.down_blocks.iter().zip(&self.downsamples) {
            hcur = block.apply(tape, hcur, emb);
            skips.push(hcur);
            hcur = down.apply(tape, hcur);
        }
        let d = self.bottleneck.apply(tape, hcur, emb);
        let (mut hcur, attention) = match &self.iam {
            Some(iam) => {
                let (o, vars) = iam.forward_maps(tape, d, cond)?;
                let o = if self.config.iam_residual { tape.add(d, o) } else { o };
                (o, Some(vars))
            }
            None => (d, None),
        };
        hcur = self.mid.apply(tape, hcur, emb);
        for (block, skip) in self.up_blocks.iter().zip(skips.iter().rev()) {
            hcur = tape.upsample_nearest2(hcur);
            hcur = tape.concat(hcur, *skip);
            hcur = block.apply(tape, hcur, emb);
        }
        let o = self.out_norm.apply(tape, hcur);
        let o = tape.silu(o);
        let o = self.out_conv.apply(tape, o);
        let eps = tape.slice_channels(o, 0, 1);
        let logit = tape.slice_channels(o, 1, 1);
        let v = tape.sigmoid(logit);
        Ok(DenoiserVars { eps, v, bottleneck: d, attention })
    }
}
