//! Image encoder, multi-scale feature fusion and the static mask head.

use camodiff_nn::{Float, ParamStore, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv;

/// Encoder features at strides 8, 16 and 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
}

/// Stride-32 conditioning feature with `cond_width` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedFeature {
    pub f: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningConfig {
    /// Stem width (strides 2 and 4) followed by the stride 8/16/32 widths.
    pub encoder_widths: [usize; 4],
    pub cond_width: usize,
    /// When off, only the stride-32 branch feeds the conditioning feature.
    pub fusion: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self { encoder_widths: [16, 32, 64, 96], cond_width: 64, fusion: true }
    }
}

/// Small strided convolutional pyramid trained together with the rest of
/// the model.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    stem: [Conv; 2],
    stages: [[Conv; 2]; 3],
    widths: [usize; 4],
}

impl ToyEncoder {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, widths: [usize; 4], rng: &mut R) -> Self {
        let stem = [
            Conv::new(store, "enc.stem0", 3, widths[0], 3, 2, rng),
            Conv::new(store, "enc.stem1", widths[0], widths[0], 3, 2, rng),
        ];
        let stages = std::array::from_fn(|i| {
            [
                Conv::new(store, &format!("enc.stage{}.down", i + 1), widths[i], widths[i + 1], 3, 2, rng),
                Conv::new(store, &format!("enc.stage{}.conv", i + 1), widths[i + 1], widths[i + 1], 3, 1, rng),
            ]
        });
        Self { stem, stages, widths }
    }

    fn extract<T: Float>(&self, tape: &mut Tape<'_, T>, image: Var) -> FeaturePyramid {
        let mut h = image;
        for c in &self.stem {
            h = c.apply(tape, h);
            h = tape.silu(h);
        }
        let mut outs = [h; 3];
        for (i, [down, conv]) in self.stages.iter().enumerate() {
            h = down.apply(tape, h);
            h = tape.silu(h);
            h = conv.apply(tape, h);
            h = tape.silu(h);
            outs[i] = h;
        }
        FeaturePyramid { x1: outs[0], x2: outs[1], x3: outs[2] }
    }
}

/// Backbone selection. Only the toy pyramid ships; a pretrained backbone
/// would be another variant producing the same three strides.
#[derive(Debug, Clone)]
#[non_exhaustive]
pub enum EncoderHandle {
    Toy(ToyEncoder),
}

impl EncoderHandle {
    /// Channel counts of the stride 8/16/32 outputs.
    pub fn pyramid_widths(&self) -> [usize; 3] {
        match self {
            EncoderHandle::Toy(e) => [e.widths[1], e.widths[2], e.widths[3]],
        }
    }
}

#[derive(Debug, Clone)]
struct Branch {
    conv: Conv,
    resample: Conv,
}

#[derive(Debug, Clone)]
pub struct Conditioning {
    config: ConditioningConfig,
    encoder: EncoderHandle,
    branches: Vec<Branch>,
    reduce: Option<Conv>,
    static_head: Conv,
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!("spatial size {h}x{w} is not a positive multiple of 32")));
    }
    Ok(())
}

impl Conditioning {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, config: ConditioningConfig, rng: &mut R) -> Self {
        let encoder = EncoderHandle::Toy(ToyEncoder::new(store, config.encoder_widths, rng));
        let c = config.cond_width;
        let widths = encoder.pyramid_widths();
        // Branch i reads the stride 8/16/32 map and resamples by 4/2/1.
        let used: Vec<usize> = if config.fusion { vec![0, 1, 2] } else { vec![2] };
        let branches = used
            .iter()
            .map(|&i| Branch {
                conv: Conv::new(store, &format!("ff.branch{}.conv", i + 1), widths[i], c, 3, 1, rng),
                resample: Conv::new(store, &format!("ff.branch{}.resample", i + 1), c, c, 3, 4 >> i, rng),
            })
            .collect();
        let reduce = config.fusion.then(|| Conv::new(store, "ff.reduce", 3 * c, c, 1, 1, rng));
        let static_head = Conv::new(store, "static.head", c, 1, 1, 1, rng);
        Self { config, encoder, branches, reduce, static_head }
    }

    pub fn config(&self) -> &ConditioningConfig {
        &self.config
    }

    pub fn encoder(&self) -> &EncoderHandle {
        &self.encoder
    }

    /// `image: [n, 3, h, w]` with `h`, `w` multiples of 32.
    pub fn extract_features<T: Float>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("image batch must be [n, 3, h, w], got {shape:?}")));
        }
        check_divisible(shape[2], shape[3])?;
        Ok(match &self.encoder {
            EncoderHandle::Toy(e) => e.extract(tape, image),
        })
    }

    pub fn fuse<T: Float>(&self, tape: &mut Tape<'_, T>, pyr: &FeaturePyramid) -> FusedFeature {
        let inputs = [pyr.x1, pyr.x2, pyr.x3];
        let feeds: Vec<Var> = if self.config.fusion { inputs.to_vec() } else { vec![pyr.x3] };
        let mut outs = Vec::with_capacity(feeds.len());
        for (b, x) in self.branches.iter().zip(feeds) {
            let h = b.conv.apply(tape, x);
            let h = tape.silu(h);
            let h = b.resample.apply(tape, h);
            outs.push(tape.silu(h));
        }
        let f = match &self.reduce {
            Some(reduce) => {
                let cat = tape.concat(outs[0], outs[1]);
                let cat = tape.concat(cat, outs[2]);
                reduce.apply(tape, cat)
            }
            None => outs[0],
        };
        FusedFeature { f }
    }

    /// Sigmoid of the bilinearly upsampled one-channel projection of `f`.
    pub fn static_mask<T: Float>(&self, tape: &mut Tape<'_, T>, f: &FusedFeature, target: (usize, usize)) -> Var {
        let logits = self.static_head.apply(tape, f.f);
        let up = tape.bilinear(logits, target.0, target.1);
        tape.sigmoid(up)
    }
}
