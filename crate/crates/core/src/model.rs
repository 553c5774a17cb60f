//! The full network: conditioning branch plus denoiser, sharing one
//! parameter store.

use std::sync::atomic::{AtomicUsize, Ordering};

use camodiff_nn::{Float, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{Conditioning, ConditioningConfig, FusedFeature};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserVars};
use crate::diffusion::{DenoiserOutput, MaskSpace, MaskTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub conditioning: ConditioningConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    /// Widths small enough to train on a CPU in minutes.
    pub fn compact() -> Self {
        Self {
            conditioning: ConditioningConfig { encoder_widths: [16, 32, 48, 64], cond_width: 64, fusion: true },
            denoiser: DenoiserConfig { widths: [8, 16, 32, 48, 64], bottleneck_width: 64, time_width: 32, ..Default::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.conditioning.cond_width != self.denoiser.bottleneck_width {
            return Err(Error::Config(format!(
                "cond_width {} must equal the denoiser bottleneck width {}",
                self.conditioning.cond_width, self.denoiser.bottleneck_width
            )));
        }
        if self.conditioning.encoder_widths.contains(&0) || self.conditioning.cond_width == 0 {
            return Err(Error::Config("conditioning widths must be positive".into()));
        }
        Ok(())
    }
}

/// Batch of RGB images in `[0, 1]`, layout `[n, 3, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != batch * 3 * height * width {
            return Err(Error::Shape(format!("image data has {} values, expected {batch}x3x{height}x{width}", data.len())));
        }
        Ok(Self { batch, height, width, data })
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.batch, 3, self.height, self.width], self.data.iter().map(|&v| T::cast(v as f64)).collect())
    }

    /// Image `b` as a batch of one.
    pub fn item(&self, b: usize) -> ImageBatch {
        let n = 3 * self.height * self.width;
        ImageBatch { batch: 1, height: self.height, width: self.width, data: self.data[b * n..(b + 1) * n].to_vec() }
    }
}

pub(crate) fn mask_tensor<T: Float>(m: &MaskTensor) -> Tensor<T> {
    Tensor::from_f64(&[m.batch(), 1, m.height(), m.width()], m.data())
}

#[derive(Debug)]
pub struct Network {
    config: ModelConfig,
    conditioning: Conditioning,
    denoiser: Denoiser,
    cond_evals: AtomicUsize,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            conditioning: self.conditioning.clone(),
            denoiser: self.denoiser.clone(),
            cond_evals: AtomicUsize::new(self.conditioning_evaluations()),
        }
    }
}

/// Tape handles of the conditioning branch.
#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub fused: FusedFeature,
    /// `[n, 1, h, w]` static mask probabilities.
    pub static_mask: Var,
}

impl Network {
    pub fn new<T: Float>(store: &mut ParamStore<T>, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conditioning = Conditioning::new(store, config.conditioning.clone(), &mut rng);
        let denoiser = Denoiser::new(store, config.denoiser.clone(), &mut rng)?;
        Ok(Self { config, conditioning, denoiser, cond_evals: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn conditioning(&self) -> &Conditioning {
        &self.conditioning
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    /// How many times the conditioning branch has been evaluated.
    pub fn conditioning_evaluations(&self) -> usize {
        self.cond_evals.load(Ordering::Relaxed)
    }

    pub fn condition<T: Float>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<ConditionVars> {
        self.cond_evals.fetch_add(1, Ordering::Relaxed);
        let pyr = self.conditioning.extract_features(tape, image)?;
        let fused = self.conditioning.fuse(tape, &pyr);
        let s = tape.shape(image).to_vec();
        let static_mask = self.conditioning.static_mask(tape, &fused, (s[2], s[3]));
        Ok(ConditionVars { fused, static_mask })
    }

    pub fn denoise<T: Float>(&self, tape: &mut Tape<'_, T>, image: Var, y_t: Var, t: &[usize], cond: Var) -> Result<DenoiserVars> {
        self.denoiser.forward(tape, image, y_t, t, cond)
    }
}

/// Network description plus its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T: Float = f32> {
    pub network: Network,
    pub params: ParamStore<T>,
}

/// Host-side conditioning result for a batch of images.
#[derive(Debug, Clone)]
pub struct Conditioned<T: Float> {
    pub feature: Tensor<T>,
    pub static_mask: MaskTensor,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::new(&mut params, config, seed)?;
        Ok(Self { network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { network: self.network.clone(), params: self.params.cast() }
    }

    pub fn condition(&self, images: &ImageBatch) -> Result<Conditioned<T>> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.input(images.to_tensor());
        let vars = self.network.condition(&mut tape, x)?;
        let sm = tape.value(vars.static_mask).to_f64();
        Ok(Conditioned {
            feature: tape.value(vars.fused.f).clone(),
            static_mask: MaskTensor::new(images.batch, images.height, images.width, sm, MaskSpace::Probability)?,
        })
    }

    /// Denoiser prediction at parent-schedule timesteps `t`.
    pub fn predict(&self, images: &ImageBatch, y_t: &MaskTensor, t: &[usize], feature: &Tensor<T>) -> Result<DenoiserOutput> {
        if (y_t.batch(), y_t.height(), y_t.width()) != (images.batch, images.height, images.width) {
            return Err(Error::Shape("mask and image batch differ".into()));
        }
        let mut tape = Tape::inference(&self.params);
        let x = tape.input(images.to_tensor());
        let y = tape.input(mask_tensor(y_t));
        let f = tape.input(feature.clone());
        let vars = self.network.denoise(&mut tape, x, y, t, f)?;
        DenoiserOutput::new(
            y_t.batch(),
            y_t.height(),
            y_t.width(),
            tape.value(vars.eps).to_f64(),
            tape.value(vars.v).to_f64(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            conditioning: ConditioningConfig { encoder_widths: [4, 4, 8, 8], cond_width: 8, fusion: true },
            denoiser: DenoiserConfig { widths: [4, 4, 8, 8, 8], bottleneck_width: 8, time_width: 8, ..Default::default() },
        }
    }

    fn inputs(n: usize, s: usize, seed: u64) -> (ImageBatch, MaskTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageBatch::new(n, s, s, (0..n * 3 * s * s).map(|_| rng.random::<f32>()).collect()).unwrap();
        let y = MaskTensor::new(n, s, s, (0..n * s * s).map(|_| rng.random_range(-1.5..1.5)).collect(), MaskSpace::Diffusion).unwrap();
        (img, y)
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut c = tiny();
        c.conditioning.cond_width = 16;
        assert!(matches!(Model::<f32>::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn outputs_are_mask_shaped_finite_and_deterministic() {
        let model = Model::<f32>::new(tiny(), 1).unwrap();
        let (img, y) = inputs(2, 64, 2);
        let cond = model.condition(&img).unwrap();
        assert_eq!(cond.feature.shape(), &[2, 8, 2, 2]);
        let a = model.predict(&img, &y, &[3, 900], &cond.feature).unwrap();
        let b = model.predict(&img, &y, &[3, 900], &cond.feature).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.eps.len(), 2 * 64 * 64);
        assert!(a.eps.iter().chain(&a.v).all(|v| v.is_finite()));
        assert!(a.v.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn time_and_conditioning_are_live() {
        let model = Model::<f64>::new(tiny(), 3).unwrap();
        let (img, y) = inputs(1, 64, 4);
        let cond = model.condition(&img).unwrap();
        let early = model.predict(&img, &y, &[1], &cond.feature).unwrap();
        let late = model.predict(&img, &y, &[1000], &cond.feature).unwrap();
        assert!(early.eps.iter().zip(&late.eps).any(|(a, b)| (a - b).abs() > 1e-9));
        let other = cond.feature.map(|v| v + 0.5);
        let shifted = model.predict(&img, &y, &[1], &other).unwrap();
        assert!(early.eps.iter().zip(&shifted.eps).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn bottleneck_matches_conditioning_size() {
        let model = Model::<f32>::new(tiny(), 5).unwrap();
        for (h, w) in [(32, 32), (64, 96)] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let img = ImageBatch::new(1, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap();
            let mut tape = Tape::inference(&model.params);
            let x = tape.input(img.to_tensor());
            let cv = model.network.condition(&mut tape, x).unwrap();
            let y = tape.input(Tensor::zeros(&[1, 1, h, w]));
            let vars = model.network.denoise(&mut tape, x, y, &[5], cv.fused.f).unwrap();
            assert_eq!(tape.shape(vars.bottleneck), tape.shape(cv.fused.f));
            assert_eq!(tape.shape(vars.eps), &[1, 1, h, w]);
        }
    }

    #[test]
    fn conditioning_counter_counts_calls() {
        let model = Model::<f32>::new(tiny(), 7).unwrap();
        let (img, _) = inputs(1, 32, 8);
        assert_eq!(model.network.conditioning_evaluations(), 0);
        model.condition(&img).unwrap();
        model.condition(&img).unwrap();
        assert_eq!(model.network.conditioning_evaluations(), 2);
    }

    #[test]
    fn disabled_attention_is_identity_at_the_bottleneck() {
        let mut c = tiny();
        c.denoiser.use_iam = false;
        let model = Model::<f32>::new(c, 9).unwrap();
        assert!(model.network.denoiser().iam().is_none());
        assert!(model.params.find("iam.query").is_none());
        let (img, y) = inputs(1, 32, 10);
        let cond = model.condition(&img).unwrap();
        let a = model.predict(&img, &y, &[10], &cond.feature).unwrap();
        let b = model.predict(&img, &y, &[10], &cond.feature.map(|v| v * 3.0)).unwrap();
        assert_eq!(a, b);
    }
}
