//! Dataset layout, image/mask codecs and the synthetic camouflage generator.
//!
//! A dataset root holds `Imgs/` and `GT/` with shared file stems, plus
//! optional newline-delimited manifests (`train.txt`, `test.txt`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, Rgb32FImage, RgbImage as Rgb8Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{MaskSpace, MaskTensor};
use crate::error::{Error, Result};
use crate::model::ImageBatch;

/// RGB image with channel values in `[0, 1]`.
pub type RgbImage = Rgb32FImage;
/// Single-channel mask holding exactly 0 or 1 per pixel.
pub type BinaryMask = GrayImage;

pub const IMAGE_DIR: &str = "Imgs";
pub const GT_DIR: &str = "GT";
pub const GT_THRESHOLD: u8 = 128;
pub const DEFAULT_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub image_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub stems: Vec<String>,
    pub extensions: Vec<String>,
}

impl DatasetSpec {
    /// Opens `root` with the stems listed in `root/<manifest>`, or every
    /// image stem under `Imgs/` when `manifest` is `None`.
    pub fn open(root: impl AsRef<Path>, manifest: Option<&str>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let image_dir = root.join(IMAGE_DIR);
        let gt_dir = root.join(GT_DIR);
        let extensions: Vec<String> = DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect();
        let stems = match manifest {
            Some(name) => {
                let path = root.join(name);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
            }
            None => list_stems(&image_dir, &extensions)?,
        };
        let spec = Self { root, image_dir, gt_dir, stems, extensions };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.stems {
            if !seen.insert(s) {
                return Err(Error::Dataset(format!("stem {s} listed twice")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    /// Image and ground-truth paths of `stem`. The image may use any of the
    /// configured extensions but must be unique; ground truth is PNG.
    pub fn resolve(&self, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let images: Vec<PathBuf> = self.extensions.iter().map(|e| self.image_dir.join(format!("{stem}.{e}"))).filter(|p| p.is_file()).collect();
        let image = match images.len() {
            0 => return Err(Error::Dataset(format!("{stem}: no image file in {}", self.image_dir.display()))),
            1 => images.into_iter().next().expect("one element"),
            _ => return Err(Error::Dataset(format!("{stem}: several image files match"))),
        };
        let gt = self.gt_dir.join(format!("{stem}.png"));
        if !gt.is_file() {
            return Err(Error::Dataset(format!("{stem}: missing ground truth {}", gt.display())));
        }
        Ok((image, gt))
    }
}

/// Sorted, deduplicated stems of files in `dir` with one of `extensions`.
pub fn list_stems(dir: &Path, extensions: &[String]) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| extensions.contains(&e)) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_rgb32f())
}

/// 8-bit grayscale values scaled to `[0, 1]`, row-major.
pub fn load_gray(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let g = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok((g.width(), g.height(), g.pixels().map(|p| p.0[0] as f64 / 255.0).collect()))
}

/// Grayscale mask binarised at [`GT_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let g = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok(binarize_gray(&g))
}

pub fn binarize_gray(g: &GrayImage) -> BinaryMask {
    GrayImage::from_fn(g.width(), g.height(), |x, y| Luma([u8::from(g.get_pixel(x, y).0[0] >= GT_THRESHOLD)]))
}

pub fn load_pair(spec: &DatasetSpec, stem: &str) -> Result<(RgbImage, BinaryMask)> {
    let (ip, gp) = spec.resolve(stem)?;
    let img = load_image(&ip)?;
    let mask = load_mask(&gp)?;
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Dataset(format!("{stem}: image is {:?} but ground truth is {:?}", img.dimensions(), mask.dimensions())));
    }
    Ok((img, mask))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Writes a 0/1 mask as an 8-bit PNG with values 0/255.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let out = GrayImage::from_fn(mask.width(), mask.height(), |x, y| Luma([if mask.get_pixel(x, y).0[0] > 0 { 255 } else { 0 }]));
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

/// Writes `[0, 1]` probabilities (row-major) as an 8-bit grayscale PNG.
pub fn save_probability(path: &Path, width: u32, height: u32, probs: &[f64]) -> Result<()> {
    if probs.len() != (width * height) as usize {
        return Err(Error::Shape(format!("{} values for a {width}x{height} image", probs.len())));
    }
    let out = GrayImage::from_fn(width, height, |x, y| {
        let p = probs[(y * width + x) as usize].clamp(0.0, 1.0);
        Luma([(p * 255.0).round() as u8])
    });
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    let out = Rgb8Image::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    ensure_parent(path)?;
    out.save(path).map_err(|e| image_err(path, e))
}

/// Stacks equally sized images into `[n, 3, h, w]`.
pub fn batch_images(images: &[&RgbImage]) -> Result<ImageBatch> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let hw = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * hw];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * hw + i] = p.0[c];
            }
        }
    }
    ImageBatch::new(images.len(), h as usize, w as usize, data)
}

/// Stacks 0/1 masks into a probability-space tensor.
pub fn batch_masks(masks: &[&BinaryMask]) -> Result<MaskTensor> {
    let first = masks.first().ok_or_else(|| Error::Shape("empty mask batch".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(masks.len() * (w * h) as usize);
    for m in masks {
        if m.dimensions() != (w, h) {
            return Err(Error::Shape("masks in a batch must share a size".into()));
        }
        data.extend(m.pixels().map(|p| f64::from(u8::from(p.0[0] > 0))));
    }
    MaskTensor::new(masks.len(), h as usize, w as usize, data, MaskSpace::Probability)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub image_size: usize,
    pub octaves: usize,
    /// Lattice cells across the image at the coarsest octave.
    pub frequency: f64,
    pub blob_count: (usize, usize),
    /// Blob radius range as a fraction of the image side.
    pub radius: (f64, f64),
    /// Brightness offset of the foreground texture, in `(0, 1]`.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 400, image_size: 64, octaves: 3, frequency: 4.0, blob_count: (1, 3), radius: (0.12, 0.25), contrast: 0.35, seed: 7 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast must be in (0, 1], got {}", self.contrast)));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image size {} is not a positive multiple of 32", self.image_size)));
        }
        if self.count == 0 || self.octaves == 0 || self.frequency <= 0.0 {
            return Err(Error::Config("count, octaves and frequency must be positive".into()));
        }
        if self.blob_count.0 == 0 || self.blob_count.0 > self.blob_count.1 || !(0.0 < self.radius.0 && self.radius.0 <= self.radius.1 && self.radius.1 < 0.5) {
            return Err(Error::Config("invalid blob count or radius range".into()));
        }
        Ok(())
    }
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.5;

/// Multi-octave value noise normalised to `[0, 1]`, row-major.
pub fn value_noise<R: Rng>(size: usize, octaves: usize, frequency: f64, rng: &mut R) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut freq = frequency;
    for _ in 0..octaves {
        let cells = freq.ceil() as usize + 1;
        let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..size {
            let fy = y as f64 / size as f64 * freq;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = x as f64 / size as f64 * freq;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |i: usize, j: usize| lattice[j.min(cells - 1) * cells + i.min(cells - 1)];
                let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                acc[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.5;
        freq *= 2.0;
    }
    let (lo, hi) = acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    acc.iter().map(|v| (v - lo) / span).collect()
}

fn blob_mask<R: Rng>(config: &SynthConfig, rng: &mut R) -> Vec<bool> {
    let n = config.image_size;
    let s = n as f64;
    // Rejection keeps the foreground fraction in range; give up on a
    // pathological configuration rather than spin forever.
    for attempt in 0.. {
        let mut mask = vec![false; n * n];
        let blobs = rng.random_range(config.blob_count.0..=config.blob_count.1);
        for _ in 0..blobs {
            let r = rng.random_range(config.radius.0..=config.radius.1) * s;
            let aspect = rng.random_range(0.7..=1.0);
            let rot = rng.random_range(0.0..std::f64::consts::PI);
            let lobes = rng.random_range(2..=5) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let wobble = rng.random_range(0.0..=0.15);
            let cx = rng.random_range(r..=s - r);
            let cy = rng.random_range(r..=s - r);
            let (c, sn) = (rot.cos(), rot.sin());
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let (u, v) = ((dx * c + dy * sn) / r, (-dx * sn + dy * c) / (r * aspect));
                    let theta = v.atan2(u);
                    let limit = 1.0 + wobble * (lobes * theta + phase).sin();
                    if u * u + v * v <= limit * limit {
                        mask[y * n + x] = true;
                    }
                }
            }
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (n * n) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) || attempt == 10_000 {
            return mask;
        }
    }
    unreachable!()
}

/// One synthetic pair: value-noise background, blobs filled with an
/// independent field of the same noise family lifted by `contrast`.
pub fn synth_pair(config: &SynthConfig, index: usize) -> (RgbImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let n = config.image_size;
    let mask = blob_mask(config, &mut rng);
    let bg = value_noise(n, config.octaves, config.frequency, &mut rng);
    let fg = value_noise(n, config.octaves, config.frequency, &mut rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..=1.0));
    let d = config.contrast;
    let img = ImageBuffer::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        let lum = if mask[i] { d + (1.0 - d) * fg[i] } else { (1.0 - d) * bg[i] };
        Rgb(tint.map(|t| (lum * t) as f32))
    });
    let m = GrayImage::from_fn(n as u32, n as u32, |x, y| Luma([u8::from(mask[y as usize * n + x as usize])]));
    (img, m)
}

pub fn synth_stem(index: usize) -> String {
    format!("synth_{index:04}")
}

/// Writes `config.count` pairs under `out_root` and returns the training
/// split. The last tenth of the stems (rounded) forms `test.txt`.
pub fn generate_synthetic(config: &SynthConfig, out_root: impl AsRef<Path>) -> Result<DatasetSpec> {
    config.validate()?;
    let root = out_root.as_ref();
    for dir in [IMAGE_DIR, GT_DIR] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let stems: Vec<String> = (0..config.count).map(synth_stem).collect();
    for (i, stem) in stems.iter().enumerate() {
        let (img, mask) = synth_pair(config, i);
        save_image(&root.join(IMAGE_DIR).join(format!("{stem}.png")), &img)?;
        save_mask(&root.join(GT_DIR).join(format!("{stem}.png")), &mask)?;
    }
    let n_test = ((config.count as f64) * 0.1).round() as usize;
    let n_train = config.count - n_test;
    for (name, part) in [("train.txt", &stems[..n_train]), ("test.txt", &stems[n_train..])] {
        let p = root.join(name);
        let mut text = part.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    DatasetSpec::open(root, Some("train.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_threshold_boundary() {
        let g = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        assert_eq!(binarize_gray(&g).into_raw(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn maximal_contrast_is_separable() {
        let cfg = SynthConfig { contrast: 1.0, count: 1, ..Default::default() };
        for i in 0..5 {
            let (img, mask) = synth_pair(&cfg, i);
            for (p, m) in img.pixels().zip(mask.pixels()) {
                let lum = p.0.iter().copied().fold(0f32, f32::max);
                if m.0[0] == 1 {
                    assert!(lum >= 0.75);
                } else {
                    assert_eq!(lum, 0.0);
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_in_range_over_100_images() {
        let cfg = SynthConfig::default();
        for i in 0..100 {
            let (_, mask) = synth_pair(&cfg, i);
            let frac = mask.pixels().filter(|p| p.0[0] == 1).count() as f64 / (64.0 * 64.0);
            assert!((0.02..=0.5).contains(&frac), "image {i}: {frac}");
            assert!(mask.pixels().all(|p| p.0[0] <= 1));
        }
    }

    #[test]
    fn value_noise_is_normalised() {
        let v = value_noise(32, 3, 4.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (lo, hi) = v.iter().fold((1.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_synth_configs() {
        assert!(SynthConfig { contrast: 0.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { image_size: 48, ..Default::default() }.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }
}
