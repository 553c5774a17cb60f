//! Shared helpers for the integration suites: brute-force reference metrics
//! and small model/data fixtures.
#![allow(dead_code)]

use camodiff::config::RunConfig;
use camodiff::diffusion::{MaskSpace, MaskTensor};
use camodiff::model::ImageBatch;
use rand::Rng;

pub mod oracle {
    //! Reference metric definitions written out pixel by pixel. Masks are
    //! row-major `h x w`; the ground truth is already binary.

    fn fg_count(gt: &[bool]) -> usize {
        gt.iter().filter(|g| **g).count()
    }

    fn as_f(g: bool) -> f64 {
        if g {
            1.0
        } else {
            0.0
        }
    }

    pub fn mae(pred: &[f64], gt: &[bool]) -> f64 {
        let mut acc = 0.0;
        for i in 0..pred.len() {
            acc += (pred[i] - as_f(gt[i])).abs();
        }
        acc / pred.len() as f64
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Sample variance with `n - 1` (or 1 for a single value).
    fn var(v: &[f64], m: f64) -> f64 {
        let d = if v.len() > 1 { v.len() - 1 } else { 1 };
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64
    }

    fn cov(a: &[f64], ma: f64, b: &[f64], mb: f64) -> f64 {
        let d = if a.len() > 1 { a.len() - 1 } else { 1 };
        (0..a.len()).map(|i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / d as f64
    }

    fn object_part(vals: &[f64]) -> f64 {
        let x = mean(vals);
        let sd = var(vals, x).sqrt();
        2.0 * x / (x * x + 1.0 + sd)
    }

    fn ssim(p: &[f64], g: &[f64]) -> f64 {
        let (x, y) = (mean(p), mean(g));
        let (sx, sy, sxy) = (var(p, x), var(g, y), cov(p, x, g, y));
        let alpha = 4.0 * x * y * sxy;
        let beta = (x * x + y * y) * (sx + sy);
        if alpha != 0.0 {
            alpha / beta
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn s_measure(pred: &[f64], gt: &[bool], h: usize, w: usize, alpha: f64) -> f64 {
        let n = pred.len();
        let nf = fg_count(gt);
        let y = mean(pred);
        if nf == 0 {
            return (1.0 - y).max(0.0);
        }
        if nf == n {
            return y;
        }
        // object part
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for i in 0..n {
            if gt[i] {
                fg.push(pred[i]);
            } else {
                bg.push(1.0 - pred[i]);
            }
        }
        let u = nf as f64 / n as f64;
        let so = u * object_part(&fg) + (1.0 - u) * object_part(&bg);

        // region part, split at the rounded centroid (+1)
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if gt[r * w + c] {
                    cx += c as f64;
                    cy += r as f64;
                }
            }
        }
        let sx = ((cx / nf as f64).round_ties_even() as usize + 1).min(w);
        let sy = ((cy / nf as f64).round_ties_even() as usize + 1).min(h);
        let mut sr = 0.0;
        for (r0, r1, c0, c1) in [(0, sy, 0, sx), (0, sy, sx, w), (sy, h, 0, sx), (sy, h, sx, w)] {
            let mut pv = Vec::new();
            let mut gv = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    pv.push(pred[r * w + c]);
                    gv.push(as_f(gt[r * w + c]));
                }
            }
            if pv.is_empty() {
                continue;
            }
            sr += pv.len() as f64 / n as f64 * ssim(&pv, &gv);
        }
        (alpha * so + (1.0 - alpha) * sr).clamp(0.0, 1.0)
    }

    pub fn weighted_f(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
        let n = pred.len();
        if fg_count(gt) == 0 {
            return if pred.iter().all(|&p| p < 0.5) { 1.0 } else { 0.0 };
        }
        let err: Vec<f64> = (0..n).map(|i| (pred[i] - as_f(gt[i])).abs()).collect();
        // brute-force nearest foreground pixel; first in row-major order wins ties
        let mut nearest = vec![0usize; n];
        let mut dist = vec![0.0f64; n];
        for i in 0..n {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let mut best = (i64::MAX, 0usize);
            for j in 0..n {
                if !gt[j] {
                    continue;
                }
                let (rj, cj) = ((j / w) as i64, (j % w) as i64);
                let d = (r - rj) * (r - rj) + (c - cj) * (c - cj);
                if d < best.0 {
                    best = (d, j);
                }
            }
            nearest[i] = best.1;
            dist[i] = (best.0 as f64).sqrt();
        }
        let et: Vec<f64> = (0..n).map(|i| if gt[i] { err[i] } else { err[nearest[i]] }).collect();

        let mut kernel = [[0.0f64; 7]; 7];
        let mut total = 0.0;
        for (a, row) in kernel.iter_mut().enumerate() {
            for (b, k) in row.iter_mut().enumerate() {
                let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
                *k = (-(dx * dx + dy * dy) / (2.0 * 25.0)).exp();
                total += *k;
            }
        }
        let mut ea = vec![0.0; n];
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for a in 0..7 {
                    for b in 0..7 {
                        let rr = (r as i64 + a as i64 - 3).max(0).min(h as i64 - 1) as usize;
                        let cc = (c as i64 + b as i64 - 3).max(0).min(w as i64 - 1) as usize;
                        s += kernel[a][b] / total * et[rr * w + cc];
                    }
                }
                ea[r * w + c] = s;
            }
        }
        let mut min_e = err.clone();
        for i in 0..n {
            if gt[i] && ea[i] < err[i] {
                min_e[i] = ea[i];
            }
        }
        let mut weighted = 0.0;
        let mut missed = 0.0;
        let nf = fg_count(gt) as f64;
        for i in 0..n {
            if gt[i] {
                missed += min_e[i];
            } else {
                let b = 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp();
                weighted += min_e[i] * b;
            }
        }
        let tp = nf - missed;
        let r = 1.0 - missed / nf;
        let p = if tp + weighted > 0.0 { tp / (tp + weighted) } else { 0.0 };
        if r + p > 0.0 {
            2.0 * r * p / (r + p)
        } else {
            0.0
        }
    }

    fn binarize(pred: &[f64], k: usize) -> Vec<bool> {
        let thr = k as f64 / 256.0;
        pred.iter().map(|&p| p >= thr).collect()
    }

    pub fn mean_f(pred: &[f64], gt: &[bool]) -> f64 {
        let nf = fg_count(gt);
        let mut sum = 0.0;
        for k in 1..=256 {
            let b = binarize(pred, k);
            let pp = b.iter().filter(|x| **x).count();
            if nf == 0 {
                sum += if pp == 0 { 1.0 } else { 0.0 };
                continue;
            }
            let tp = (0..b.len()).filter(|&i| b[i] && gt[i]).count();
            let p = if pp > 0 { tp as f64 / pp as f64 } else { 0.0 };
            let r = tp as f64 / nf as f64;
            if p + r > 0.0 && tp > 0 {
                sum += 1.3 * p * r / (0.3 * p + r);
            }
        }
        sum / 256.0
    }

    pub fn e_measure(pred: &[f64], gt: &[bool]) -> f64 {
        let n = pred.len();
        let nf = fg_count(gt);
        let g: Vec<f64> = gt.iter().map(|&x| as_f(x)).collect();
        let mut sum = 0.0;
        for k in 1..=256 {
            let b: Vec<f64> = binarize(pred, k).into_iter().map(as_f).collect();
            let enhanced: Vec<f64> = if nf == 0 {
                b.iter().map(|x| 1.0 - x).collect()
            } else if nf == n {
                b.clone()
            } else {
                let (mb, mg) = (mean(&b), mean(&g));
                (0..n)
                    .map(|i| {
                        let (fa, ga) = (b[i] - mb, g[i] - mg);
                        let den = fa * fa + ga * ga;
                        let align = if den > 0.0 { 2.0 * fa * ga / den } else { 0.0 };
                        (align + 1.0) * (align + 1.0) / 4.0
                    })
                    .collect()
            };
            sum += enhanced.iter().sum::<f64>() / n as f64;
        }
        sum / 256.0
    }
}

pub fn prob_mask(h: usize, w: usize, data: Vec<f64>) -> MaskTensor {
    MaskTensor::new(1, h, w, data, MaskSpace::Probability).unwrap()
}

pub fn gt_mask(h: usize, w: usize, gt: &[bool]) -> MaskTensor {
    prob_mask(h, w, gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect())
}

/// Run configuration with a network small enough for gradient checks.
pub fn tiny_config(size: usize) -> RunConfig {
    let mut c = RunConfig::new();
    let size = size.to_string();
    for (k, v) in [
        ("encoder_widths", "4,4,8,8"),
        ("cond_width", "8"),
        ("unet_widths", "4,4,8,8,8"),
        ("time_width", "8"),
        ("image_size", size.as_str()),
        ("batch_size", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

pub fn random_images<R: Rng>(rng: &mut R, n: usize, size: usize) -> ImageBatch {
    ImageBatch::new(n, size, size, (0..n * 3 * size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Disc masks, one per batch element, in probability space.
pub fn disc_masks(n: usize, size: usize) -> MaskTensor {
    let mut data = Vec::with_capacity(n * size * size);
    for b in 0..n {
        let (cx, cy, r) = (size as f64 * (0.3 + 0.1 * b as f64), size as f64 * 0.5, size as f64 * 0.25);
        for y in 0..size {
            for x in 0..size {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                data.push(if d <= r { 1.0 } else { 0.0 });
            }
        }
    }
    MaskTensor::new(n, size, size, data, MaskSpace::Probability).unwrap()
}

pub mod grad {
    use camodiff::iam::{Iam, IamParams};
    use camodiff::model::{ImageBatch, Model};
    use camodiff::diffusion::MaskTensor;
    use camodiff::objectives::LossWeights;
    use camodiff::schedule::NoiseSchedule;
    use camodiff::trainer::loss_and_grads;
    use camodiff_nn::{ParamId, ParamStore, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;

    /// `|a - b| / max(1, |a|, |b|)`.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
    }

    fn iam_loss(store: &ParamStore<f64>, iam: &Iam, d: &Tensor<f64>, f: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
        let mut tape = Tape::inference(store);
        let (dv, fv) = (tape.input(d.clone()), tape.input(f.clone()));
        let out = iam.forward_tokens(&mut tape, dv, fv).unwrap().out;
        tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    /// Largest relative error between tape and central-difference gradients
    /// of `<probe, iam(d, f)>` over every entry of the five projections.
    pub fn iam_max_error(seed: u64, tokens: usize, width: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let iam = Iam::new(&mut store, "iam", width, &mut rng);
        let mut rand_t = |shape: &[usize]| Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (d, f, probe) = (rand_t(&[1, tokens, width]), rand_t(&[1, tokens, width]), rand_t(&[1, tokens, width]));

        let mut tape = Tape::new(&store);
        let (dv, fv) = (tape.input(d.clone()), tape.input(f.clone()));
        let out = iam.forward_tokens(&mut tape, dv, fv).unwrap().out;
        let grads = tape.backward(&[(out, probe.clone())]).into_params();

        let IamParams { query, key, value, proxy, cond_value } = iam.params();
        let mut worst = 0.0f64;
        for id in [query, key, value, proxy, cond_value] {
            let analytic = grads.get(id).expect("gradient for every projection").data().to_vec();
            for (j, &a) in analytic.iter().enumerate() {
                let fd = central_difference(&mut store, id, j, |s| iam_loss(s, &iam, &d, &f, &probe));
                worst = worst.max(rel_err(a, fd));
            }
        }
        worst
    }

    fn central_difference(store: &mut ParamStore<f64>, id: ParamId, j: usize, mut f: impl FnMut(&ParamStore<f64>) -> f64) -> f64 {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + STEP;
        let up = f(store);
        store.get_mut(id).data_mut()[j] = orig - STEP;
        let down = f(store);
        store.get_mut(id).data_mut()[j] = orig;
        (up - down) / (2.0 * STEP)
    }

    pub struct ModelCheck {
        pub checked: usize,
        pub total: usize,
        pub max_error: f64,
        pub worst: String,
    }

    /// Compares analytic gradients of the total objective with central
    /// differences on a random `fraction` of the scalars (at least one per
    /// tensor), holding the bound's model mean fixed as the backward pass does.
    #[allow(clippy::too_many_arguments)]
    pub fn model_check(
        model: &Model<f64>,
        images: &ImageBatch,
        y0: &MaskTensor,
        t: &[usize],
        eps: &[f64],
        schedule: &NoiseSchedule,
        weights: LossWeights,
        fraction: f64,
        seed: u64,
    ) -> ModelCheck {
        let (eval, grads) = loss_and_grads(model, images, y0, t, eps, schedule, weights, None).unwrap();
        let frozen = eval.model_mean.clone();
        let mut store = model.params.clone();
        let mut probe = Model { network: model.network.clone(), params: model.params.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = store.ids().collect();
        let mut out = ModelCheck { checked: 0, total: store.num_scalars(), max_error: 0.0, worst: String::new() };
        for id in ids {
            let n = store.get(id).numel();
            let picks = ((n as f64 * fraction).round() as usize).max(1);
            let analytic = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
            for _ in 0..picks {
                let j = rng.random_range(0..n);
                let fd = central_difference(&mut store, id, j, |s| {
                    probe.params = s.clone();
                    loss_and_grads(&probe, images, y0, t, eps, schedule, weights, Some(&frozen)).unwrap().0.breakdown.total
                });
                let e = rel_err(analytic[j], fd);
                if e > out.max_error {
                    out.max_error = e;
                    out.worst = format!("{}[{j}]: analytic {:.6e} numeric {fd:.6e}", store.name(id), analytic[j]);
                }
                out.checked += 1;
            }
        }
        out
    }
}
