//! Segmentation metrics: structure measure, weighted F, mean F, mean
//! enhanced-alignment measure and mean absolute error, per image and per
//! dataset.
//!
//! Conventions where the reference formulas leave room:
//! - thresholded metrics sweep `k / 256` for `k = 1..=256` with `pred >= thr`,
//!   so a binary prediction equal to the ground truth scores exactly 1;
//! - the enhanced-alignment sum is divided by the pixel count;
//! - the weighted-F error smoothing replicates border pixels;
//! - sample variances use `max(n - 1, 1)` as denominator, and empty region
//!   quadrants contribute nothing;
//! - ratios are guarded only against an exactly zero denominator (no
//!   epsilon), so a perfect prediction scores exactly 1;
//! - for an empty ground truth, weighted F and mean F score 1 for an empty
//!   (thresholded) prediction and 0 otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data_io::{load_gray, load_mask};
use crate::diffusion::{MaskSpace, MaskTensor};
use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const THRESHOLDS: usize = 256;
/// Threshold deciding whether a prediction is empty for weighted F.
pub const EMPTY_THRESHOLD: f64 = 0.5;
const MEAN_F_BETA2: f64 = 0.3;
const WEIGHTED_F_BETA2: f64 = 1.0;

/// One image: prediction in `[0, 1]` and a binary ground truth.
struct Pair<'a> {
    pred: &'a [f64],
    gt: Vec<bool>,
    h: usize,
    w: usize,
}

fn pair<'a>(pred: &'a MaskTensor, gt: &MaskTensor) -> Result<Pair<'a>> {
    if pred.batch() != 1 || !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} and ground truth {}x{}x{} must be single same-sized masks",
            pred.batch(),
            pred.height(),
            pred.width(),
            gt.batch(),
            gt.height(),
            gt.width()
        )));
    }
    if pred.space() != MaskSpace::Probability || gt.space() != MaskSpace::Probability {
        return Err(Error::Shape("metrics need probability-space masks".into()));
    }
    Ok(Pair { pred: pred.data(), gt: gt.data().iter().map(|&v| v >= 0.5).collect(), h: pred.height(), w: pred.width() })
}

pub fn mae(pred: &MaskTensor, gt: &MaskTensor) -> Result<f64> {
    let p = pair(pred, gt)?;
    Ok(p.pred.iter().zip(&p.gt).map(|(&x, &g)| (x - f64::from(u8::from(g))).abs()).sum::<f64>() / p.pred.len() as f64)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    (mean, var.sqrt())
}

/// `alpha * object + (1 - alpha) * region`, clamped below at 0.
pub fn s_measure(pred: &MaskTensor, gt: &MaskTensor, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let p = pair(pred, gt)?;
    let n = p.pred.len() as f64;
    let fg = p.gt.iter().filter(|&&g| g).count() as f64;
    let mean_pred = p.pred.iter().sum::<f64>() / n;
    if fg == 0.0 {
        return Ok((1.0 - mean_pred).clamp(0.0, 1.0));
    }
    if fg == n {
        return Ok(mean_pred.clamp(0.0, 1.0));
    }
    let s = alpha * object_score(&p) + (1.0 - alpha) * region_score(&p);
    Ok(s.clamp(0.0, 1.0))
}

fn object_score(p: &Pair) -> f64 {
    let s_obj = |vals: Vec<f64>| {
        let (x, sd) = mean_std(vals.iter().copied());
        2.0 * x / (x * x + 1.0 + sd)
    };
    let fg: Vec<f64> = p.pred.iter().zip(&p.gt).filter(|(_, &g)| g).map(|(&x, _)| x).collect();
    let bg: Vec<f64> = p.pred.iter().zip(&p.gt).filter(|(_, &g)| !g).map(|(&x, _)| 1.0 - x).collect();
    let u = fg.len() as f64 / p.pred.len() as f64;
    u * s_obj(fg) + (1.0 - u) * s_obj(bg)
}

/// Split point: ground-truth centroid rounded half-to-even, plus one.
fn centroid(p: &Pair) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in p.gt.iter().enumerate().filter(|(_, &g)| g) {
        sx += (i % p.w) as f64;
        sy += (i / p.w) as f64;
        n += 1.0;
    }
    let (mx, my) = if n == 0.0 { (p.w as f64 / 2.0, p.h as f64 / 2.0) } else { (sx / n, sy / n) };
    (mx.round_ties_even() as usize + 1, my.round_ties_even() as usize + 1)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let d = (n.max(2) - 1) as f64;
    let x = pred.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let sx = pred.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy = gt.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = pred.iter().zip(gt).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / b
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(p: &Pair) -> f64 {
    let (cx, cy) = centroid(p);
    let (x, y) = (cx.min(p.w), cy.min(p.h));
    let area = (p.h * p.w) as f64;
    let quads = [(0..y, 0..x), (0..y, x..p.w), (y..p.h, 0..x), (y..p.h, x..p.w)];
    quads
        .into_iter()
        .map(|(rows, cols)| {
            let count = rows.len() * cols.len();
            if count == 0 {
                return 0.0;
            }
            let mut pv = Vec::with_capacity(count);
            let mut gv = Vec::with_capacity(count);
            for r in rows {
                for c in cols.clone() {
                    pv.push(p.pred[r * p.w + c]);
                    gv.push(f64::from(u8::from(p.gt[r * p.w + c])));
                }
            }
            count as f64 / area * ssim(&pv, &gv)
        })
        .sum()
}

/// Squared Euclidean distance transform along one line (lower envelope of
/// parabolas); `f` holds 0 at sites and a large value elsewhere.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| f[q] + (q * q) as f64;
    for q in 1..n {
        let mut s = (key(q) - key(v[k])) / (2 * (q - v[k])) as f64;
        while s <= z[k] {
            k -= 1;
            s = (key(q) - key(v[k])) / (2 * (q - v[k])) as f64;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    (0..n)
        .map(|q| {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            (q as f64 - v[k] as f64).powi(2) + f[v[k]]
        })
        .collect()
}

/// For every pixel, the squared distance to the nearest foreground pixel.
fn squared_distance_to_foreground(gt: &[bool], h: usize, w: usize) -> Vec<u64> {
    const FAR: f64 = 1e18;
    let mut cols = vec![0.0; h * w];
    for c in 0..w {
        let f: Vec<f64> = (0..h).map(|r| if gt[r * w + c] { 0.0 } else { FAR }).collect();
        for (r, v) in edt_1d(&f).into_iter().enumerate() {
            cols[r * w + c] = v;
        }
    }
    let mut out = vec![0u64; h * w];
    for r in 0..h {
        let row = edt_1d(&cols[r * w..(r + 1) * w]);
        for (c, v) in row.into_iter().enumerate() {
            out[r * w + c] = v.round() as u64;
        }
    }
    out
}

/// Nearest foreground pixel to `(r, c)` at squared distance `d2`; ties go to
/// the smallest row-major index.
fn nearest_foreground(gt: &[bool], h: usize, w: usize, r: usize, c: usize, d2: u64) -> usize {
    let d = (d2 as f64).sqrt().floor() as i64;
    for dy in -d..=d {
        let rem = d2 as i64 - dy * dy;
        let dx = (rem as f64).sqrt().round() as i64;
        if dx * dx != rem {
            continue;
        }
        let (rr, offsets) = (r as i64 + dy, if dx == 0 { vec![0] } else { vec![-dx, dx] });
        if rr < 0 || rr >= h as i64 {
            continue;
        }
        for ox in offsets {
            let cc = c as i64 + ox;
            if cc >= 0 && cc < w as i64 && gt[rr as usize * w + cc as usize] {
                return rr as usize * w + cc as usize;
            }
        }
    }
    unreachable!("distance transform guarantees a site at distance {d2}")
}

/// Normalised 7x7 Gaussian with sigma 5, tiny entries zeroed.
fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
        }
    }
    let max = k.iter().flatten().copied().fold(0.0, f64::max);
    let mut sum = 0.0;
    for v in k.iter_mut().flatten() {
        if *v < EPS * max {
            *v = 0.0;
        }
        sum += *v;
    }
    k.iter_mut().flatten().for_each(|v| *v /= sum);
    k
}

/// Weighted F-measure with `beta^2 = 1`.
pub fn weighted_f(pred: &MaskTensor, gt: &MaskTensor) -> Result<f64> {
    let p = pair(pred, gt)?;
    let (h, w) = (p.h, p.w);
    if !p.gt.iter().any(|&g| g) {
        return Ok(f64::from(u8::from(p.pred.iter().all(|&v| v < EMPTY_THRESHOLD))));
    }
    let d2 = squared_distance_to_foreground(&p.gt, h, w);
    let e: Vec<f64> = p.pred.iter().zip(&p.gt).map(|(&x, &g)| (x - f64::from(u8::from(g))).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|i| if p.gt[i] { e[i] } else { e[nearest_foreground(&p.gt, h, w, i / w, i % w, d2[i])] }).collect();
    let k = gaussian_kernel();
    let mut ea = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, krow) in k.iter().enumerate() {
                let rr = (r as i64 + i as i64 - 3).clamp(0, h as i64 - 1) as usize;
                for (j, kv) in krow.iter().enumerate() {
                    let cc = (c as i64 + j as i64 - 3).clamp(0, w as i64 - 1) as usize;
                    acc += kv * et[rr * w + cc];
                }
            }
            ea[r * w + c] = acc;
        }
    }
    let (mut tp, mut fp, mut fg_err, mut fg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let min_e = if p.gt[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if p.gt[i] {
            fg += 1.0;
            fg_err += min_e;
        } else {
            let importance = 2.0 - ((0.5f64).ln() / 5.0 * (d2[i] as f64).sqrt()).exp();
            fp += min_e * importance;
        }
    }
    tp += fg - fg_err;
    let recall = 1.0 - fg_err / fg;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let den = recall + WEIGHTED_F_BETA2 * precision;
    Ok(if den > 0.0 { (1.0 + WEIGHTED_F_BETA2) * recall * precision / den } else { 0.0 })
}

/// Counts per threshold `k / 256`, `k = 1..=256`: `(true positives, predicted positives)`.
fn threshold_counts(p: &Pair) -> Vec<(usize, usize)> {
    // Bucket b holds predictions in [b/256, (b+1)/256); a prediction is
    // positive at threshold k/256 when its bucket index is at least k.
    let bucket = |x: f64| ((x * THRESHOLDS as f64).floor().max(0.0) as usize).min(THRESHOLDS);
    let mut fg_hist = vec![0usize; THRESHOLDS + 1];
    let mut all_hist = vec![0usize; THRESHOLDS + 1];
    for (&x, &g) in p.pred.iter().zip(&p.gt) {
        let b = bucket(x);
        all_hist[b] += 1;
        if g {
            fg_hist[b] += 1;
        }
    }
    let mut out = vec![(0, 0); THRESHOLDS];
    let (mut tp, mut pp) = (0, 0);
    for k in (1..=THRESHOLDS).rev() {
        tp += fg_hist[k];
        pp += all_hist[k];
        out[k - 1] = (tp, pp);
    }
    out
}

/// Mean over the threshold sweep of the F-score with `beta^2 = 0.3`.
pub fn mean_f(pred: &MaskTensor, gt: &MaskTensor) -> Result<f64> {
    let p = pair(pred, gt)?;
    let positives = p.gt.iter().filter(|&&g| g).count();
    let counts = threshold_counts(&p);
    let scores = counts.iter().map(|&(tp, pp)| {
        if positives == 0 {
            return f64::from(u8::from(pp == 0));
        }
        let precision = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
        let recall = tp as f64 / positives as f64;
        let num = (1.0 + MEAN_F_BETA2) * precision * recall;
        if num == 0.0 {
            0.0
        } else {
            num / (MEAN_F_BETA2 * precision + recall)
        }
    });
    Ok(scores.sum::<f64>() / THRESHOLDS as f64)
}

/// Mean enhanced-alignment measure over the threshold sweep.
pub fn e_measure(pred: &MaskTensor, gt: &MaskTensor) -> Result<f64> {
    let p = pair(pred, gt)?;
    let n = p.pred.len();
    let gt_fg = p.gt.iter().filter(|&&g| g).count();
    let counts = threshold_counts(&p);
    let scores = counts.iter().map(|&(tp, pp)| {
        let sum = if gt_fg == 0 {
            (n - pp) as f64
        } else if gt_fg == n {
            pp as f64
        } else {
            let parts = [tp, pp - tp, gt_fg - tp, n - pp - (gt_fg - tp)];
            let mp = pp as f64 / n as f64;
            let mg = gt_fg as f64 / n as f64;
            let combos = [(1.0 - mp, 1.0 - mg), (1.0 - mp, -mg), (-mp, 1.0 - mg), (-mp, -mg)];
            parts
                .iter()
                .zip(combos)
                .map(|(&count, (a, b))| {
                    let den = a * a + b * b;
                    let align = if den > 0.0 { 2.0 * a * b / den } else { 0.0 };
                    (align + 1.0).powi(2) / 4.0 * count as f64
                })
                .sum()
        };
        sum / n as f64
    });
    Ok(scores.sum::<f64>() / THRESHOLDS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub s_alpha: f64,
    pub f_w: f64,
    pub f_m: f64,
    pub e_m: f64,
    pub mae: f64,
}

impl Scores {
    pub fn as_array(&self) -> [f64; 5] {
        [self.s_alpha, self.f_w, self.f_m, self.e_m, self.mae]
    }
}

/// Min-max normalisation to `[0, 1]`; constant maps are left unchanged.
pub fn min_max_normalize(pred: &MaskTensor) -> MaskTensor {
    let d = pred.data();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return pred.clone();
    }
    let data = d.iter().map(|v| (v - lo) / (hi - lo)).collect();
    MaskTensor::new(pred.batch(), pred.height(), pred.width(), data, MaskSpace::Probability).expect("same shape")
}

/// All five metrics for one image.
pub fn evaluate_pair(pred: &MaskTensor, gt: &MaskTensor) -> Result<Scores> {
    Ok(Scores {
        s_alpha: s_measure(pred, gt, DEFAULT_ALPHA)?,
        f_w: weighted_f(pred, gt)?,
        f_m: mean_f(pred, gt)?,
        e_m: e_measure(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Unweighted means over `per_image`.
    pub mean: Scores,
    pub per_image: Vec<ImageScores>,
    /// File stems present in only one of the two directories.
    pub unmatched: Vec<String>,
}

pub const REPORT_HEADER: &str = "image,s_alpha,f_w,f_m,e_m,mae";

impl MetricReport {
    pub fn from_rows(per_image: Vec<ImageScores>, unmatched: Vec<String>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Dataset("no predictions match any ground-truth file".into()));
        }
        let n = per_image.len() as f64;
        let mut sums = [0.0; 5];
        for row in &per_image {
            for (s, v) in sums.iter_mut().zip(row.scores.as_array()) {
                *s += v;
            }
        }
        let [s_alpha, f_w, f_m, e_m, mae] = sums.map(|s| s / n);
        Ok(Self { mean: Scores { s_alpha, f_w, f_m, e_m, mae }, per_image, unmatched })
    }

    fn csv_row(name: &str, s: &Scores, digits: usize) -> String {
        let v = s.as_array().map(|x| format!("{x:.digits$}"));
        format!("{name},{}", v.join(","))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for row in &self.per_image {
            let _ = writeln!(out, "{}", Self::csv_row(&row.name, &row.scores, 6));
        }
        let _ = writeln!(out, "{}", Self::csv_row("MEAN", &self.mean, 6));
        out
    }

    /// `MEAN` row with four decimals, for terminal output.
    pub fn mean_row(&self) -> String {
        Self::csv_row("MEAN", &self.mean, 4)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let obj = |s: &Scores| serde_json::json!({"s_alpha": s.s_alpha, "f_w": s.f_w, "f_m": s.f_m, "e_m": s.e_m, "mae": s.mae});
        serde_json::json!({
            "mean": obj(&self.mean),
            "per_image": self.per_image.iter().map(|r| {
                let mut v = obj(&r.scores);
                v["image"] = serde_json::Value::String(r.name.clone());
                v
            }).collect::<Vec<_>>(),
            "unmatched": self.unmatched,
        })
    }
}

const MASK_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

fn mask_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| MASK_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            // First extension in sorted order wins for duplicate stems.
            out.entry(stem.to_string()).or_insert(path.clone());
        }
    }
    Ok(out)
}

/// Loads a grayscale prediction as a probability mask.
pub fn load_prediction(path: &Path) -> Result<MaskTensor> {
    let (w, h, data) = load_gray(path)?;
    MaskTensor::new(1, h as usize, w as usize, data, MaskSpace::Probability)
}

/// Loads a ground-truth mask, binarised at 128.
pub fn load_ground_truth(path: &Path) -> Result<MaskTensor> {
    let m = load_mask(path)?;
    let data = m.pixels().map(|p| f64::from(p.0[0])).collect();
    MaskTensor::new(1, m.height() as usize, m.width() as usize, data, MaskSpace::Probability)
}

/// Scores every prediction in `pred_dir` whose stem matches a file in
/// `gt_dir`, in filename order.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, normalize: bool) -> Result<MetricReport> {
    let preds = mask_files(pred_dir)?;
    let gts = mask_files(gt_dir)?;
    let mut rows = Vec::new();
    let mut unmatched: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    for (stem, gt_path) in &gts {
        let Some(pred_path) = preds.get(stem) else {
            unmatched.push(stem.clone());
            continue;
        };
        let gt = load_ground_truth(gt_path)?;
        let mut pred = load_prediction(pred_path)?;
        if !pred.same_shape(&gt) {
            return Err(Error::Shape(format!("{stem}: prediction is {}x{}, ground truth {}x{}", pred.width(), pred.height(), gt.width(), gt.height())));
        }
        if normalize {
            pred = min_max_normalize(&pred);
        }
        rows.push(ImageScores { name: stem.clone(), scores: evaluate_pair(&pred, &gt)? });
    }
    unmatched.sort();
    MetricReport::from_rows(rows, unmatched)
}
