mod common;

use camodiff::metrics::{self, DEFAULT_ALPHA};
use common::{gt_mask, oracle, prob_mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn library(pred: &[f64], gt: &[bool], h: usize, w: usize) -> [f64; 5] {
    let p = prob_mask(h, w, pred.to_vec());
    let g = gt_mask(h, w, gt);
    [
        metrics::s_measure(&p, &g, DEFAULT_ALPHA).unwrap(),
        metrics::weighted_f(&p, &g).unwrap(),
        metrics::mean_f(&p, &g).unwrap(),
        metrics::e_measure(&p, &g).unwrap(),
        metrics::mae(&p, &g).unwrap(),
    ]
}

fn reference(pred: &[f64], gt: &[bool], h: usize, w: usize) -> [f64; 5] {
    [
        oracle::s_measure(pred, gt, h, w, DEFAULT_ALPHA),
        oracle::weighted_f(pred, gt, h, w),
        oracle::mean_f(pred, gt),
        oracle::e_measure(pred, gt),
        oracle::mae(pred, gt),
    ]
}

fn random_case(rng: &mut ChaCha8Rng, i: usize) -> (Vec<f64>, Vec<bool>) {
    let density = rng.random_range(0.1..0.7);
    let gt: Vec<bool> = match i {
        0 => vec![false; 64],
        1 => vec![true; 64],
        _ => (0..64).map(|_| rng.random_bool(density)).collect(),
    };
    let pred = (0..64)
        .map(|j| match i % 3 {
            0 => rng.random::<f64>(),
            // correlated with the ground truth
            1 => (0.6 * f64::from(u8::from(gt[j])) + 0.4 * rng.random::<f64>()).min(1.0),
            // on the threshold grid
            _ => f64::from(rng.random_range(0..=256u32)) / 256.0,
        })
        .collect();
    (pred, gt)
}

#[test]
fn metrics_match_reference_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names = ["s_alpha", "f_w", "f_m", "e_m", "mae"];
    for i in 0..200 {
        let (pred, gt) = random_case(&mut rng, i);
        let got = library(&pred, &gt, 8, 8);
        let want = reference(&pred, &gt, 8, 8);
        for k in 0..5 {
            assert!((got[k] - want[k]).abs() <= TOL, "case {i} {}: {} vs {}", names[k], got[k], want[k]);
        }
    }
}

#[test]
fn binary_three_by_three_pairs_score_perfect_iff_equal() {
    for a in 0u32..512 {
        let pred: Vec<f64> = (0..9).map(|b| f64::from((a >> b) & 1)).collect();
        for g in 0u32..512 {
            let gt: Vec<bool> = (0..9).map(|b| (g >> b) & 1 == 1).collect();
            let got = library(&pred, &gt, 3, 3);
            let equal = a == g;
            for (k, v) in got.iter().enumerate() {
                let perfect = if k == 4 { *v == 0.0 } else { *v == 1.0 };
                assert_eq!(perfect, equal, "pred {a:09b} gt {g:09b} metric {k}: {v}");
            }
        }
    }
}

#[test]
fn binary_three_by_three_pairs_match_reference() {
    for a in (0u32..512).step_by(7) {
        let pred: Vec<f64> = (0..9).map(|b| f64::from((a >> b) & 1)).collect();
        for g in 0u32..512 {
            let gt: Vec<bool> = (0..9).map(|b| (g >> b) & 1 == 1).collect();
            let got = library(&pred, &gt, 3, 3);
            let want = reference(&pred, &gt, 3, 3);
            for k in 0..5 {
                assert!((got[k] - want[k]).abs() <= TOL, "pred {a:09b} gt {g:09b} metric {k}: {} vs {}", got[k], want[k]);
            }
        }
    }
}

fn flip_h(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| v[(i / w) * w + (w - 1 - i % w)]).collect()
}

#[test]
fn flips_leave_all_but_structure_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..50 {
        let (pred, gt) = random_case(&mut rng, i + 2);
        let gtf: Vec<f64> = gt.iter().map(|&g| f64::from(u8::from(g))).collect();
        let fp = flip_h(&pred, 8, 8);
        let fg: Vec<bool> = flip_h(&gtf, 8, 8).into_iter().map(|v| v > 0.5).collect();
        let a = library(&pred, &gt, 8, 8);
        let b = library(&fp, &fg, 8, 8);
        // weighted F is only invariant up to nearest-pixel tie breaking
        for k in [2, 3, 4] {
            assert!((a[k] - b[k]).abs() < 1e-12, "metric {k} changed under flip");
        }
    }
}

#[test]
fn structure_score_rewards_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gt: Vec<bool> = (0..256).map(|i| (i % 16) < 8 && (i / 16) > 4).collect();
    let good: Vec<f64> = gt.iter().map(|&g| if g { 0.9 } else { 0.1 }).collect();
    let noise: Vec<f64> = (0..256).map(|_| rng.random()).collect();
    let s_good = library(&good, &gt, 16, 16)[0];
    let s_noise = library(&noise, &gt, 16, 16)[0];
    assert!(s_good > 0.9 && s_noise < 0.6, "{s_good} {s_noise}");
}
