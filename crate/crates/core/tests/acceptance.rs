//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! `ACCEPTANCE_ONLY=1,5,10` restricts the run to the listed criteria.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use camodiff::data_io::{generate_synthetic, SynthConfig};
use camodiff::diffusion::{p_mean_variance, q_posterior, q_sample, q_sample_iterative, terminal_kl, DenoiserOutput, MaskSpace, MaskTensor};
use camodiff::iam::{iam_forward, IamWeights, TokenizedFeature};
use camodiff::model::{Model, ModelConfig};
use camodiff::objectives::LossWeights;
use camodiff::sampler::sample;
use camodiff::schedule::NoiseSchedule;
use camodiff::trainer::{train_step, TrainState};
use common::{disc_masks, random_images, tiny_config};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Marks an outcome failed when it blew its time budget.
fn within(mut o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    if elapsed > budget {
        o.pass = false;
        o.detail.push_str(&format!("; over budget {:.0?} > {budget:.0?}", elapsed));
    }
    o
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let o = f();
    within(o, start.elapsed(), budget)
}

// 1. Iterative forward chain matches the closed-form marginal.

const MARGINAL_SAMPLES: usize = 20_000;
const MARGINAL_SE: f64 = 3.0;

fn marginal_equivalence() -> Outcome {
    timed(Duration::from_secs(60), || {
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let pattern = [-1.0, -0.3, 0.4, 1.0];
        let n = MARGINAL_SAMPLES;
        let data: Vec<f64> = (0..n).flat_map(|_| pattern).collect();
        let y0 = MaskTensor::new(n, 1, 4, data, MaskSpace::Diffusion).unwrap();
        let mut worst = 0.0f64;
        for t in [1, 5, 10] {
            let ys = q_sample_iterative(&y0, t, 1000 + t as u64, &schedule).unwrap();
            let ab = schedule.alpha_bar(t);
            for (j, &v0) in pattern.iter().enumerate() {
                let col: Vec<f64> = (0..n).map(|b| ys.item(b)[j]).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let (m_true, v_true) = (ab.sqrt() * v0, 1.0 - ab);
                let se_mean = (v_true / n as f64).sqrt();
                let se_var = v_true * (2.0 / (n - 1) as f64).sqrt();
                worst = worst.max((mean - m_true).abs() / se_mean).max((var - v_true).abs() / se_var);
            }
        }
        outcome(worst <= MARGINAL_SE, format!("largest deviation {worst:.2} standard errors (limit {MARGINAL_SE})"))
    })
}

// 2. Terminal distribution is close to a standard normal.

const TERMINAL_KL: f64 = 1e-4;

fn terminal_distribution() -> Outcome {
    timed(Duration::from_secs(1), || {
        let schedule = NoiseSchedule::default_linear();
        let grid: Vec<f64> = (0..=200).map(|i| -1.0 + 0.01 * f64::from(i)).collect();
        let y0 = MaskTensor::new(grid.len(), 1, 1, grid, MaskSpace::Diffusion).unwrap();
        let worst = terminal_kl(&y0, &schedule).into_iter().fold(0.0, f64::max);
        outcome(worst < TERMINAL_KL, format!("max KL {worst:.3e} nats/dim (limit {TERMINAL_KL:e})"))
    })
}

// 3. True noise through the reverse mean reproduces the posterior mean.

const POSTERIOR_TOL: f64 = 1e-5;

fn posterior_consistency() -> Outcome {
    timed(Duration::from_secs(10), || {
        let schedule = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let p = 16;
            let y0 = MaskTensor::new(1, 4, 4, (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect(), MaskSpace::Diffusion).unwrap();
            let t = [rng.random_range(1..=schedule.steps())];
            let eps: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let yt = q_sample(&y0, &t, &eps, &schedule).unwrap();
            let v = (0..p).map(|_| rng.random::<f64>()).collect();
            let out = DenoiserOutput::new(1, 4, 4, eps, v).unwrap();
            let model = p_mean_variance(&out, &yt, &t, &schedule).unwrap();
            let post = q_posterior(&y0, &yt, &t, &schedule).unwrap();
            for (a, b) in model.mean.iter().zip(&post.mean) {
                worst = worst.max((a - b).abs());
            }
        }
        outcome(worst <= POSTERIOR_TOL, format!("max |mean difference| {worst:.3e} (limit {POSTERIOR_TOL:e})"))
    })
}

// 4. Analytic gradients agree with central differences.

const GRAD_TOL: f64 = 1e-4;
const GRAD_FRACTION: f64 = 0.01;
/// Smallest spatial size the stride-32 bottleneck admits.
const GRAD_SIZE: usize = 32;

fn gradient_correctness() -> Outcome {
    timed(Duration::from_secs(300), || {
        let iam = (0..5).map(|s| common::grad::iam_max_error(s, 2 + s as usize, 2 + (s as usize % 3))).fold(0.0, f64::max);

        let cfg = tiny_config(GRAD_SIZE);
        let model = Model::<f32>::new(cfg.model.clone(), 11).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images = random_images(&mut rng, 2, GRAD_SIZE);
        let y0 = disc_masks(2, GRAD_SIZE);
        let eps: Vec<f64> = (0..2 * GRAD_SIZE * GRAD_SIZE).map(|_| StandardNormal.sample(&mut rng)).collect();
        let schedule = NoiseSchedule::default_linear();
        let r = common::grad::model_check(&model, &images, &y0, &[1, 417], &eps, &schedule, LossWeights::default(), GRAD_FRACTION, 12);
        outcome(
            iam < GRAD_TOL && r.max_error < GRAD_TOL,
            format!(
                "attention max rel error {iam:.2e}; model max rel error {:.2e} over {} of {} scalars (worst {}) (limit {GRAD_TOL:e})",
                r.max_error, r.checked, r.total, r.worst
            ),
        )
    })
}

// 5. Attention contracts.

const STOCHASTIC_TOL: f64 = 1e-6;

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenizedFeature {
    TokenizedFeature { tokens: (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(), height: 1, width: n, channels: d }
}

fn permute_rows(x: &TokenizedFeature, perm: &[usize]) -> TokenizedFeature {
    let d = x.channels;
    let tokens = perm.iter().flat_map(|&i| x.tokens[i * d..(i + 1) * d].to_vec()).collect();
    TokenizedFeature { tokens, ..x.clone() }
}

/// N = 2, d = 2 worked by hand:
/// q = D, k = D Wk swaps columns, p = F Wp, v = D Wv, u = F / 2.
/// With D = I, F = [[1, 1], [0, 1]], Wp = diag(1, 2), Wv = [[1, 1], [0, 1]]:
/// q p^T = [[1, 0], [2, 2]], k p^T = [[2, 2], [1, 0]], v + u = [[1.5, 1.5], [0, 1.5]].
fn hand_example() -> (f64, Vec<f64>) {
    let weights = IamWeights {
        width: 2,
        query: vec![1.0, 0.0, 0.0, 1.0],
        key: vec![0.0, 1.0, 1.0, 0.0],
        value: vec![1.0, 1.0, 0.0, 1.0],
        proxy: vec![1.0, 0.0, 0.0, 2.0],
        cond_value: vec![0.5, 0.0, 0.0, 0.5],
    };
    let d = TokenizedFeature { tokens: vec![1.0, 0.0, 0.0, 1.0], height: 1, width: 2, channels: 2 };
    let f = TokenizedFeature { tokens: vec![1.0, 1.0, 0.0, 1.0], height: 1, width: 2, channels: 2 };
    let got = iam_forward(&d, &f, &weights).unwrap();

    // softmax(1/sqrt2, 0) = (a, 1 - a); softmax(c, c) = (1/2, 1/2)
    let e = std::f64::consts::FRAC_1_SQRT_2.exp();
    let a = e / (e + 1.0);
    let m1 = [a, 1.0 - a, 0.5, 0.5];
    let m2 = [0.5, 0.5, a, 1.0 - a];
    let p00 = m1[0] * m2[0] + m1[1] * m2[2];
    let p01 = m1[0] * m2[1] + m1[1] * m2[3];
    let p10 = m1[2] * m2[0] + m1[3] * m2[2];
    let p11 = m1[2] * m2[1] + m1[3] * m2[3];
    let want = [1.5 * p00, 1.5 * p00 + 1.5 * p01, 1.5 * p10, 1.5 * p10 + 1.5 * p11];
    let mut err = 0.0f64;
    for (g, w) in got.out.iter().zip(want).chain(got.m1.iter().zip(m1)).chain(got.m2.iter().zip(m2)) {
        err = err.max((g - w).abs());
    }
    (err, got.out)
}

fn iam_contracts() -> Outcome {
    timed(Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut row_err, mut perm_err, mut shapes_ok) = (0.0f64, 0.0f64, true);
        for _ in 0..20 {
            let (n, d) = (rng.random_range(2..=7), rng.random_range(2..=5));
            let weights = IamWeights::random(d, &mut rng);
            let (dt, ft) = (random_tokens(&mut rng, n, d), random_tokens(&mut rng, n, d));
            let base = iam_forward(&dt, &ft, &weights).unwrap();
            shapes_ok &= base.out.len() == n * d && base.m1.len() == n * n && base.m2.len() == n * n;
            for m in [&base.m1, &base.m2] {
                for row in m.chunks(n) {
                    row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                    shapes_ok &= row.iter().all(|&v| v >= 0.0);
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let moved = iam_forward(&permute_rows(&dt, &perm), &permute_rows(&ft, &perm), &weights).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                for c in 0..d {
                    perm_err = perm_err.max((moved.out[i * d + c] - base.out[src * d + c]).abs());
                }
            }
        }
        let (hand_err, _) = hand_example();
        outcome(
            row_err <= STOCHASTIC_TOL && perm_err <= 1e-12 && shapes_ok && hand_err <= 1e-12,
            format!("row-sum error {row_err:.1e}, permutation error {perm_err:.1e}, shapes ok {shapes_ok}, hand example error {hand_err:.1e}"),
        )
    })
}

// 6. Metrics against the brute-force oracles.

const METRIC_TOL: f64 = 1e-6;

fn metric_scores(pred: &[f64], gt: &[bool], h: usize, w: usize) -> [f64; 5] {
    use camodiff::metrics;
    let p = common::prob_mask(h, w, pred.to_vec());
    let g = common::gt_mask(h, w, gt);
    [
        metrics::s_measure(&p, &g, metrics::DEFAULT_ALPHA).unwrap(),
        metrics::weighted_f(&p, &g).unwrap(),
        metrics::mean_f(&p, &g).unwrap(),
        metrics::e_measure(&p, &g).unwrap(),
        metrics::mae(&p, &g).unwrap(),
    ]
}

fn metric_oracles() -> Outcome {
    use common::oracle;
    timed(Duration::from_secs(120), || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let density = rng.random_range(0.05..0.8);
            let gt: Vec<bool> = (0..64).map(|_| rng.random_bool(density)).collect();
            let pred: Vec<f64> = (0..64).map(|_| rng.random()).collect();
            let got = metric_scores(&pred, &gt, 8, 8);
            let want = [
                oracle::s_measure(&pred, &gt, 8, 8, 0.5),
                oracle::weighted_f(&pred, &gt, 8, 8),
                oracle::mean_f(&pred, &gt),
                oracle::e_measure(&pred, &gt),
                oracle::mae(&pred, &gt),
            ];
            for k in 0..5 {
                worst = worst.max((got[k] - want[k]).abs());
            }
        }
        let mut violations = 0usize;
        for a in 0u32..512 {
            let pred: Vec<f64> = (0..9).map(|b| f64::from((a >> b) & 1)).collect();
            for g in 0u32..512 {
                let gt: Vec<bool> = (0..9).map(|b| (g >> b) & 1 == 1).collect();
                let s = metric_scores(&pred, &gt, 3, 3);
                let perfect = s[..4].iter().all(|&v| v == 1.0) && s[4] == 0.0;
                let none_perfect = s[..4].iter().all(|&v| v != 1.0) && s[4] != 0.0;
                if (a == g && !perfect) || (a != g && !none_perfect) {
                    violations += 1;
                }
            }
        }
        outcome(worst <= METRIC_TOL && violations == 0, format!("max oracle difference {worst:.2e} (limit {METRIC_TOL:e}); {violations} of 262144 binary pairs violate perfect-iff-equal"))
    })
}

// 7. Respacing keeps the retained cumulative products and speeds sampling up.

const RESPACED_STEPS: usize = 50;
const SPEEDUP: f64 = 15.0;

fn respacing_fidelity() -> Outcome {
    let full = NoiseSchedule::default_linear();
    let short = full.respace(RESPACED_STEPS).unwrap();
    let exact = (1..=RESPACED_STEPS).all(|s| short.alpha_bar(s).to_bits() == full.alpha_bar(short.original_index(s)).to_bits());

    let model = Model::<f32>::new(ModelConfig::compact(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = random_images(&mut rng, 1, 64);
    let t0 = Instant::now();
    sample(&model, &full, &image, Some(RESPACED_STEPS), 1, &[]).unwrap();
    let fast = t0.elapsed();
    let t0 = Instant::now();
    sample(&model, &full, &image, None, 1, &[]).unwrap();
    let slow = t0.elapsed();
    let ratio = slow.as_secs_f64() / fast.as_secs_f64();
    outcome(
        exact && ratio >= SPEEDUP,
        format!("retained alpha-bar exact {exact}; {RESPACED_STEPS} steps {fast:.2?} vs 1000 steps {slow:.2?} (speedup {ratio:.1}x, need {SPEEDUP}x)"),
    )
}

// 8. End-to-end synthetic run through the command line.

const RECIPE: &str = "\
T = 1000
beta_start = 1e-4
beta_end = 0.02
learning_rate = 1e-4
batch_size = 16
image_size = 64
max_steps = 5000
seed = 0
checkpoint_interval = 0
encoder_widths = 16,32,48,64
cond_width = 64
unet_widths = 8,16,32,48,64
time_width = 32
";
const SAMPLE_STEPS: &str = "50";
const MAE_LIMIT: f64 = 0.10;
const S_ALPHA_LIMIT: f64 = 0.80;
const E2E_BUDGET: Duration = Duration::from_secs(45 * 60);

#[derive(Debug, Clone, Copy)]
struct Mean {
    s_alpha: f64,
    f_w: f64,
    f_m: f64,
    e_m: f64,
    mae: f64,
}

fn camodiff(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_camodiff")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "camodiff {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// Synthetic data plus a copy of the held-out split.
fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        camodiff(&["synth", "--count", "400", "--size", "64", "--contrast", "0.35", "--seed", "7", "--out", path(&data)]);
        for sub in ["Imgs", "GT"] {
            fs::create_dir_all(root.join("test").join(sub)).unwrap();
        }
        for stem in fs::read_to_string(data.join("test.txt")).unwrap().lines().filter(|l| !l.is_empty()) {
            for sub in ["Imgs", "GT"] {
                let name = format!("{stem}.png");
                fs::copy(data.join(sub).join(&name), root.join("test").join(sub).join(&name)).unwrap();
            }
        }
        fs::write(root.join("recipe.cfg"), RECIPE).unwrap();
        Workspace { _dir: dir, root }
    })
}

fn parse_mean(stdout: &str) -> Mean {
    let line = stdout.lines().find(|l| l.starts_with("MEAN,")).expect("MEAN row");
    let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    Mean { s_alpha: v[0], f_w: v[1], f_m: v[2], e_m: v[3], mae: v[4] }
}

/// Trains one variant of the recipe, samples the held-out split and
/// evaluates it. Returns the mean scores and the wall time.
fn run_variant(name: &str, flags: &[&str], extra_sample: &[&str]) -> (Mean, Duration) {
    let ws = workspace();
    let start = Instant::now();
    let run = ws.root.join(format!("run_{name}"));
    let pred = ws.root.join(format!("pred_{name}"));
    let (recipe, data, test_imgs) = (ws.root.join("recipe.cfg"), ws.root.join("data"), ws.root.join("test/Imgs"));
    let mut args = vec!["train", "--config", path(&recipe), "--data", path(&data), "--out", path(&run), "--progress", "0"];
    args.extend_from_slice(flags);
    camodiff(&args);
    let ck = run.join("final.ckpt");
    let mut args = vec!["sample", "--checkpoint", path(&ck), "--images", path(&test_imgs), "--out", path(&pred), "--steps", SAMPLE_STEPS];
    args.extend_from_slice(extra_sample);
    camodiff(&args);
    let stdout = camodiff(&["eval", "--pred", path(&pred), "--gt", path(&ws.root.join("test/GT"))]);
    (parse_mean(&stdout), start.elapsed())
}

fn full_run() -> (Mean, Duration) {
    static FULL: OnceLock<(Mean, Duration)> = OnceLock::new();
    *FULL.get_or_init(|| {
        let synth_start = Instant::now();
        workspace();
        let synth = synth_start.elapsed();
        let (m, t) = run_variant("full", &[], &[]);
        (m, t + synth)
    })
}

fn end_to_end() -> Outcome {
    let (m, elapsed) = full_run();
    let o = outcome(
        m.mae < MAE_LIMIT && m.s_alpha > S_ALPHA_LIMIT,
        format!(
            "MAE {:.4} (need < {MAE_LIMIT}), S_alpha {:.4} (need > {S_ALPHA_LIMIT}); F_w {:.4}, F_m {:.4}, E_m {:.4}; {:.1} min",
            m.mae,
            m.s_alpha,
            m.f_w,
            m.f_m,
            m.e_m,
            elapsed.as_secs_f64() / 60.0
        ),
    );
    within(o, elapsed, E2E_BUDGET)
}

/// Ensemble of four against the single sample on the trained model; reported only.
fn ensemble_report() -> String {
    let ws = workspace();
    full_run();
    let pred = ws.root.join("pred_ensemble");
    camodiff(&["sample", "--checkpoint", path(&ws.root.join("run_full/final.ckpt")), "--images", path(&ws.root.join("test/Imgs")), "--out", path(&pred), "--steps", SAMPLE_STEPS, "--ensemble", "4"]);
    let m = parse_mean(&camodiff(&["eval", "--pred", path(&pred), "--gt", path(&ws.root.join("test/GT"))]));
    format!("4-sample ensemble MAE {:.4} vs single {:.4}", m.mae, full_run().0.mae)
}

// 9. Ablations do not beat the full model.

fn ablations() -> Outcome {
    let (full, _) = full_run();
    let (no_iam, _) = run_variant("no_iam", &["--no-iam"], &[]);
    let (no_ff, _) = run_variant("no_ff", &["--no-fusion"], &[]);
    outcome(
        no_iam.mae >= full.mae && no_ff.mae >= full.mae,
        format!("MAE full {:.4}, without attention {:.4}, without fusion {:.4}", full.mae, no_iam.mae, no_ff.mae),
    )
}

// 10. Fixed seeds give bit-identical results.

fn determinism() -> Outcome {
    let cfg = tiny_config(32);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let images = random_images(&mut rng, 2, 32);
    let masks = disc_masks(2, 32);
    let schedule = cfg.train.schedule().unwrap();
    let run = || {
        let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
        let losses: Vec<_> = (0..2).map(|_| train_step(&mut state, &images, &masks, &cfg.train, &schedule).unwrap()).collect();
        let bits: Vec<u32> = state.model.params.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (losses, bits, state.model)
    };
    let (la, pa, model) = run();
    let (lb, pb, _) = run();
    let train_same = la == lb && pa == pb;

    let one = images.item(0);
    let s1 = sample(&model, &schedule, &one, Some(10), 4, &[]).unwrap().final_mask;
    let s2 = sample(&model, &schedule, &one, Some(10), 4, &[]).unwrap().final_mask;
    let s3 = sample(&model, &schedule, &one, Some(10), 5, &[]).unwrap().final_mask;
    let sample_same = s1 == s2 && s1 != s3;

    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { count: 8, image_size: 32, ..Default::default() };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_synthetic(&synth, &a).unwrap();
    generate_synthetic(&synth, &b).unwrap();
    let mut synth_same = true;
    for sub in ["Imgs", "GT"] {
        for e in fs::read_dir(a.join(sub)).unwrap() {
            let name = e.unwrap().file_name();
            synth_same &= fs::read(a.join(sub).join(&name)).unwrap() == fs::read(b.join(sub).join(&name)).unwrap();
        }
    }
    synth_same &= fs::read(a.join("train.txt")).unwrap() == fs::read(b.join("train.txt")).unwrap();
    outcome(train_same && sample_same && synth_same, format!("train_step {train_same}, sample {sample_same}, generate_synthetic {synth_same}"))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "marginal equivalence", marginal_equivalence),
        (2, "terminal distribution", terminal_distribution),
        (3, "posterior/mean consistency", posterior_consistency),
        (4, "gradient correctness", gradient_correctness),
        (5, "attention contracts", iam_contracts),
        (6, "metric oracle equivalence", metric_oracles),
        (7, "respacing fidelity", respacing_fidelity),
        (8, "end-to-end synthetic run", end_to_end),
        (9, "ablation toggles", ablations),
        (10, "determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest flags such as --nocapture are accepted and ignored; `--list` is honoured.
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _) in &criteria {
            println!("criterion_{n}_{}: test", name.replace([' ', '/', '-'], "_"));
        }
        return;
    }
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} [{name}] {} ({:.1?})", result.detail, start.elapsed());
        if n == 8 {
            match panic::catch_unwind(ensemble_report) {
                Ok(line) => println!("             note: {line}"),
                Err(_) => println!("             note: ensemble comparison did not run"),
            }
        }
        if !result.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
