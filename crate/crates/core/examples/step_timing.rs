//! Times training and sampling steps for the compact configuration.

use std::time::Instant;

use camodiff::config::RunConfig;
use camodiff::data_io::{synth_pair, SynthConfig};
use camodiff::model::ModelConfig;
use camodiff::sampler::sample;
use camodiff::trainer::{make_batch, train_step, TrainState, TrainingSet};

fn main() {
    let mut cfg = RunConfig::new();
    cfg.model = ModelConfig::compact();
    let synth = SynthConfig::default();
    let mut data = TrainingSet::default();
    for i in 0..32 {
        let (img, m) = synth_pair(&synth, i);
        data.images.push(img);
        data.masks.push(m);
    }
    let schedule = cfg.train.schedule().unwrap();
    let mut state = TrainState::new(cfg.model.clone(), &cfg.train).unwrap();
    println!("parameters: {}", state.model.params.num_scalars());
    let steps: u64 = std::env::var("STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let t0 = Instant::now();
    for s in 0..steps {
        let (x, y) = make_batch(&data, &cfg.train, s).unwrap();
        train_step(&mut state, &x, &y, &cfg.train, &schedule).unwrap();
    }
    println!("train step (batch {}): {:.3} s", cfg.train.batch_size, t0.elapsed().as_secs_f64() / steps as f64);
    let (x, _) = make_batch(&data, &cfg.train, 0).unwrap();
    let img = x.item(0);
    let t0 = Instant::now();
    sample(&state.model, &schedule, &img, Some(50), 0, &[]).unwrap();
    println!("sample 50 steps: {:.3} s", t0.elapsed().as_secs_f64());
}
