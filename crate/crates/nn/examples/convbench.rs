use camodiff_nn::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for &(c, hw) in &[(8usize, 64usize), (16, 64), (32, 32), (64, 16)] {
        let mut store = ParamStore::<f32>::new();
        let w = store.add_uniform("w", &[c, c, 3, 3], c * 9, &mut rng);
        let x = Tensor::<f32>::full(&[16, c, hw, hw], 0.5);
        let t0 = std::time::Instant::now();
        let n = 5;
        for _ in 0..n {
            let mut tape = Tape::new(&store);
            let xi = tape.input_with_grad(x.clone());
            let wv = tape.param(w);
            let y = tape.conv2d(xi, wv, None, 1, 1);
            let g = tape.value(y).clone();
            let _ = tape.backward(&[(y, g)]);
        }
        let el = t0.elapsed().as_secs_f64() / n as f64;
        let flop = 16.0 * (c * c * 9 * hw * hw * 2) as f64 * 3.0;
        println!("c={c} hw={hw}: {:.4}s fwd+bwd, {:.1} GFLOPS", el, flop / el / 1e9);
    }
}
