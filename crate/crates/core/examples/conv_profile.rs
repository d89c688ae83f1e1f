use fresco_core::nn::*;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reps = 50;
    let mut conv = Conv2d::new(4, 2, 3, 1, 1, PadMode::Zero, &mut rng);
    let x = Array4::from_shape_fn((24, 4, 32, 32), |_| rng.random::<f64>());

    let t = Instant::now();
    let mut ys = Vec::new();
    for _ in 0..reps {
        ys.push(conv.forward(x.clone(), true));
        let y = ys.pop().unwrap();
        std::hint::black_box(&y);
        let _ = conv.backward(y);
    }
    println!("fwd+bwd: {:.2}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let y = conv.forward(x.clone(), true);
        std::hint::black_box(&y);
    }
    println!("fwd only: {:.2}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}
