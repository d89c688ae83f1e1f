use fresco_core::nn::*;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reps = 40;

    // Translator at divisor-32 widths on a 24-patch batch.
    let mut f = build_translator(4, &[2, 4, 8, 16, 32], &mut rng);
    let x = Array4::from_shape_fn((24, 1, 8, 8), |_| rng.random::<f64>());
    let t = Instant::now();
    for _ in 0..reps {
        let y = f.forward(x.clone(), true);
        let _ = f.backward(y);
    }
    println!("translator fwd+bwd: {:.1}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let mut g = build_inverse(4, 2, &mut rng);
    let xm = Array4::from_shape_fn((24, 1, 32, 32), |_| rng.random::<f64>());
    let t = Instant::now();
    for _ in 0..reps {
        let y = g.forward(xm.clone(), true);
        let _ = g.backward(y);
    }
    println!("inverse fwd+bwd: {:.1}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let mut d = build_discriminator(2, 3, &mut rng);
    let t = Instant::now();
    for _ in 0..reps {
        let y = d.forward(xm.clone(), true);
        let _ = d.backward(y);
    }
    println!("discriminator fwd+bwd: {:.1}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // Individual layer timings at the translator's hottest shapes.
    for (cin, cout, hw, k, label) in [
        (1usize, 2usize, 32usize, 1usize, "stem conv1x1"),
        (2, 2, 32, 3, "stem conv3"),
        (2, 4, 16, 3, "enc1 conv"),
        (4, 2, 32, 3, "dec4 conv (2w->w)"),
        (32, 32, 2, 3, "bottleneck conv"),
    ] {
        let mut conv = Conv2d::new(cin, cout, k, 1, k / 2, PadMode::Zero, &mut rng);
        let x = Array4::from_shape_fn((24, cin, hw, hw), |_| rng.random::<f64>());
        let t = Instant::now();
        for _ in 0..reps {
            let y = conv.forward(x.clone(), true);
            let _ = conv.backward(y);
        }
        println!("{label} ({cin}->{cout} @{hw}): {:.2}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }

    let mut bn = BatchNorm2d::new(2);
    let x = Array4::from_shape_fn((24, 2, 32, 32), |_| rng.random::<f64>());
    let t = Instant::now();
    for _ in 0..reps {
        let y = bn.forward(x.clone(), true);
        let _ = bn.backward(y);
    }
    println!("bn @32 w2: {:.2}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let mut up = UpsampleBilinear::new(4);
    let x = Array4::from_shape_fn((24, 1, 8, 8), |_| rng.random::<f64>());
    let t = Instant::now();
    for _ in 0..reps {
        let y = up.forward(x.clone(), true);
        let _ = up.backward(y);
    }
    println!("upsample x4: {:.2}ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}
