// Capacity check: paired regression onto the oracle translation.
use fresco_core::hsr::*;
use fresco_core::nn::{Adam, Layer};
use fresco_core::synth::synth_patch_model;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let divisor: usize = std::env::args().nth(1).map(|v| v.parse().unwrap()).unwrap_or(32);
    let iters: usize = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(800);
    let model = synth_patch_model(7, 4, 3, 8, 4).unwrap();
    let spec = NetSpec::with_width_divisor(8, 4, 3, divisor);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut f = fresco_core::nn::build_translator(spec.s, &spec.translator_widths, &mut rng);
    let mut opt = Adam::new(0.5, 0.999);

    let batch = 24;
    for step in 0..iters {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..batch {
            let r = step % 3;
            let theta = rng.random::<f64>() * 360.0;
            let z = model.sampler.sample(r, theta, &mut rng);
            xs.push(model.g_h.apply(&z));
            ys.push(model.g_m.apply(&z));
        }
        let x = stack(&xs);
        let y = stack(&ys);
        let out = f.forward(x, true);
        let resid = &out - &y;
        let loss = resid.mapv(|v| v * v).sum() / batch as f64;
        f.zero_grad();
        let _ = f.backward(resid.mapv(|v| 2.0 * v / batch as f64));
        opt.step(&mut f, 1e-3);
        if step % 200 == 0 {
            println!("step {step}: mse {loss:.4}");
        }
    }
    // held-out MAE/corr
    let mut mae = 0.0;
    let mut n = 0.0;
    let mut corr_acc = Vec::new();
    for r in 0..3 {
        let mut est = Vec::new();
        let mut tgt = Vec::new();
        for _ in 0..50 {
            let theta = rng.random::<f64>() * 360.0;
            let z = model.sampler.sample(r, theta, &mut rng);
            let x = stack(&[model.g_h.apply(&z)]);
            let y = model.g_m.apply(&z);
            let o = f.forward(x, false);
            for i in 0..32 {
                for j in 0..32 {
                    let a = o[[0, 0, i, j]];
                    let b = y[[i, j]];
                    mae += (a - b).abs();
                    n += 1.0;
                    est.push(a);
                    tgt.push(b);
                }
            }
        }
        let me = est.iter().sum::<f64>() / est.len() as f64;
        let mt = tgt.iter().sum::<f64>() / tgt.len() as f64;
        let (mut se, mut st, mut cov) = (0.0, 0.0, 0.0);
        for (a, b) in est.iter().zip(tgt.iter()) {
            se += (a - me) * (a - me);
            st += (b - mt) * (b - mt);
            cov += (a - me) * (b - mt);
        }
        corr_acc.push(cov / (se.sqrt() * st.sqrt()));
    }
    println!("supervised div {divisor}: MAE {:.4} corr {:?}", mae / n, corr_acc);
}

fn stack(ps: &[Array2<f64>]) -> Array4<f64> {
    let n = ps.len();
    let (h, w) = ps[0].dim();
    let mut out = Array4::zeros((n, 1, h, w));
    for (i, p) in ps.iter().enumerate() {
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(p);
    }
    out
}
