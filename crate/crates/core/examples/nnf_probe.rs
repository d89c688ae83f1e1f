// Can ||S - A B^T||^2 with A,B >= 0 reach zero on the generated maps?
use fresco_core::synth::{synth_ll1_scene, SceneDims};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nnf_residual(s: &Array2<f64>, l: usize, seed: u64, iters: usize) -> f64 {
    let (m, n) = s.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Array2::from_shape_fn((m, l), |_| rng.random::<f64>());
    let mut b = Array2::from_shape_fn((n, l), |_| rng.random::<f64>());
    let norm_s: f64 = s.iter().map(|v| v * v).sum();
    for _ in 0..iters {
        // Projected gradient with exact Lipschitz steps per block.
        let bt_b = b.t().dot(&b);
        let lips_a = bt_b.diag().sum().max(1e-12) * 2.0;
        let grad_a = (a.dot(&bt_b) - s.dot(&b)).mapv(|v| 2.0 * v);
        a = (&a - &grad_a.mapv(|v| v / lips_a)).mapv(|v| v.max(0.0));
        let at_a = a.t().dot(&a);
        let lips_b = at_a.diag().sum().max(1e-12) * 2.0;
        let grad_b = (b.dot(&at_a) - s.t().dot(&a)).mapv(|v| 2.0 * v);
        b = (&b - &grad_b.mapv(|v| v / lips_b)).mapv(|v| v.max(0.0));
    }
    let res: f64 = (&a.dot(&b.t()) - s).iter().map(|v| v * v).sum();
    (res / norm_s).sqrt()
}

fn main() {
    let dims = SceneDims { i_h: 24, j_h: 24, k_h: 20, i_m: 48, j_m: 48, k_m: 4 };
    for scene_seed in 0..3u64 {
        let scene = synth_ll1_scene(scene_seed, dims, 2, 3, 3).unwrap();
        for (r, f) in scene.hsi_model.factors().iter().enumerate() {
            let s = f.abundance();
            let best = (0..4).map(|k| nnf_residual(&s, 2, k, 4000)).fold(f64::INFINITY, f64::min);
            println!("scene {scene_seed} hsi material {r} (L=2): best rel residual {best:.3e}");
        }
        for (r, f) in scene.msi_model.factors().iter().enumerate() {
            let s = f.abundance();
            let best = (0..4).map(|k| nnf_residual(&s, 3, k, 4000)).fold(f64::INFINITY, f64::min);
            println!("scene {scene_seed} msi material {r} (L=3): best rel residual {best:.3e}");
        }
    }
}
