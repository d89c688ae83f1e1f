use fresco_core::msr::*;
use fresco_core::synth::{synth_ll1_scene, SceneDims};
use fresco_core::tensor::assemble_model;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene_seed: u64 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(0);
    let iters: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(4000);
    let lam_sto: f64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(1e-1);
    let dims = SceneDims { i_h: 24, j_h: 24, k_h: 20, i_m: 48, j_m: 48, k_m: 4 };
    let scene = synth_ll1_scene(scene_seed, dims, 2, 3, 3).unwrap();
    let y_h = assemble_model(&scene.hsi_model);
    let y_m = assemble_model(&scene.msi_model);

    for solver_seed in 0..8u64 {
        let mut config = MsrConfig::new(3, 2, 3);
        config.lambda_lr = 0.0;
        config.lambda_sto = lam_sto;
        config.lambda_tv = 0.0;
        config.max_iters = iters;
        config.seed = solver_seed;
        config.rel_tol = 1e-12;
        let t = std::time::Instant::now();
        let sol = solve_msr(&y_h, &y_m, &scene.degradation.p, &config).unwrap();
        let m = match_permutation(&sol, &scene.hsi_model, &scene.msi_model).unwrap();
        println!(
            "solver seed {solver_seed}: obj {:.3e} maxerr {:.3e} iters {} {:.1}s",
            sol.objective_trace.last().unwrap(), m.max_error(), sol.iters_used,
            t.elapsed().as_secs_f64()
        );
    }
}
