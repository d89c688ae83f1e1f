use fresco_core::msr::*;
use fresco_core::synth::{synth_ll1_scene, SceneDims};
use fresco_core::tensor::assemble_model;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let restarts: usize = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(10);
    let explore: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(3000);
    let refine: usize = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(16000);
    let hops: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(8);
    let dims = SceneDims { i_h: 24, j_h: 24, k_h: 20, i_m: 48, j_m: 48, k_m: 4 };
    for seed in [3u64, 4, 9] {
        let scene = synth_ll1_scene(seed, dims, 2, 3, 3).unwrap();
        let y_h = assemble_model(&scene.hsi_model);
        let y_m = assemble_model(&scene.msi_model);
        let mut config = MsrConfig::new(3, 2, 3);
        config.lambda_lr = 0.0;
        config.lambda_sto = 1e-1;
        config.lambda_tv = 0.0;
        config.max_iters = explore;
        config.rel_tol = 1e-9;
        config.obj_tol = Some(2e-6);
        config.restarts = restarts;
        config.refine_iters = refine;
        config.hops = hops;
        config.seed = seed * 1000;
        let t = Instant::now();
        let sol = solve_msr(&y_h, &y_m, &scene.degradation.p, &config).unwrap();
        let m = match_permutation(&sol, &scene.hsi_model, &scene.msi_model).unwrap();
        println!("scene {seed}: obj {:.2e} maxerr {:.2e} [{}] {:.1}s",
            sol.objective_trace.last().unwrap(), m.max_error(),
            if m.max_error() <= 1e-2 {"PASS"} else {"fail"}, t.elapsed().as_secs_f64());
    }
}
