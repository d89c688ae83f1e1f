// Full acceptance-style run: 10 scenes, restarts, timing.
use fresco_core::msr::*;
use fresco_core::synth::{synth_ll1_scene, SceneDims};
use fresco_core::tensor::assemble_model;
use std::time::Instant;

fn main() {
    let dims = SceneDims { i_h: 24, j_h: 24, k_h: 20, i_m: 48, j_m: 48, k_m: 4 };
    let t0 = Instant::now();
    let mut pass = 0;
    for seed in 0..10u64 {
        let scene = synth_ll1_scene(seed, dims, 2, 3, 3).unwrap();
        let y_h = assemble_model(&scene.hsi_model);
        let y_m = assemble_model(&scene.msi_model);
        let mut config = MsrConfig::new(3, 2, 3);
        config.lambda_lr = 0.0;
        config.lambda_sto = 1e-1;
        config.lambda_tv = 0.0;
        config.max_iters = 3000;
        config.rel_tol = 1e-9;
        config.obj_tol = Some(2e-6);
        config.restarts = 10;
        config.refine_iters = 16000;
        config.hops = 8;
        config.seed = seed * 1000;
        let t = Instant::now();
        let sol = solve_msr(&y_h, &y_m, &scene.degradation.p, &config).unwrap();
        let m = match_permutation(&sol, &scene.hsi_model, &scene.msi_model).unwrap();
        let rec = reconstruct_msri(&sol).unwrap();
        let truth = fresco_core::tensor::assemble_lmm(&fresco_core::tensor::AbundanceSet::new(
            scene.msi_model.factors().iter().map(|f| f.abundance()).collect(),
            scene.hsi_model.factors().iter().map(|f| f.c.clone()).collect(),
        ).unwrap()).unwrap();
        let psnr = fresco_core::metrics::psnr(&truth, &rec, truth.max_value()).unwrap();
        let ok = m.max_error() <= 1e-2 && psnr >= 40.0;
        if ok { pass += 1; }
        println!("scene {seed}: obj {:.2e} maxerr {:.2e} psnr {:.1} [{}] {:.1}s",
            sol.objective_trace.last().unwrap(), m.max_error(), psnr,
            if ok {"PASS"} else {"fail"}, t.elapsed().as_secs_f64());
    }
    println!("passed {pass}/10 in {:.1}s total", t0.elapsed().as_secs_f64());
}
