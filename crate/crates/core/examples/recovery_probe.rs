use fresco_core::msr::*;
use fresco_core::synth::{synth_ll1_scene, SceneDims};
use fresco_core::tensor::assemble_model;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lam_lr: f64 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(1e-4);
    let lam_sto: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(1e-2);
    let lam_tv: f64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(1e-4);
    let iters: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(1000);

    let dims = SceneDims { i_h: 24, j_h: 24, k_h: 20, i_m: 48, j_m: 48, k_m: 4 };
    let mut pass = 0;
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let scene = synth_ll1_scene(seed, dims, 2, 3, 3).unwrap();
        let y_h = assemble_model(&scene.hsi_model);
        let y_m = assemble_model(&scene.msi_model);
        let mut config = MsrConfig::new(3, 2, 3);
        config.lambda_lr = lam_lr;
        config.lambda_sto = lam_sto;
        config.lambda_tv = lam_tv;
        config.max_iters = iters;
        config.seed = seed ^ 0x5eed;
        let t = Instant::now();
        match solve_msr(&y_h, &y_m, &scene.degradation.p, &config) {
            Ok(sol) => {
                let m = match_permutation(&sol, &scene.hsi_model, &scene.msi_model).unwrap();
                let rec = reconstruct_msri(&sol).unwrap();
                let truth = fresco_core::tensor::assemble_lmm(&fresco_core::tensor::AbundanceSet::new(
                    scene.msi_model.factors().iter().map(|f| f.abundance()).collect(),
                    scene.hsi_model.factors().iter().map(|f| f.c.clone()).collect(),
                ).unwrap()).unwrap();
                let psnr = fresco_core::metrics::psnr(&truth, &rec, truth.max_value()).unwrap();
                let ok = m.max_error() <= 1e-2 && psnr >= 40.0;
                if ok { pass += 1; }
                println!(
                    "seed {seed}: iters {} conv {} maxerr {:.3e} psnr {:.1} obj {:.3e} [{}] {:.1}s",
                    sol.iters_used, sol.converged, m.max_error(), psnr,
                    sol.objective_trace.last().unwrap(), if ok {"PASS"} else {"fail"},
                    t.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("seed {seed}: ERROR {e}"),
        }
    }
    println!("passed {pass}/10 in {:.1}s (lr={lam_lr:.1e} sto={lam_sto:.1e} tv={lam_tv:.1e} iters={iters})", t0.elapsed().as_secs_f64());
}
