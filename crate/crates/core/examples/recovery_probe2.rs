use fresco_core::msr::*;
use fresco_core::synth::{synth_ll1_scene, SceneDims};
use fresco_core::tensor::assemble_model;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(0);
    let lam_sto: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(1e-1);
    let dims = SceneDims { i_h: 24, j_h: 24, k_h: 20, i_m: 48, j_m: 48, k_m: 4 };
    let scene = synth_ll1_scene(seed, dims, 2, 3, 3).unwrap();
    let y_h = assemble_model(&scene.hsi_model);
    let y_m = assemble_model(&scene.msi_model);

    // material map statistics
    for (r, f) in scene.hsi_model.factors().iter().enumerate() {
        let s = f.abundance();
        let mean = s.mean().unwrap();
        let std = (s.mapv(|v| (v - mean) * (v - mean)).mean().unwrap()).sqrt();
        println!("hsi material {r}: mean {mean:.3} std {std:.3}");
    }

    for iters in [1000usize, 2000, 4000, 8000, 16000] {
        let mut config = MsrConfig::new(3, 2, 3);
        config.lambda_lr = 0.0;
        config.lambda_sto = lam_sto;
        config.lambda_tv = 0.0;
        config.max_iters = iters;
        config.seed = seed ^ 0x5eed;
        let sol = solve_msr(&y_h, &y_m, &scene.degradation.p, &config).unwrap();
        let m = match_permutation(&sol, &scene.hsi_model, &scene.msi_model).unwrap();
        println!(
            "iters {iters}: conv {} obj {:.3e} maxerr {:.3e} (c {:.1e} sh {:.1e} sm {:.1e})",
            sol.converged,
            sol.objective_trace.last().unwrap(),
            m.max_error(),
            m.endmember_err.iter().cloned().fold(0.0, f64::max),
            m.hsi_abundance_err.iter().cloned().fold(0.0, f64::max),
            m.msi_abundance_err.iter().cloned().fold(0.0, f64::max),
        );
    }
}
