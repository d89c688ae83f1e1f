use fresco_core::hsr::*;
use fresco_core::synth::synth_patch_model;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn heldout_eval(state: &mut TranslatorState, model: &fresco_core::synth::LatentPatchModel, n: usize)
    -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let mut mae = 0.0;
    let mut count = 0.0;
    let mut corrs = Vec::new();
    for r in 0..model.r {
        let mut est_all = Vec::new();
        let mut tgt_all = Vec::new();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let theta = rng.random::<f64>() * 360.0;
            let z = model.sampler.sample(r, theta, &mut rng);
            inputs.push(model.g_h.apply(&z));
            targets.push(model.g_m.apply(&z));
        }
        let outs = state.translate_patches(&inputs);
        for (o, t) in outs.iter().zip(targets.iter()) {
            for (a, b) in o.iter().zip(t.iter()) {
                mae += (a - b).abs();
                count += 1.0;
                est_all.push(*a);
                tgt_all.push(*b);
            }
        }
        let me = est_all.iter().sum::<f64>() / est_all.len() as f64;
        let mt = tgt_all.iter().sum::<f64>() / tgt_all.len() as f64;
        let mut se = 0.0; let mut st = 0.0; let mut cov = 0.0;
        for (a, b) in est_all.iter().zip(tgt_all.iter()) {
            se += (a - me) * (a - me); st += (b - mt) * (b - mt); cov += (a - me) * (b - mt);
        }
        corrs.push(cov / (se.sqrt() * st.sqrt()).max(1e-300));
        let _ = Array2::<f64>::zeros((1,1));
    }
    (mae / count, corrs)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let divisor: usize = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(64);
    let iters: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(1500);
    let seed: u64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(1);

    let model = synth_patch_model(7, 4, 3, 8, 4).unwrap();
    let hsi = LatentPatches { model: &model, side_kind: LatentSide::Hsi };
    let msi = LatentPatches { model: &model, side_kind: LatentSide::Msi };
    let spec = NetSpec::with_width_divisor(8, 4, 3, divisor);
    let mut config = HsrConfig::default();
    config.t_max = iters;
    config.seed = seed;
    if let Some(lr) = std::env::var("HSR_LR").ok().and_then(|v| v.parse::<f64>().ok()) {
        config.lr0 = lr;
    }
    if let Some(f) = std::env::var("HSR_DLR").ok().and_then(|v| v.parse::<f64>().ok()) {
        config.d_lr_factor = f;
    }
    if let Some(nz) = std::env::var("HSR_NOISE").ok().and_then(|v| v.parse::<f64>().ok()) {
        config.instance_noise = nz;
    }
    let mut spec = spec;
    if let Some(dw) = std::env::var("HSR_DW").ok().and_then(|v| v.parse::<usize>().ok()) {
        spec.discriminator_width = dw;
    }
    let t = Instant::now();
    let mut state = train_hsr_with_sources(&hsi, &msi, &config, &spec).unwrap();
    let train_time = t.elapsed().as_secs_f64();
    for k in (0..state.history.d_adv.len()).step_by(200.max(iters / 10)) {
        println!(
            "  step {k}: d_adv {:.3} f_adv {:.3} inv {:.4} scale {:.5}",
            state.history.d_adv[k], state.history.f_adv[k],
            state.history.inverse[k], state.history.scale[k]
        );
    }
    let (mae, corrs) = heldout_eval(&mut state, &model, 100);
    println!(
        "div {divisor} iters {iters} seed {seed}: MAE {mae:.4} corr {:?} {:.0}s aborted={:?}",
        corrs.iter().map(|c| (c * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        train_time,
        state.aborted,
    );
    // baseline for context: identity-ish trivial translator (bilinear upsample)
    let mut up = NearestUpsampler { s: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let mut mae_up = 0.0; let mut n_up = 0.0;
    for r in 0..model.r {
        let mut inputs = Vec::new(); let mut targets = Vec::new();
        for _ in 0..100 {
            let theta = rng.random::<f64>() * 360.0;
            let z = model.sampler.sample(r, theta, &mut rng);
            inputs.push(model.g_h.apply(&z));
            targets.push(model.g_m.apply(&z));
        }
        let outs = up.translate(&inputs);
        for (o, t) in outs.iter().zip(targets.iter()) {
            for (a, b) in o.iter().zip(t.iter()) { mae_up += (a - b).abs(); n_up += 1.0; }
        }
    }
    println!("nearest-upsample baseline MAE {:.4}", mae_up / n_up);
}
