use fresco_core::hsr::*;
use fresco_core::synth::synth_patch_model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stats(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn main() {
    let iters: usize = std::env::args().nth(1).map(|v| v.parse().unwrap()).unwrap_or(600);
    let model = synth_patch_model(7, 4, 3, 8, 4).unwrap();
    let hsi = LatentPatches { model: &model, side_kind: LatentSide::Hsi };
    let msi = LatentPatches { model: &model, side_kind: LatentSide::Msi };
    let mut spec = NetSpec::with_width_divisor(8, 4, 3, 32);
    if let Some(dw) = std::env::var("HSR_DW").ok().and_then(|v| v.parse::<usize>().ok()) {
        spec.discriminator_width = dw;
    }
    let mut config = HsrConfig::default();
    config.t_max = iters;
    config.seed = 1;
    if let Some(lr) = std::env::var("HSR_LR").ok().and_then(|v| v.parse::<f64>().ok()) {
        config.lr0 = lr;
    }
    if let Some(f) = std::env::var("HSR_DLR").ok().and_then(|v| v.parse::<f64>().ok()) {
        config.d_lr_factor = f;
    }
    let mut state = train_hsr_with_sources(&hsi, &msi, &config, &spec).unwrap();

    // Compare fake vs real patch statistics after training.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h_batch = hsi.sample(16, &mut rng).unwrap();
    let m_batch = msi.sample(16, &mut rng).unwrap();
    for r in 0..3 {
        let fakes = state.translate_patches(&h_batch[r]);
        let fake_vals: Vec<f64> = fakes.iter().flat_map(|p| p.iter().cloned()).collect();
        let real_vals: Vec<f64> = m_batch[r].iter().flat_map(|p| p.iter().cloned()).collect();
        let (fm, fs, fmin, fmax) = stats(&fake_vals);
        let (rm, rs, rmin, rmax) = stats(&real_vals);
        println!("material {r}: fake mean {fm:.3} std {fs:.3} range [{fmin:.3},{fmax:.3}] | real mean {rm:.3} std {rs:.3} range [{rmin:.3},{rmax:.3}]");
    }
}
