use fresco_core::hsr::*;
use fresco_core::synth::synth_patch_model;
use std::time::Instant;

fn main() {
    let model = synth_patch_model(1, 4, 3, 8, 4).unwrap();
    let hsi = LatentPatches { model: &model, side_kind: LatentSide::Hsi };
    let msi = LatentPatches { model: &model, side_kind: LatentSide::Msi };
    for divisor in [8usize, 16, 32, 64] {
        let spec = NetSpec::with_width_divisor(8, 4, 3, divisor);
        let mut config = HsrConfig::default();
        config.t_max = 30;
        config.seed = 1;
        let t = Instant::now();
        let state = train_hsr_with_sources(&hsi, &msi, &config, &spec).unwrap();
        let per_step = t.elapsed().as_secs_f64() / 30.0;
        println!(
            "divisor {divisor}: widths {:?} -> {:.1}ms/step, 4000 iters ~ {:.1}s, aborted={:?}",
            spec.translator_widths,
            per_step * 1e3,
            per_step * 4000.0,
            state.aborted
        );
    }
}
