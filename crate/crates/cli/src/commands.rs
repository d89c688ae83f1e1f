//! Subcommand implementations.

use std::path::{Path, PathBuf};

use fresco_core::degrade::make_unregistered_pair;
use fresco_core::hsr;
use fresco_core::metrics;
use fresco_core::msr;
use fresco_core::pm;
use fresco_core::synth::synth_ll1_scene;
use fresco_core::tensor::{assemble_lmm, factors_to_abundances, AbundanceSet, SpectralCube};
use ndarray::Array2;

use crate::config::RunConfig;
use crate::io;
use crate::{checkpoint, CliError};

pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Context {
    fn ensure_out_dir(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn core_err(e: fresco_core::Error) -> CliError {
    match e {
        fresco_core::Error::Numeric(msg) => CliError::numeric(msg),
        other => CliError::usage(other.to_string()),
    }
}

/// Builds the observed pair plus ground truths and writes them to the
/// output directory. The source is either a cube file (`scene.source`) or
/// a synthetic coupled scene assembled into a source cube.
pub fn gen_data(ctx: &Context) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let source = match ctx.config.get("scene.source") {
        Some(path) => io::read_tensor(Path::new(path))?,
        None => {
            let dims = ctx.config.scene_dims()?;
            let seed = ctx.seed.unwrap_or(ctx.config.uint("synth.seed", 0) as u64);
            let scene = synth_ll1_scene(
                seed,
                dims,
                ctx.config.required_uint("synth.l_h")?,
                ctx.config.required_uint("synth.l_m")?,
                ctx.config.required_uint("synth.r")?,
            )
            .map_err(core_err)?;
            if !scene.conditions.all_satisfied() {
                eprintln!("warning: generated scene violates the uniqueness conditions");
            }
            // High-resolution source: the multispectral-region model
            // assembled with the shared hyperspectral endmembers.
            let maps: Vec<Array2<f64>> =
                scene.msi_model.factors().iter().map(|f| f.abundance()).collect();
            let ends: Vec<ndarray::Array1<f64>> =
                scene.hsi_model.factors().iter().map(|f| f.c.clone()).collect();
            assemble_lmm(&AbundanceSet::new(maps, ends).map_err(core_err)?).map_err(core_err)?
        }
    };
    let scene_spec = ctx.config.scene_spec(source.bands())?;
    let pair = make_unregistered_pair(&source, &scene_spec).map_err(core_err)?;
    io::write_tensor(&ctx.out("y_h.fcub"), &pair.y_h)?;
    io::write_tensor(&ctx.out("y_m.fcub"), &pair.y_m)?;
    io::write_tensor(&ctx.out("sri_m.fcub"), &pair.sri_m)?;
    io::write_tensor(&ctx.out("sri_h.fcub"), &pair.sri_h)?;
    io::write_matrix(&ctx.out("p.fcub"), &scene_spec.degradation.p)?;
    println!(
        "gen-data: wrote pair (hsi {}x{}x{}, msi {}x{}x{}) to {}",
        pair.y_h.rows(),
        pair.y_h.cols(),
        pair.y_h.bands(),
        pair.y_m.rows(),
        pair.y_m.cols(),
        pair.y_m.bands(),
        ctx.out_dir.display()
    );
    Ok(())
}

pub fn estimate_pm(ctx: &Context, hsi: &Path, msi: &Path, omega: &str) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let y_h = io::read_tensor(hsi)?;
    let y_m = io::read_tensor(msi)?;
    let pattern = io::read_omega(omega, y_m.bands(), y_h.bands())?;
    let config = ctx.config.pm_config(y_m.bands(), y_h.bands(), pattern)?;
    let estimate = pm::estimate_pm(&y_h, &y_m, &config).map_err(core_err)?;
    io::write_matrix(&ctx.out("p_est.fcub"), &estimate)?;
    println!("estimate-pm: wrote {}x{} response to {}", estimate.nrows(), estimate.ncols(), ctx.out("p_est.fcub").display());
    Ok(())
}

fn write_solution(ctx: &Context, solution: &msr::MsrSolution, p: &Array2<f64>) -> Result<(), CliError> {
    io::write_abundances(
        &ctx.out_dir,
        "hsi",
        solution.hsi.maps(),
        solution.hsi.endmembers(),
    )?;
    let msi_ends: Vec<ndarray::Array1<f64>> =
        solution.hsi.endmembers().iter().map(|c| p.dot(c)).collect();
    io::write_abundances(&ctx.out_dir, "msi", &solution.msi_abundances, &msi_ends)?;
    let msri = msr::reconstruct_msri(solution).map_err(core_err)?;
    io::write_tensor(&ctx.out("msri.fcub"), &msri)?;
    let trace: Vec<String> = solution.objective_trace.iter().map(|v| format!("{v:.17e}")).collect();
    std::fs::write(ctx.out("objective_trace.txt"), trace.join("\n") + "\n")
        .map_err(|e| CliError::usage(format!("cannot write trace: {e}")))?;
    Ok(())
}

pub fn unmix(ctx: &Context, hsi: &Path, msi: &Path, p_path: &Path) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let y_h = io::read_tensor(hsi)?;
    let y_m = io::read_tensor(msi)?;
    let p = io::read_matrix(p_path)?;
    let config = ctx.config.msr_config(ctx.seed)?;
    let solution = msr::solve_msr(&y_h, &y_m, &p, &config).map_err(core_err)?;
    write_solution(ctx, &solution, &p)?;
    println!(
        "unmix: {} iterations, converged {}, final objective {:.6e}",
        solution.iters_used,
        solution.converged,
        solution.objective_trace.last().unwrap()
    );
    Ok(())
}

pub fn tune(ctx: &Context, hsi: &Path, msi: &Path, p_path: &Path) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let y_h = io::read_tensor(hsi)?;
    let y_m = io::read_tensor(msi)?;
    let p = io::read_matrix(p_path)?;
    let base = ctx.config.msr_config(ctx.seed)?;
    let grid = ctx.config.lambda_grid()?;
    let (best, table) = msr::tune_lambdas(&y_h, &y_m, &p, &grid, &base).map_err(core_err)?;

    let mut lines = vec!["lambda_lr lambda_sto lambda_tv observed_psnr".to_string()];
    for cell in &table {
        lines.push(format!(
            "{:.6e} {:.6e} {:.6e} {:.6}",
            cell.lambda_lr, cell.lambda_sto, cell.lambda_tv, cell.observed_psnr
        ));
    }
    std::fs::write(ctx.out("tune_table.txt"), lines.join("\n") + "\n")
        .map_err(|e| CliError::usage(format!("cannot write table: {e}")))?;
    std::fs::write(
        ctx.out("tuned.cfg"),
        format!(
            "msr.lambda_lr = {:e}\nmsr.lambda_sto = {:e}\nmsr.lambda_tv = {:e}\n",
            best.lambda_lr, best.lambda_sto, best.lambda_tv
        ),
    )
    .map_err(|e| CliError::usage(format!("cannot write tuned config: {e}")))?;

    let solution = msr::solve_msr(&y_h, &y_m, &p, &best).map_err(core_err)?;
    write_solution(ctx, &solution, &p)?;
    println!(
        "tune: selected lambda_lr={:e} lambda_sto={:e} lambda_tv={:e}",
        best.lambda_lr, best.lambda_sto, best.lambda_tv
    );
    Ok(())
}

pub fn train_hsr(
    ctx: &Context,
    hsi_maps: &Path,
    hsi_ends: &Path,
    msi_maps: &Path,
    msi_ends: &Path,
) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let hsi_ab = io::read_abundances(hsi_maps, hsi_ends)?;
    let msi_ab = io::read_abundances(msi_maps, msi_ends)?;
    let config = ctx.config.hsr_config(ctx.seed)?;
    let ratio = msi_ab.rows() / hsi_ab.rows().max(1);
    let spec = ctx.config.net_spec(hsi_ab.material_count(), ratio.max(1))?;
    let mut state = hsr::train_hsr(&hsi_ab, &msi_ab, &config, &spec).map_err(core_err)?;
    if let Some(reason) = &state.aborted {
        return Err(CliError::numeric(format!("training aborted: {reason}")));
    }
    checkpoint::save(&ctx.out("translator.frts"), &mut state)?;
    println!(
        "train-hsr: {} iterations, final adversarial losses d={:.4} f={:.4}",
        state.iteration,
        state.history.d_adv.last().copied().unwrap_or(f64::NAN),
        state.history.f_adv.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn infer(ctx: &Context, ckpt: &Path, hsi_maps: &Path, hsi_ends: &Path) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    let mut state = checkpoint::load(ckpt)?;
    let hsi_ab = io::read_abundances(hsi_maps, hsi_ends)?;
    let sr = hsr::super_resolve_abundances(&mut state, &hsi_ab).map_err(core_err)?;
    io::write_abundances(&ctx.out_dir, "sr", sr.maps(), sr.endmembers())?;
    let hsri = hsr::reconstruct_hsri(&sr).map_err(core_err)?;
    io::write_tensor(&ctx.out("hsri.fcub"), &hsri)?;
    println!(
        "infer: super-resolved {} maps to {}x{}",
        sr.material_count(),
        sr.rows(),
        sr.cols()
    );
    Ok(())
}

/// Fixed-order textual metric report. Perceptual-network metrics are out
/// of scope and reported as unavailable rather than silently skipped.
pub fn format_report(report: &metrics::MetricReport) -> String {
    let per_band: Vec<String> = report.per_band_psnr.iter().map(|v| format!("{v:.4}")).collect();
    format!(
        "psnr={:.4}\nssim={:.6}\nergas={:.6}\nper_band_psnr={}\nfid=unavailable\nlpips=unavailable\n",
        report.psnr_db,
        report.ssim,
        report.ergas,
        per_band.join(",")
    )
}

pub fn eval(
    ctx: &Context,
    reference: &Path,
    estimate: &Path,
    report_path: Option<&Path>,
    ppm: Option<&Path>,
) -> Result<(), CliError> {
    let r = io::read_tensor(reference)?;
    let e = io::read_tensor(estimate)?;
    let s = ctx.config.float("eval.s", 4.0);
    let report = metrics::report(&r, &e, s).map_err(core_err)?;
    let text = format_report(&report);
    print!("{text}");
    if let Some(path) = report_path {
        std::fs::write(path, &text)
            .map_err(|err| CliError::usage(format!("cannot write report: {err}")))?;
    }
    if let Some(path) = ppm {
        let bands = match ctx.config.get("eval.preview_bands") {
            Some(text) => {
                let parts: Vec<usize> = text
                    .split(',')
                    .map(|t| t.trim().parse().map_err(|_| CliError::usage(format!("bad preview band `{t}`"))))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    return Err(CliError::usage("eval.preview_bands expects three bands".into()));
                }
                (parts[0], parts[1], parts[2])
            }
            None => {
                let k = e.bands();
                (0, k / 2, k - 1)
            }
        };
        io::write_ppm(path, &e, bands)?;
    }
    Ok(())
}

/// Runs the full sequence on one configuration: generate (or load) the
/// pair, estimate the response if asked, unmix, train the translator,
/// super-resolve, and evaluate both reconstructions against their ground
/// truths.
pub fn pipeline(ctx: &Context) -> Result<(), CliError> {
    ctx.ensure_out_dir()?;
    gen_data(ctx)?;
    let y_h = io::read_tensor(&ctx.out("y_h.fcub"))?;
    let y_m = io::read_tensor(&ctx.out("y_m.fcub"))?;

    // Spectral response: ground truth from generation or a fresh estimate.
    let p = if ctx.config.flag("pm.estimate", false) {
        let omega = ctx.config.get("pm.omega").unwrap_or("banding").to_string();
        estimate_pm(ctx, &ctx.out("y_h.fcub"), &ctx.out("y_m.fcub"), &omega)?;
        io::read_matrix(&ctx.out("p_est.fcub"))?
    } else {
        io::read_matrix(&ctx.out("p.fcub"))?
    };

    let msr_config = ctx.config.msr_config(ctx.seed)?;
    let solution = msr::solve_msr(&y_h, &y_m, &p, &msr_config).map_err(core_err)?;
    write_solution(ctx, &solution, &p)?;

    let hsi_ab = io::read_abundances(&ctx.out("hsi_abundances.fcub"), &ctx.out("hsi_endmembers.fcub"))?;
    let msi_ab = io::read_abundances(&ctx.out("msi_abundances.fcub"), &ctx.out("msi_endmembers.fcub"))?;
    let hsr_config = ctx.config.hsr_config(ctx.seed.map(|s| s ^ 0x517c_c1b7_2722_0a95))?;
    let ratio = msi_ab.rows() / hsi_ab.rows().max(1);
    let spec = ctx.config.net_spec(hsi_ab.material_count(), ratio.max(1))?;
    let mut state = hsr::train_hsr(&hsi_ab, &msi_ab, &hsr_config, &spec).map_err(core_err)?;
    if let Some(reason) = &state.aborted {
        return Err(CliError::numeric(format!("training aborted: {reason}")));
    }
    checkpoint::save(&ctx.out("translator.frts"), &mut state)?;

    let sr = hsr::super_resolve_abundances(&mut state, &hsi_ab).map_err(core_err)?;
    io::write_abundances(&ctx.out_dir, "sr", sr.maps(), sr.endmembers())?;
    let hsri = hsr::reconstruct_hsri(&sr).map_err(core_err)?;
    io::write_tensor(&ctx.out("hsri.fcub"), &hsri)?;

    // Metric report against the generated ground truths.
    let sri_m = io::read_tensor(&ctx.out("sri_m.fcub"))?;
    let msri = io::read_tensor(&ctx.out("msri.fcub"))?;
    let s_ratio = ctx.config.float("eval.s", ctx.config.uint("scene.s", 4) as f64);
    let msr_report = metrics::report(&sri_m, &msri, s_ratio).map_err(core_err)?;
    let sri_h = io::read_tensor(&ctx.out("sri_h.fcub"))?;
    let report_h = match crop_like(&hsri, &sri_h) {
        Some(cropped) => metrics::report(&sri_h, &cropped, s_ratio).map_err(core_err)?,
        None => metrics::report(&sri_h, &hsri, s_ratio).map_err(core_err)?,
    };
    let text = format!(
        "[msr]\n{}[hsr]\n{}",
        format_report(&msr_report),
        format_report(&report_h)
    );
    print!("{text}");
    std::fs::write(ctx.out("report.txt"), &text)
        .map_err(|e| CliError::usage(format!("cannot write report: {e}")))?;
    Ok(())
}

/// Center-crops `cube` to the shape of `like` when it is larger (the
/// stitched output can exceed the ground-truth extent by a border).
fn crop_like(cube: &SpectralCube, like: &SpectralCube) -> Option<SpectralCube> {
    let (r, c, b) = cube.dim();
    let (lr, lc, lb) = like.dim();
    if b != lb || r < lr || c < lc || (r == lr && c == lc) {
        return None;
    }
    let r0 = (r - lr) / 2;
    let c0 = (c - lc) / 2;
    let data = cube
        .data()
        .slice(ndarray::s![r0..r0 + lr, c0..c0 + lc, ..])
        .to_owned();
    SpectralCube::from_array(data).ok()
}

/// The trivial spatial baseline the optional semi-real check compares
/// against: bicubic upsampling of the observed hyperspectral cube.
pub fn bicubic_upsample(cube: &SpectralCube, s: usize) -> SpectralCube {
    let (rows, cols, bands) = cube.dim();
    let (or, oc) = (rows * s, cols * s);
    let mut out = ndarray::Array3::zeros((or, oc, bands));
    let kernel = |t: f64| -> f64 {
        // Catmull-Rom spline.
        let a = -0.5;
        let t = t.abs();
        if t <= 1.0 {
            (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
        } else if t < 2.0 {
            a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
        } else {
            0.0
        }
    };
    for i in 0..or {
        let src_r = (i as f64 + 0.5) / s as f64 - 0.5;
        let base_r = src_r.floor() as i64;
        for j in 0..oc {
            let src_c = (j as f64 + 0.5) / s as f64 - 0.5;
            let base_c = src_c.floor() as i64;
            for k in 0..bands {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for di in -1..3i64 {
                    let ri = (base_r + di).clamp(0, rows as i64 - 1) as usize;
                    let wr = kernel(src_r - (base_r + di) as f64);
                    for dj in -1..3i64 {
                        let cj = (base_c + dj).clamp(0, cols as i64 - 1) as usize;
                        let w = wr * kernel(src_c - (base_c + dj) as f64);
                        acc += w * cube.data()[[ri, cj, k]];
                        wsum += w;
                    }
                }
                out[[i, j, k]] = acc / wsum;
            }
        }
    }
    SpectralCube::from_array(out).expect("finite interpolation of finite data")
}

/// Ground-truth reference data for recovery experiments (used by tests).
pub fn truth_msri(scene: &fresco_core::synth::SynthScene) -> Result<SpectralCube, CliError> {
    let maps: Vec<Array2<f64>> = scene.msi_model.factors().iter().map(|f| f.abundance()).collect();
    let ends: Vec<ndarray::Array1<f64>> = scene.hsi_model.factors().iter().map(|f| f.c.clone()).collect();
    assemble_lmm(&AbundanceSet::new(maps, ends).map_err(core_err)?).map_err(core_err)
}

/// Convenience for tests: the expanded truth abundances of a scene.
pub fn truth_abundances(model: &fresco_core::tensor::Ll1Model) -> AbundanceSet {
    factors_to_abundances(model)
}
