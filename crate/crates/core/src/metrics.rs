//! PSNR, SSIM, and ERGAS quality metrics.

use ndarray::Array2;

use crate::tensor::SpectralCube;
use crate::{Error, Result};

/// PSNR cap returned for identical inputs (and an upper bound otherwise).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Fixed-order metric report for one reference/estimate pair.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub per_band_psnr: Vec<f64>,
}

/// `10 log10(peak^2 / MSE)` over all entries, capped at 100 dB.
pub fn psnr(reference: &SpectralCube, estimate: &SpectralCube, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::InvalidSpec("peak must be positive".into()));
    }
    let mse = reference.mse(estimate)?;
    Ok(psnr_from_mse(mse, peak))
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Per-band PSNR vector (same cap and peak convention as `psnr`).
pub fn per_band_psnr(reference: &SpectralCube, estimate: &SpectralCube, peak: f64) -> Result<Vec<f64>> {
    if reference.dim() != estimate.dim() {
        return Err(Error::Dimension(format!(
            "cube shapes differ: {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let (rows, cols, bands) = reference.dim();
    let n = (rows * cols) as f64;
    let mut out = Vec::with_capacity(bands);
    for k in 0..bands {
        let mut acc = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let d = reference.data()[[i, j, k]] - estimate.data()[[i, j, k]];
                acc += d * d;
            }
        }
        out.push(psnr_from_mse(acc / n, peak));
    }
    Ok(out)
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Array2::from_shape_fn((size, size), |(i, j)| {
        let di = i as f64 - c;
        let dj = j as f64 - c;
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

/// Mean local SSIM of one band pair: 11x11 Gaussian window (sigma 1.5)
/// over valid positions, `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`.
pub fn ssim_band(reference: &Array2<f64>, estimate: &Array2<f64>, peak: f64) -> Result<f64> {
    const WIN: usize = 11;
    if reference.dim() != estimate.dim() {
        return Err(Error::Dimension(format!(
            "band shapes differ: {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let (rows, cols) = reference.dim();
    if rows < WIN || cols < WIN {
        return Err(Error::Dimension(format!(
            "bands must be at least {WIN}x{WIN}, got {rows}x{cols}"
        )));
    }
    if peak <= 0.0 {
        return Err(Error::InvalidSpec("peak must be positive".into()));
    }
    let w = gaussian_window(WIN, 1.5);
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=(rows - WIN) {
        for j0 in 0..=(cols - WIN) {
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..WIN {
                for v in 0..WIN {
                    mx += w[[u, v]] * reference[[i0 + u, j0 + v]];
                    my += w[[u, v]] * estimate[[i0 + u, j0 + v]];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..WIN {
                for v in 0..WIN {
                    let dx = reference[[i0 + u, j0 + v]] - mx;
                    let dy = estimate[[i0 + u, j0 + v]] - my;
                    vx += w[[u, v]] * dx * dx;
                    vy += w[[u, v]] * dy * dy;
                    cov += w[[u, v]] * dx * dy;
                }
            }
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Cube-level SSIM: band average of `ssim_band` with a shared peak.
pub fn ssim(reference: &SpectralCube, estimate: &SpectralCube, peak: f64) -> Result<f64> {
    if reference.dim() != estimate.dim() {
        return Err(Error::Dimension(format!(
            "cube shapes differ: {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    let bands = reference.bands();
    let mut total = 0.0;
    for k in 0..bands {
        total += ssim_band(&reference.band(k), &estimate.band(k), peak)?;
    }
    Ok(total / bands as f64)
}

/// `100 / s * sqrt(mean_k (RMSE_k / mu_k)^2)` with `mu_k` the reference
/// band means. A zero-mean band makes the metric undefined.
pub fn ergas(reference: &SpectralCube, estimate: &SpectralCube, s: f64) -> Result<f64> {
    if reference.dim() != estimate.dim() {
        return Err(Error::Dimension(format!(
            "cube shapes differ: {:?} vs {:?}",
            reference.dim(),
            estimate.dim()
        )));
    }
    if s <= 0.0 {
        return Err(Error::InvalidSpec("resolution ratio must be positive".into()));
    }
    let (rows, cols, bands) = reference.dim();
    let n = (rows * cols) as f64;
    let mut acc = 0.0;
    for k in 0..bands {
        let mut mean = 0.0;
        let mut sq = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                mean += reference.data()[[i, j, k]];
                let d = reference.data()[[i, j, k]] - estimate.data()[[i, j, k]];
                sq += d * d;
            }
        }
        mean /= n;
        if mean == 0.0 {
            return Err(Error::Numeric(format!("band {k} of the reference has zero mean")));
        }
        let rmse = (sq / n).sqrt();
        acc += (rmse / mean) * (rmse / mean);
    }
    Ok(100.0 / s * (acc / bands as f64).sqrt())
}

/// Full report with the peak defaulting to the reference maximum.
pub fn report(reference: &SpectralCube, estimate: &SpectralCube, s: f64) -> Result<MetricReport> {
    let peak = reference.max_value();
    let peak = if peak > 0.0 { peak } else { 1.0 };
    Ok(MetricReport {
        psnr_db: psnr(reference, estimate, peak)?,
        ssim: ssim(reference, estimate, peak)?,
        ergas: ergas(reference, estimate, s)?,
        per_band_psnr: per_band_psnr(reference, estimate, peak)?,
    })
}
