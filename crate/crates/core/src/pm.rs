//! Spectral-response estimation from unregistered data by per-band moment
//! matching: the response rows are fit so that the transformed
//! hyperspectral band statistics match the observed multispectral ones.
//! Only means and variances enter, so the estimate is invariant to any
//! pixel ordering.

use ndarray::{Array1, Array2};

use crate::tensor::SpectralCube;
use crate::{Error, Result};

/// Estimator configuration. `omega` lists the forced-zero entries of the
/// response matrix.
#[derive(Debug, Clone)]
pub struct PmEstimatorConfig {
    pub k_m: usize,
    pub k_h: usize,
    /// `(row, col)` entries of the response pinned to zero.
    pub omega: Vec<(usize, usize)>,
    pub max_iters: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub seed: u64,
}

impl PmEstimatorConfig {
    pub fn new(k_m: usize, k_h: usize, omega: Vec<(usize, usize)>) -> Self {
        Self {
            k_m,
            k_h,
            omega,
            max_iters: 20_000,
            step: 1.0,
            rel_tol: 1e-14,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_m == 0 || self.k_h == 0 {
            return Err(Error::InvalidSpec("band counts must be positive".into()));
        }
        for &(i, j) in &self.omega {
            if i >= self.k_m || j >= self.k_h {
                return Err(Error::InvalidSpec(format!(
                    "zero-pattern entry ({i},{j}) outside the {}x{} response",
                    self.k_m, self.k_h
                )));
            }
        }
        Ok(())
    }

    /// Support mask: true where the entry is free.
    fn support(&self) -> Array2<bool> {
        let mut mask = Array2::from_elem((self.k_m, self.k_h), true);
        for &(i, j) in &self.omega {
            mask[[i, j]] = false;
        }
        mask
    }
}

/// Per-band mean and population variance over all pixels.
pub fn band_stats(cube: &SpectralCube) -> (Array1<f64>, Array1<f64>) {
    let (rows, cols, bands) = cube.dim();
    let n = (rows * cols) as f64;
    let mut means = Array1::zeros(bands);
    let mut vars = Array1::zeros(bands);
    for i in 0..rows {
        for j in 0..cols {
            let px = cube.pixel(i, j);
            for (k, &v) in px.iter().enumerate() {
                means[k] += v;
            }
        }
    }
    means.mapv_inplace(|v| v / n);
    for i in 0..rows {
        for j in 0..cols {
            let px = cube.pixel(i, j);
            for (k, &v) in px.iter().enumerate() {
                let d = v - means[k];
                vars[k] += d * d;
            }
        }
    }
    vars.mapv_inplace(|v| v / n);
    (means, vars)
}

/// Pixel-population mean vector and covariance of the hyperspectral bands;
/// the moments of `P x` are then `P m` and `diag(P C P^T)`.
fn band_moments(cube: &SpectralCube) -> (Array1<f64>, Array2<f64>) {
    let (rows, cols, bands) = cube.dim();
    let n = (rows * cols) as f64;
    let mut mean = Array1::<f64>::zeros(bands);
    for i in 0..rows {
        for j in 0..cols {
            mean += &cube.pixel(i, j);
        }
    }
    mean.mapv_inplace(|v| v / n);
    let mut cov = Array2::<f64>::zeros((bands, bands));
    for i in 0..rows {
        for j in 0..cols {
            let d = &cube.pixel(i, j) - &mean;
            for a in 0..bands {
                for b in 0..bands {
                    cov[[a, b]] += d[a] * d[b];
                }
            }
        }
    }
    cov.mapv_inplace(|v| v / n);
    (mean, cov)
}

/// Moment-matching objective for one response matrix.
fn objective(
    p: &Array2<f64>,
    mean_h: &Array1<f64>,
    cov_h: &Array2<f64>,
    mean_m: &Array1<f64>,
    var_m: &Array1<f64>,
) -> f64 {
    let mut total = 0.0;
    for k in 0..p.nrows() {
        let row = p.row(k);
        let mu = row.dot(mean_h);
        let var = row.dot(&cov_h.dot(&row.to_owned()));
        let dm = mu - mean_m[k];
        let dv = var - var_m[k];
        total += dm * dm + dv * dv;
    }
    total
}

fn gradient(
    p: &Array2<f64>,
    mean_h: &Array1<f64>,
    cov_h: &Array2<f64>,
    mean_m: &Array1<f64>,
    var_m: &Array1<f64>,
) -> Array2<f64> {
    let mut grad = Array2::<f64>::zeros(p.dim());
    for k in 0..p.nrows() {
        let row = p.row(k).to_owned();
        let cp = cov_h.dot(&row);
        let mu = row.dot(mean_h);
        let var = row.dot(&cp);
        let dm = mu - mean_m[k];
        let dv = var - var_m[k];
        let mut g = grad.row_mut(k);
        g.scaled_add(2.0 * dm, mean_h);
        g.scaled_add(4.0 * dv, &cp);
    }
    grad
}

/// Uniform-averaging initialization over the free support, rows normalized
/// to sum one.
pub fn init_pm(config: &PmEstimatorConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let mask = config.support();
    let mut p = Array2::<f64>::zeros((config.k_m, config.k_h));
    for i in 0..config.k_m {
        let free = mask.row(i).iter().filter(|&&b| b).count();
        if free == 0 {
            return Err(Error::InvalidSpec(format!(
                "row {i} of the response has an empty support"
            )));
        }
        let w = 1.0 / free as f64;
        for j in 0..config.k_h {
            if mask[[i, j]] {
                p[[i, j]] = w;
            }
        }
    }
    Ok(p)
}

/// Estimates the spectral response from an unregistered pair by projected
/// gradient descent on the moment-matching objective. The projection
/// clamps at zero and re-zeroes the forced pattern; backtracking keeps the
/// objective non-increasing. Deterministic.
pub fn estimate_pm(
    y_h: &SpectralCube,
    y_m: &SpectralCube,
    config: &PmEstimatorConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    if y_h.bands() != config.k_h || y_m.bands() != config.k_m {
        return Err(Error::Dimension(format!(
            "config is {}x{} but data have {} / {} bands",
            config.k_m,
            config.k_h,
            y_m.bands(),
            y_h.bands()
        )));
    }
    let (mean_h, cov_h) = band_moments(y_h);
    let (mean_m, var_m) = band_stats(y_m);
    let mask = config.support();

    let mut p = init_pm(config)?;
    let mut value = objective(&p, &mean_h, &cov_h, &mean_m, &var_m);
    let mut step = config.step;
    for _iter in 0..config.max_iters {
        let mut grad = gradient(&p, &mean_h, &cov_h, &mean_m, &var_m);
        // Zero-pattern entries carry no descent information.
        for i in 0..config.k_m {
            for j in 0..config.k_h {
                if !mask[[i, j]] {
                    grad[[i, j]] = 0.0;
                }
            }
        }
        let gnorm2: f64 = grad.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() <= 1e-14 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = &p - &grad.mapv(|g| step * g);
            cand.mapv_inplace(|v| v.max(0.0));
            for i in 0..config.k_m {
                for j in 0..config.k_h {
                    if !mask[[i, j]] {
                        cand[[i, j]] = 0.0;
                    }
                }
            }
            let cand_value = objective(&cand, &mean_h, &cov_h, &mean_m, &var_m);
            let move2: f64 = (&cand - &p).iter().map(|v| v * v).sum();
            if move2 == 0.0 {
                break;
            }
            if cand_value <= value - 1e-4 / step * move2 {
                let rel = (value - cand_value) / value.abs().max(1e-300);
                p = cand;
                value = cand_value;
                step = (step * 2.0).min(1e9);
                accepted = true;
                if rel < config.rel_tol {
                    return Ok(p);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(p)
}
