//! Forward degradation operators: spectral response mixing and spatial
//! blurring/downsampling, plus the unregistered scene extraction used to
//! turn one source cube into an HSI/MSI test pair.

use ndarray::{Array2, Array3};

use crate::patch::rotate_crop;
use crate::tensor::{mode3_apply, SpectralCube};
use crate::{Error, Result};

/// Spatial downsampling family applied band by band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialKind {
    /// Convolve with a normalized Gaussian kernel (reflect padding), then
    /// subsample every `s`-th pixel starting at the origin.
    Gaussian { kernel_size: usize, sigma: f64 },
    /// Keep the top-left pixel of each `s x s` block.
    Nearest,
    /// Average each `s x s` block.
    Uniform,
}

impl SpatialKind {
    /// The 5x5, sigma 1.7 Gaussian used as the default blur.
    pub fn default_gaussian() -> Self {
        SpatialKind::Gaussian {
            kernel_size: 5,
            sigma: 1.7,
        }
    }
}

/// Spectral response matrix plus a spatial downsampling description.
#[derive(Debug, Clone)]
pub struct DegradationSpec {
    pub p: Array2<f64>,
    pub spatial_kind: SpatialKind,
    pub s: usize,
}

impl DegradationSpec {
    /// Validates nonnegativity of `P`, at least one positive entry per row,
    /// fewer output than input bands, and a positive factor.
    pub fn new(p: Array2<f64>, spatial_kind: SpatialKind, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidSpec("downsampling factor must be positive".into()));
        }
        if p.nrows() >= p.ncols() {
            return Err(Error::InvalidSpec(format!(
                "spectral response must reduce bands, got {} -> {}",
                p.ncols(),
                p.nrows()
            )));
        }
        if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidSpec("spectral response entries must be finite and >= 0".into()));
        }
        for (m, row) in p.rows().into_iter().enumerate() {
            if !row.iter().any(|&v| v > 0.0) {
                return Err(Error::InvalidSpec(format!("row {m} of the spectral response is all zero")));
            }
        }
        Ok(Self { p, spatial_kind, s })
    }
}

/// Uniform banded spectral response: row `m` averages the `m`-th contiguous
/// group of `floor(K_H / K_M)` bands, the remainder going to the last
/// group. Rows sum to one and supports are disjoint, covering all bands.
pub fn build_pm(k_h: usize, k_m: usize) -> Result<Array2<f64>> {
    if k_m >= k_h || k_m == 0 {
        return Err(Error::InvalidSpec(format!(
            "banded response needs K_M < K_H, got K_H={k_h}, K_M={k_m}"
        )));
    }
    let group = k_h / k_m;
    let mut p = Array2::zeros((k_m, k_h));
    for m in 0..k_m {
        let start = m * group;
        let end = if m + 1 == k_m { k_h } else { start + group };
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            p[[m, j]] = w;
        }
    }
    Ok(p)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k = Array2::from_shape_fn((size, size), |(i, j)| {
        let di = i as f64 - c;
        let dj = j as f64 - c;
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

/// Reflect (symmetric, edge-inclusive) index into `[0, n)`.
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn convolve_band(band: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = band.dim();
    let ks = kernel.nrows() as i64;
    let half = ks / 2;
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows as i64 {
        for j in 0..cols as i64 {
            let mut acc = 0.0;
            for u in 0..ks {
                let si = reflect(i + u - half, rows as i64);
                for v in 0..ks {
                    let sj = reflect(j + v - half, cols as i64);
                    acc += kernel[[u as usize, v as usize]] * band[[si, sj]];
                }
            }
            out[[i as usize, j as usize]] = acc;
        }
    }
    out
}

/// Degrades every band spatially by the configured kind and factor.
/// Requires spatial dimensions divisible by `s`.
pub fn spatial_degrade(cube: &SpectralCube, spec: &DegradationSpec) -> Result<SpectralCube> {
    let (rows, cols, bands) = cube.dim();
    let s = spec.s;
    if rows % s != 0 || cols % s != 0 {
        return Err(Error::Dimension(format!(
            "spatial dims {rows}x{cols} not divisible by factor {s}"
        )));
    }
    let (out_r, out_c) = (rows / s, cols / s);
    let mut out = Array3::zeros((out_r, out_c, bands));

    match spec.spatial_kind {
        SpatialKind::Gaussian { kernel_size, sigma } => {
            let kernel = gaussian_kernel(kernel_size, sigma);
            for k in 0..bands {
                let blurred = convolve_band(&cube.band(k), &kernel);
                for i in 0..out_r {
                    for j in 0..out_c {
                        out[[i, j, k]] = blurred[[i * s, j * s]];
                    }
                }
            }
        }
        SpatialKind::Nearest => {
            for k in 0..bands {
                for i in 0..out_r {
                    for j in 0..out_c {
                        out[[i, j, k]] = cube.data()[[i * s, j * s, k]];
                    }
                }
            }
        }
        SpatialKind::Uniform => {
            let inv = 1.0 / (s * s) as f64;
            for k in 0..bands {
                for i in 0..out_r {
                    for j in 0..out_c {
                        let mut acc = 0.0;
                        for di in 0..s {
                            for dj in 0..s {
                                acc += cube.data()[[i * s + di, j * s + dj, k]];
                            }
                        }
                        out[[i, j, k]] = acc * inv;
                    }
                }
            }
        }
    }
    SpectralCube::from_array(out)
}

/// Rectangular crop windows plus the unregistration parameters of a scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// `(row_start, col_start, rows, cols)` of the MSI-region window.
    pub msi_window: (usize, usize, usize, usize),
    /// `(row_start, col_start, rows, cols)` of the HSI-region window
    /// before shift.
    pub hsi_window: (usize, usize, usize, usize),
    /// Shift of the HSI window, in pixels, applied to both axes.
    pub hsi_shift_t: i64,
    /// Clockwise rotation of the HSI region, degrees.
    pub hsi_rotation_deg: f64,
    pub degradation: DegradationSpec,
}

/// An unregistered test pair: observed images plus their ground-truth SRIs.
#[derive(Debug, Clone)]
pub struct UnregisteredPair {
    pub y_m: SpectralCube,
    pub y_h: SpectralCube,
    pub sri_m: SpectralCube,
    pub sri_h: SpectralCube,
}

fn crop(cube: &SpectralCube, window: (usize, usize, usize, usize)) -> Result<SpectralCube> {
    let (r0, c0, nr, nc) = window;
    let (rows, cols, _) = cube.dim();
    if r0 + nr > rows || c0 + nc > cols || nr == 0 || nc == 0 {
        return Err(Error::Dimension(format!(
            "window ({r0},{c0},{nr},{nc}) leaves the {rows}x{cols} source"
        )));
    }
    let data = cube
        .data()
        .slice(ndarray::s![r0..r0 + nr, c0..c0 + nc, ..])
        .to_owned();
    SpectralCube::from_array(data)
}

/// Crops a window whose content has been rotated clockwise by `theta` about
/// the window center, re-extracting the original region post-rotation.
/// Bilinear interpolation; the circumcircle of the window must stay inside
/// the source.
fn rotated_crop_cube(
    cube: &SpectralCube,
    window: (usize, usize, usize, usize),
    theta_deg: f64,
) -> Result<SpectralCube> {
    let (r0, c0, nr, nc) = window;
    let center = (
        r0 as f64 + (nr as f64 - 1.0) / 2.0,
        c0 as f64 + (nc as f64 - 1.0) / 2.0,
    );
    let bands = cube.bands();
    let mut out = Array3::zeros((nr, nc, bands));
    for k in 0..bands {
        let band = cube.band(k);
        let rotated = rotate_crop(&band, center, theta_deg, nr, nc)?;
        out.index_axis_mut(ndarray::Axis(2), k).assign(&rotated);
    }
    SpectralCube::from_array(out)
}

/// Builds an unregistered HSI/MSI pair from one source cube: the MSI-region
/// SRI is a plain crop, the HSI-region SRI is a shifted and rotated crop,
/// and the observed images are their spectral/spatial degradations.
pub fn make_unregistered_pair(source: &SpectralCube, scene: &SceneSpec) -> Result<UnregisteredPair> {
    let sri_m = crop(source, scene.msi_window)?;

    let (r0, c0, nr, nc) = scene.hsi_window;
    let t = scene.hsi_shift_t;
    let shifted_r = r0 as i64 + t;
    let shifted_c = c0 as i64 + t;
    if shifted_r < 0 || shifted_c < 0 {
        return Err(Error::Dimension(format!(
            "shift {t} moves the HSI window out of the source"
        )));
    }
    let hsi_window = (shifted_r as usize, shifted_c as usize, nr, nc);

    let sri_h = if scene.hsi_rotation_deg == 0.0 {
        crop(source, hsi_window)?
    } else if scene.hsi_rotation_deg % 90.0 == 0.0 {
        // Lattice-preserving rotations are exact index permutations.
        let plain = crop(source, hsi_window)?;
        rotate_cube_indices(&plain, scene.hsi_rotation_deg)?
    } else {
        rotated_crop_cube(source, hsi_window, scene.hsi_rotation_deg)?
    };

    let y_m = mode3_apply(&sri_m, &scene.degradation.p)?;
    let y_h = spatial_degrade(&sri_h, &scene.degradation)?;
    Ok(UnregisteredPair { y_m, y_h, sri_m, sri_h })
}

/// Exact index rotation for multiples of 90 degrees (square windows only;
/// rectangular windows fall back to interpolation elsewhere).
fn rotate_cube_indices(cube: &SpectralCube, theta_deg: f64) -> Result<SpectralCube> {
    let (rows, cols, bands) = cube.dim();
    let quarter = (((theta_deg / 90.0).round() as i64) % 4 + 4) % 4;
    if quarter != 0 && quarter != 2 && rows != cols {
        return Err(Error::Dimension(
            "quarter rotations of non-square windows change the window shape".into(),
        ));
    }
    let mut out = Array3::zeros((rows, cols, bands));
    for i in 0..rows {
        for j in 0..cols {
            // Clockwise content rotation by `quarter` steps.
            let (si, sj) = match quarter {
                0 => (i, j),
                1 => (cols - 1 - j, i),
                2 => (rows - 1 - i, cols - 1 - j),
                _ => (j, rows - 1 - i),
            };
            for k in 0..bands {
                out[[i, j, k]] = cube.data()[[si, sj, k]];
            }
        }
    }
    SpectralCube::from_array(out)
}
