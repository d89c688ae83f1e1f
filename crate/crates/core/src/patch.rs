//! Rotated square-patch sampling and the sliding-window stitch used at
//! inference time.
//!
//! Patch orientation convention: a patch rotated clockwise by `theta`
//! degrees samples the source at
//! `src = center + [cos t, sin t; -sin t, cos t] * (du, dv)` where
//! `(du, dv)` are row/col offsets from the patch center. Under this
//! convention `extract_rotated_patch(map, c, theta + 90, b)` equals the
//! counter-clockwise index rotation of `extract_rotated_patch(map, c,
//! theta, b)`, and multiples of 90 degrees are exact index permutations
//! whenever the grid parity matches.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::tensor::AbundanceSet;
use crate::{Error, Result};

/// Which image a patch was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageId {
    Hsi,
    Msi,
}

/// A sampled square patch with its sampling metadata.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub image_id: ImageId,
    pub material: usize,
    /// Pixel coordinates `(row, col)` of the patch center.
    pub center: (f64, f64),
    /// Clockwise rotation in `[0, 360)`.
    pub theta_deg: f64,
    pub side: usize,
    pub values: Array2<f64>,
}

/// Bilinear interpolation at real coordinates; caller guarantees
/// `0 <= r <= rows-1` and `0 <= c <= cols-1`.
pub(crate) fn bilinear(map: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (rows, cols) = map.dim();
    let r0 = (r.floor() as usize).min(rows - 1);
    let c0 = (c.floor() as usize).min(cols - 1);
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    map[[r0, c0]] * (1.0 - fr) * (1.0 - fc)
        + map[[r1, c0]] * fr * (1.0 - fc)
        + map[[r0, c1]] * (1.0 - fr) * fc
        + map[[r1, c1]] * fr * fc
}

/// Samples a rotated `out_rows x out_cols` grid centered at
/// `(center_r, center_c)`, clockwise by `theta_deg`, bilinear.
/// The whole rotated grid must fall inside the source.
pub fn rotate_crop(
    map: &Array2<f64>,
    center: (f64, f64),
    theta_deg: f64,
    out_rows: usize,
    out_cols: usize,
) -> Result<Array2<f64>> {
    let (rows, cols) = map.dim();
    let theta = theta_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let hr = (out_rows as f64 - 1.0) / 2.0;
    let hc = (out_cols as f64 - 1.0) / 2.0;

    // Circumcircle bound: every sample lies within this radius.
    let radius = (hr * hr + hc * hc).sqrt();
    let (cr, cc) = center;
    if cr - radius < -1e-9
        || cc - radius < -1e-9
        || cr + radius > rows as f64 - 1.0 + 1e-9
        || cc + radius > cols as f64 - 1.0 + 1e-9
    {
        return Err(Error::Sampling(format!(
            "rotated window (center ({cr:.2},{cc:.2}), radius {radius:.2}) leaves the {rows}x{cols} source"
        )));
    }

    let mut out = Array2::zeros((out_rows, out_cols));
    for u in 0..out_rows {
        let du = u as f64 - hr;
        for v in 0..out_cols {
            let dv = v as f64 - hc;
            let sr = cr + cos_t * du + sin_t * dv;
            let sc = cc - sin_t * du + cos_t * dv;
            out[[u, v]] = bilinear(map, sr.clamp(0.0, rows as f64 - 1.0), sc.clamp(0.0, cols as f64 - 1.0));
        }
    }
    Ok(out)
}

/// Extracts a `side x side` patch rotated clockwise by `theta_deg` about
/// `center`. Fails if the circumcircle of radius `side * sqrt(2) / 2`
/// around the center leaves the image (caller resamples).
pub fn extract_rotated_patch(
    map: &Array2<f64>,
    center: (f64, f64),
    theta_deg: f64,
    side: usize,
) -> Result<Array2<f64>> {
    let (rows, cols) = map.dim();
    let radius = side as f64 * std::f64::consts::SQRT_2 / 2.0;
    let (cr, cc) = center;
    if cr < radius
        || cc < radius
        || cr > rows as f64 - 1.0 - radius
        || cc > cols as f64 - 1.0 - radius
    {
        return Err(Error::Sampling(format!(
            "patch circumcircle (center ({cr:.2},{cc:.2}), radius {radius:.2}) leaves the {rows}x{cols} image"
        )));
    }
    rotate_crop(map, center, theta_deg, side, side)
}

/// The rectangle of valid patch centers for a given image and side, under
/// the circumcircle rule. Returns `(r_min, r_max, c_min, c_max)`.
pub fn valid_center_region(rows: usize, cols: usize, side: usize) -> Result<(f64, f64, f64, f64)> {
    let radius = side as f64 * std::f64::consts::SQRT_2 / 2.0;
    let r_min = radius;
    let r_max = rows as f64 - 1.0 - radius;
    let c_min = radius;
    let c_max = cols as f64 - 1.0 - radius;
    if r_max < r_min || c_max < c_min {
        return Err(Error::Sampling(format!(
            "no valid center for side {side} in a {rows}x{cols} image"
        )));
    }
    Ok((r_min, r_max, c_min, c_max))
}

/// Draws `n` patch samples per material. One draw fixes a `(center, theta)`
/// pair used across all materials, so the material patches of a draw are
/// co-located. Centers are uniform over the valid region, `theta` uniform
/// over `[0, 360)`.
pub fn sample_patch_set(
    abundances: &AbundanceSet,
    image_id: ImageId,
    n: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<Vec<PatchSample>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sample_draw_list(abundances.rows(), abundances.cols(), side, n, &mut rng)?;
    patches_at(abundances, image_id, side, &draws)
}

/// Draws `n` valid `(center, theta)` pairs; 100 attempts per draw.
pub(crate) fn sample_draw_list<R: Rng>(
    rows: usize,
    cols: usize,
    side: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<((f64, f64), f64)>> {
    let (r_min, r_max, c_min, c_max) = valid_center_region(rows, cols, side)?;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let mut accepted = None;
        for _attempt in 0..100 {
            let cr = r_min + rng.random::<f64>() * (r_max - r_min);
            let cc = c_min + rng.random::<f64>() * (c_max - c_min);
            let theta = rng.random::<f64>() * 360.0;
            if cr >= r_min && cr <= r_max && cc >= c_min && cc <= c_max {
                accepted = Some(((cr, cc), theta));
                break;
            }
        }
        match accepted {
            Some(d) => draws.push(d),
            None => return Err(Error::Sampling("no valid patch center after 100 attempts".into())),
        }
    }
    Ok(draws)
}

/// Extracts the co-located patch stack for a fixed draw list.
pub(crate) fn patches_at(
    abundances: &AbundanceSet,
    image_id: ImageId,
    side: usize,
    draws: &[((f64, f64), f64)],
) -> Result<Vec<Vec<PatchSample>>> {
    let mut per_material = vec![Vec::with_capacity(draws.len()); abundances.material_count()];
    for &(center, theta) in draws {
        for (r, map) in abundances.maps().iter().enumerate() {
            let values = extract_rotated_patch(map, center, theta, side)?;
            per_material[r].push(PatchSample {
                image_id,
                material: r,
                center,
                theta_deg: theta,
                side,
                values,
            });
        }
    }
    Ok(per_material)
}

/// Analytic per-pixel coverage counts of the stitched output.
pub fn coverage_counts(
    rows_lr: usize,
    cols_lr: usize,
    window: usize,
    out_window: usize,
    scale: usize,
    stride: usize,
) -> Array2<f64> {
    let count_1d = |len_lr: usize| -> Vec<f64> {
        let last = len_lr - window;
        let extent = (last / stride) * stride * scale + out_window;
        let mut counts = vec![0.0; extent];
        for (i, c) in counts.iter_mut().enumerate() {
            let lo_raw = i as i64 - out_window as i64 + 1;
            let lo = ((lo_raw + scale as i64 - 1).div_euclid(scale as i64)).max(0) as usize;
            let hi = (i / scale).min(last);
            let mut k = 0usize;
            let mut w = lo.div_ceil(stride) * stride;
            while w <= hi {
                if w >= lo {
                    k += 1;
                }
                w += stride;
            }
            *c = k as f64;
        }
        counts
    };
    let rc = count_1d(rows_lr);
    let cc = count_1d(cols_lr);
    Array2::from_shape_fn((rc.len(), cc.len()), |(i, j)| rc[i] * cc[j])
}

/// Applies `patches_fn` to every axis-aligned `window`-sized crop of
/// `low_res` at the given stride (row-major scan), places each
/// `out_window`-sized result at the upscaled location (top-left times
/// `scale`), and averages overlapping outputs.
pub fn slide_stitch<F>(
    patches_fn: F,
    low_res: &Array2<f64>,
    window: usize,
    out_window: usize,
    scale: usize,
    stride: usize,
) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>) -> Array2<f64>,
{
    let mut f = patches_fn;
    slide_stitch_batched(
        |chunk: &[Array2<f64>]| chunk.iter().map(&mut f).collect(),
        low_res,
        window,
        out_window,
        scale,
        stride,
        1,
    )
}

/// Batched variant: windows are gathered into chunks of `batch` and handed
/// to `batch_fn` together, which helps translators that amortize per-call
/// cost. Output is identical to `slide_stitch`.
pub fn slide_stitch_batched<F>(
    mut batch_fn: F,
    low_res: &Array2<f64>,
    window: usize,
    out_window: usize,
    scale: usize,
    stride: usize,
    batch: usize,
) -> Result<Array2<f64>>
where
    F: FnMut(&[Array2<f64>]) -> Vec<Array2<f64>>,
{
    let (rows, cols) = low_res.dim();
    if rows < window || cols < window {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} input is smaller than the {window}-pixel window"
        )));
    }
    if stride == 0 || batch == 0 {
        return Err(Error::InvalidSpec("stride and batch must be positive".into()));
    }
    let last_r = ((rows - window) / stride) * stride;
    let last_c = ((cols - window) / stride) * stride;
    let out_rows = last_r * scale + out_window;
    let out_cols = last_c * scale + out_window;
    let mut acc = Array2::<f64>::zeros((out_rows, out_cols));

    let mut origins = Vec::new();
    let mut wr = 0;
    while wr <= rows - window {
        let mut wc = 0;
        while wc <= cols - window {
            origins.push((wr, wc));
            wc += stride;
        }
        wr += stride;
    }

    for chunk in origins.chunks(batch) {
        let inputs: Vec<Array2<f64>> = chunk
            .iter()
            .map(|&(r, c)| low_res.slice(ndarray::s![r..r + window, c..c + window]).to_owned())
            .collect();
        let outputs = batch_fn(&inputs);
        if outputs.len() != inputs.len() {
            return Err(Error::Dimension(format!(
                "stitch callback returned {} outputs for {} windows",
                outputs.len(),
                inputs.len()
            )));
        }
        for (&(r, c), o) in chunk.iter().zip(outputs.iter()) {
            if o.dim() != (out_window, out_window) {
                return Err(Error::Dimension(format!(
                    "stitch callback returned {:?}, expected {out_window}x{out_window}",
                    o.dim()
                )));
            }
            let mut dst = acc.slice_mut(ndarray::s![
                r * scale..r * scale + out_window,
                c * scale..c * scale + out_window
            ]);
            dst += o;
        }
    }

    let cover = coverage_counts(rows, cols, window, out_window, scale, stride);
    Ok(&acc / &cover)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn tiled(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i % 2) * 2 + (j % 2)) as f64 + 1.0)
    }

    #[test]
    fn theta_zero_is_plain_crop() {
        let map = Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f64);
        // Center chosen so the grid lands on the lattice: side 4 -> offsets
        // are half-integers -> half-integer center.
        let patch = extract_rotated_patch(&map, (7.5, 7.5), 0.0, 4).unwrap();
        let direct = map.slice(ndarray::s![6..10, 6..10]).to_owned();
        assert_eq!(patch, direct);
    }

    #[test]
    fn theta_90_is_exact_index_rotation() {
        let map = tiled(16, 16);
        let p0 = extract_rotated_patch(&map, (7.5, 7.5), 0.0, 4).unwrap();
        let p90 = extract_rotated_patch(&map, (7.5, 7.5), 90.0, 4).unwrap();
        // Counter-clockwise index rotation of the unrotated crop.
        let b = 4;
        let ccw = Array2::from_shape_fn((b, b), |(u, v)| p0[[v, b - 1 - u]]);
        let err: f64 = (&p90 - &ccw).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "err={err}");
    }

    #[test]
    fn lattice_rotation_composition() {
        let map = Array2::from_shape_fn((24, 24), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        for theta in [0.0, 90.0, 180.0, 270.0] {
            let a = extract_rotated_patch(&map, (11.5, 11.5), theta, 6).unwrap();
            let b_dir = extract_rotated_patch(&map, (11.5, 11.5), (theta + 90.0) % 360.0, 6).unwrap();
            let n = 6;
            let ccw = Array2::from_shape_fn((n, n), |(u, v)| a[[v, n - 1 - u]]);
            let err: f64 = (&b_dir - &ccw).iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "theta={theta} err={err}");
        }
    }

    #[test]
    fn arbitrary_angle_reproduces_affine_plane() {
        // Bilinear interpolation reproduces z = a x + b y + c exactly.
        let (a, b, c) = (0.3, -0.7, 2.0);
        let map = Array2::from_shape_fn((32, 32), |(i, j)| a * i as f64 + b * j as f64 + c);
        let theta: f64 = 37.0;
        let patch = extract_rotated_patch(&map, (15.5, 15.5), theta, 8).unwrap();
        let t = theta.to_radians();
        let (sin_t, cos_t) = t.sin_cos();
        for u in 0..8 {
            for v in 0..8 {
                let du = u as f64 - 3.5;
                let dv = v as f64 - 3.5;
                let sr = 15.5 + cos_t * du + sin_t * dv;
                let sc = 15.5 - sin_t * du + cos_t * dv;
                let expect = a * sr + b * sc + c;
                assert!((patch[[u, v]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn out_of_bounds_center_rejected() {
        let map = Array2::<f64>::zeros((10, 10));
        assert!(extract_rotated_patch(&map, (1.0, 5.0), 10.0, 6).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_colocated() {
        let maps = vec![
            Array2::from_shape_fn((20, 20), |(i, j)| (i + j) as f64),
            Array2::from_shape_fn((20, 20), |(i, j)| (i * j) as f64),
        ];
        let ends = vec![ndarray::arr1(&[1.0]), ndarray::arr1(&[2.0])];
        let ab = AbundanceSet::new(maps, ends).unwrap();
        let s1 = sample_patch_set(&ab, ImageId::Hsi, 5, 4, 42).unwrap();
        let s2 = sample_patch_set(&ab, ImageId::Hsi, 5, 4, 42).unwrap();
        for (m1, m2) in s1.iter().zip(s2.iter()) {
            for (p1, p2) in m1.iter().zip(m2.iter()) {
                assert_eq!(p1.center, p2.center);
                assert_eq!(p1.theta_deg, p2.theta_deg);
                assert_eq!(p1.values, p2.values);
            }
        }
        // Co-location across materials.
        for k in 0..5 {
            assert_eq!(s1[0][k].center, s1[1][k].center);
            assert_eq!(s1[0][k].theta_deg, s1[1][k].theta_deg);
        }
    }

    #[test]
    fn theta_distribution_uniform_chi_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let draws = sample_draw_list(64, 64, 8, 10_000, &mut rng).unwrap();
        let mut bins = [0usize; 36];
        for (_c, theta) in &draws {
            let b = ((theta / 10.0) as usize).min(35);
            bins[b] += 1;
        }
        let expected = 10_000.0 / 36.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99th percentile of chi-squared with 35 degrees of freedom.
        assert!(chi2 < 57.342, "chi2={chi2}");
    }

    #[test]
    fn stitch_constant_replication_stays_constant() {
        let low = Array2::from_elem((6, 6), 3.25);
        let out = slide_stitch(
            |w: &Array2<f64>| {
                let mut o = Array2::zeros((8, 8));
                for i in 0..8 {
                    for j in 0..8 {
                        o[[i, j]] = w[[i / 4, j / 4]];
                    }
                }
                o
            },
            &low,
            2,
            8,
            4,
            1,
        )
        .unwrap();
        assert_eq!(out.dim(), (24, 24));
        for v in out.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn stitch_averaging_identical_values_is_identity() {
        // A row of three overlapping windows: interior coverage varies but
        // averaging identical outputs reproduces them exactly.
        let low = Array2::from_elem((2, 4), 0.0);
        let out = slide_stitch(|_w| Array2::from_elem((4, 4), 1.0), &low, 2, 4, 2, 1).unwrap();
        assert_eq!(out.dim(), (4, 8));
        for v in out.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_matches_accumulation_oracle() {
        let (rows, cols, window, scale, stride) = (7, 9, 3, 2, 1);
        let out_window = window * scale;
        let analytic = coverage_counts(rows, cols, window, out_window, scale, stride);
        let mut acc = Array2::<f64>::zeros(analytic.dim());
        let mut wr = 0;
        while wr <= rows - window {
            let mut wc = 0;
            while wc <= cols - window {
                for i in 0..out_window {
                    for j in 0..out_window {
                        acc[[wr * scale + i, wc * scale + j]] += 1.0;
                    }
                }
                wc += stride;
            }
            wr += stride;
        }
        assert_eq!(analytic, acc);
    }

    #[test]
    fn stitch_rejects_small_input() {
        let low = Array2::<f64>::zeros((2, 2));
        let r = slide_stitch(|_w| Array2::zeros((4, 4)), &low, 3, 4, 1, 1);
        assert!(r.is_err());
    }

    #[test]
    fn rejection_cap_reports_error() {
        // Side too large for the image: no valid region at all.
        let r = valid_center_region(4, 4, 6);
        assert!(r.is_err());
    }

    #[test]
    fn centers_land_in_valid_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = sample_draw_list(32, 48, 8, 200, &mut rng).unwrap();
        let (r_min, r_max, c_min, c_max) = valid_center_region(32, 48, 8).unwrap();
        for ((cr, cc), theta) in draws {
            assert!(cr >= r_min && cr <= r_max);
            assert!(cc >= c_min && cc <= c_max);
            assert!((0.0..360.0).contains(&theta));
        }
        let _ = rng.random::<f64>();
    }
}
