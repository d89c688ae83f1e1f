//! Dense 3-way spectral cube and the LL1 linear-mixture algebra.
//!
//! Storage is row-major with the band index fastest-varying, so a pixel
//! spectrum `cube(i, j, :)` is contiguous.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use crate::{Error, Result};

/// Dense nonnegative 3-way array: `rows x cols x bands` of reflectances.
///
/// Entries produced by LMM assembly from nonnegative factors are >= 0;
/// small negative values from numerical noise are tolerated elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    data: Array3<f64>,
}

impl SpectralCube {
    /// Wraps an array shaped `[rows, cols, bands]`. Rejects empty axes and
    /// non-finite entries.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (rows, cols, bands) = data.dim();
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(Error::Dimension(format!(
                "cube axes must be positive, got {rows}x{cols}x{bands}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("cube contains non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Self {
        Self {
            data: Array3::zeros((rows, cols, bands)),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.dim().0
    }

    pub fn cols(&self) -> usize {
        self.data.dim().1
    }

    pub fn bands(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Contiguous spectrum at pixel `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![i, j, ..])
    }

    /// Band `k` as a `rows x cols` matrix (copied; band axis is innermost).
    pub fn band(&self, k: usize) -> Array2<f64> {
        self.data.index_axis(Axis(2), k).to_owned()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// Largest entry; used as the default PSNR/SSIM peak.
    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean squared difference against another cube of identical shape.
    pub fn mse(&self, other: &SpectralCube) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "cube shapes differ: {:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }
}

/// Factor triple `(A_r, B_r, c_r)` of one material: abundance `A_r B_r^T`
/// (rank <= L_r by construction) with endmember spectrum `c_r`.
#[derive(Debug, Clone)]
pub struct MaterialFactors {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array1<f64>,
}

impl MaterialFactors {
    /// Rank cap of this material's abundance (number of factor columns).
    pub fn rank_cap(&self) -> usize {
        self.a.ncols()
    }

    /// Abundance map `A_r B_r^T`.
    pub fn abundance(&self) -> Array2<f64> {
        self.a.dot(&self.b.t())
    }
}

/// Per-material factor triples representing `sum_r (A_r B_r^T) o c_r`.
#[derive(Debug, Clone)]
pub struct Ll1Model {
    factors: Vec<MaterialFactors>,
}

impl Ll1Model {
    /// Validates that all materials share one spatial shape and one band
    /// count, that `A_r`/`B_r` agree on column count, and that entries are
    /// finite.
    pub fn new(factors: Vec<MaterialFactors>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one material".into()));
        }
        let rows = factors[0].a.nrows();
        let cols = factors[0].b.nrows();
        let bands = factors[0].c.len();
        for (r, f) in factors.iter().enumerate() {
            if f.a.nrows() != rows || f.b.nrows() != cols || f.c.len() != bands {
                return Err(Error::Dimension(format!(
                    "material {r} has shape ({}x{}, {} bands), expected ({rows}x{cols}, {bands} bands)",
                    f.a.nrows(),
                    f.b.nrows(),
                    f.c.len()
                )));
            }
            if f.a.ncols() != f.b.ncols() {
                return Err(Error::Dimension(format!(
                    "material {r}: A has {} columns but B has {}",
                    f.a.ncols(),
                    f.b.ncols()
                )));
            }
            if f.a.ncols() == 0 {
                return Err(Error::InvalidSpec(format!("material {r} has rank cap 0")));
            }
            let finite = f.a.iter().chain(f.b.iter()).chain(f.c.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numeric(format!("material {r} has non-finite factors")));
            }
        }
        Ok(Self { factors })
    }

    pub fn material_count(&self) -> usize {
        self.factors.len()
    }

    pub fn rows(&self) -> usize {
        self.factors[0].a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.factors[0].b.nrows()
    }

    pub fn bands(&self) -> usize {
        self.factors[0].c.len()
    }

    /// Rank caps `L_r` per material.
    pub fn rank_caps(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rank_cap()).collect()
    }

    pub fn factors(&self) -> &[MaterialFactors] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [MaterialFactors] {
        &mut self.factors
    }
}

/// Expanded abundance maps `S_r` with their endmember spectra `c_r`.
#[derive(Debug, Clone)]
pub struct AbundanceSet {
    maps: Vec<Array2<f64>>,
    endmembers: Vec<Array1<f64>>,
}

impl AbundanceSet {
    pub fn new(maps: Vec<Array2<f64>>, endmembers: Vec<Array1<f64>>) -> Result<Self> {
        if maps.is_empty() || maps.len() != endmembers.len() {
            return Err(Error::Dimension(format!(
                "{} abundance maps vs {} endmembers",
                maps.len(),
                endmembers.len()
            )));
        }
        let shape = maps[0].dim();
        let bands = endmembers[0].len();
        for (r, (s, c)) in maps.iter().zip(endmembers.iter()).enumerate() {
            if s.dim() != shape {
                return Err(Error::Dimension(format!(
                    "abundance map {r} is {:?}, expected {shape:?}",
                    s.dim()
                )));
            }
            if c.len() != bands {
                return Err(Error::Dimension(format!(
                    "endmember {r} has {} bands, expected {bands}",
                    c.len()
                )));
            }
        }
        Ok(Self { maps, endmembers })
    }

    pub fn material_count(&self) -> usize {
        self.maps.len()
    }

    pub fn rows(&self) -> usize {
        self.maps[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.maps[0].ncols()
    }

    pub fn bands(&self) -> usize {
        self.endmembers[0].len()
    }

    pub fn maps(&self) -> &[Array2<f64>] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.maps
    }

    pub fn endmembers(&self) -> &[Array1<f64>] {
        &self.endmembers
    }

    /// Largest negative excursion (0 when all entries are nonnegative).
    pub fn negativity(&self) -> f64 {
        self.maps
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |acc, &v| acc.max(-v))
    }

    /// Largest deviation of the per-pixel material sums from one.
    pub fn sum_to_one_error(&self) -> f64 {
        let (rows, cols) = self.maps[0].dim();
        let mut worst = 0.0f64;
        for i in 0..rows {
            for j in 0..cols {
                let s: f64 = self.maps.iter().map(|m| m[[i, j]]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// Clamps all map entries to `>= 0`.
    pub fn clamp_nonnegative(&mut self) {
        for m in &mut self.maps {
            m.mapv_inplace(|v| v.max(0.0));
        }
    }
}

/// Assembles `sum_r S_r o c_r` into a cube: `out(i,j,k) = sum_r S_r(i,j) c_r(k)`.
pub fn assemble_lmm(abundances: &AbundanceSet) -> Result<SpectralCube> {
    let (rows, cols) = (abundances.rows(), abundances.cols());
    let bands = abundances.bands();
    let mut out = Array3::<f64>::zeros((rows, cols, bands));
    for (s, c) in abundances.maps.iter().zip(abundances.endmembers.iter()) {
        for i in 0..rows {
            for j in 0..cols {
                let w = s[[i, j]];
                if w == 0.0 {
                    continue;
                }
                let mut px = out.slice_mut(ndarray::s![i, j, ..]);
                px.scaled_add(w, c);
            }
        }
    }
    SpectralCube::from_array(out)
}

/// Expands model factors into abundance maps `S_r = A_r B_r^T` (endmembers
/// copied through).
pub fn factors_to_abundances(model: &Ll1Model) -> AbundanceSet {
    let maps = model.factors.iter().map(|f| f.abundance()).collect();
    let endmembers = model.factors.iter().map(|f| f.c.clone()).collect();
    AbundanceSet::new(maps, endmembers).expect("model invariants guarantee consistent shapes")
}

/// Applies a spectral operator to every pixel: `out(i,j,:) = P cube(i,j,:)`.
pub fn mode3_apply(cube: &SpectralCube, p: &Array2<f64>) -> Result<SpectralCube> {
    let (rows, cols, bands) = cube.dim();
    if p.ncols() != bands {
        return Err(Error::Dimension(format!(
            "operator has {} columns but cube has {bands} bands",
            p.ncols()
        )));
    }
    let k_out = p.nrows();
    let mut out = Array3::<f64>::zeros((rows, cols, k_out));
    for i in 0..rows {
        for j in 0..cols {
            let spectrum = cube.pixel(i, j);
            let mapped = p.dot(&spectrum);
            out.slice_mut(ndarray::s![i, j, ..]).assign(&mapped);
        }
    }
    SpectralCube::from_array(out)
}

/// Assembles a model's cube directly (factors expanded on the fly).
pub fn assemble_model(model: &Ll1Model) -> SpectralCube {
    assemble_lmm(&factors_to_abundances(model)).expect("model invariants guarantee finite factors")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
    }

    #[test]
    fn assemble_single_material_outer_product() {
        let s = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let c = arr1(&[2.0, 3.0]);
        let ab = AbundanceSet::new(vec![s], vec![c]).unwrap();
        let cube = assemble_lmm(&ab).unwrap();
        assert_eq!(cube.band(0), arr2(&[[2.0, 0.0], [0.0, 2.0]]));
        assert_eq!(cube.band(1), arr2(&[[3.0, 0.0], [0.0, 3.0]]));
    }

    #[test]
    fn assemble_two_materials_symmetry() {
        let s = Array2::from_elem((2, 2), 0.5);
        let ab = AbundanceSet::new(
            vec![s.clone(), s],
            vec![arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])],
        )
        .unwrap();
        let cube = assemble_lmm(&ab).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cube.pixel(i, j).to_vec(), vec![0.5, 0.5]);
            }
        }
    }

    #[test]
    fn assemble_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps: Vec<Array2<f64>> = (0..3).map(|_| random_matrix(&mut rng, 3, 3)).collect();
        let ends: Vec<_> = (0..3)
            .map(|_| Array1::from_shape_fn(4, |_| rng.random::<f64>()))
            .collect();
        let ab = AbundanceSet::new(maps.clone(), ends.clone()).unwrap();
        let cube = assemble_lmm(&ab).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..4 {
                    let mut expect = 0.0;
                    for r in 0..3 {
                        expect += maps[r][[i, j]] * ends[r][k];
                    }
                    assert!((cube.data()[[i, j, k]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn factors_expand_rank_one() {
        let m = Ll1Model::new(vec![MaterialFactors {
            a: arr2(&[[1.0], [0.0]]),
            b: arr2(&[[1.0], [1.0]]),
            c: arr1(&[1.0]),
        }])
        .unwrap();
        let ab = factors_to_abundances(&m);
        assert_eq!(ab.maps()[0], arr2(&[[1.0, 1.0], [0.0, 0.0]]));
    }

    #[test]
    fn factors_identity_columns() {
        let m = Ll1Model::new(vec![MaterialFactors {
            a: Array2::eye(3),
            b: Array2::eye(3),
            c: arr1(&[1.0, 2.0]),
        }])
        .unwrap();
        let ab = factors_to_abundances(&m);
        assert_eq!(ab.maps()[0], Array2::eye(3));
    }

    #[test]
    fn factors_match_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 5, 2);
        let b = random_matrix(&mut rng, 6, 2);
        let m = Ll1Model::new(vec![MaterialFactors {
            a: a.clone(),
            b: b.clone(),
            c: arr1(&[1.0]),
        }])
        .unwrap();
        let ab = factors_to_abundances(&m);
        for i in 0..5 {
            for j in 0..6 {
                let mut expect = 0.0;
                for l in 0..2 {
                    expect += a[[i, l]] * b[[j, l]];
                }
                assert!((ab.maps()[0][[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode3_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((2, 3, 4), |_| rng.random::<f64>());
        let cube = SpectralCube::from_array(data).unwrap();
        let out = mode3_apply(&cube, &Array2::eye(4)).unwrap();
        assert_eq!(out.data(), cube.data());
    }

    #[test]
    fn mode3_ones_row_sums_spectrum() {
        let mut data = Array3::zeros((1, 1, 3));
        data.slice_mut(ndarray::s![0, 0, ..])
            .assign(&arr1(&[1.0, 2.0, 3.0]));
        let cube = SpectralCube::from_array(data).unwrap();
        let p = Array2::ones((1, 3));
        let out = mode3_apply(&cube, &p).unwrap();
        assert_eq!(out.data()[[0, 0, 0]], 6.0);
    }

    #[test]
    fn mode3_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let data = Array3::from_shape_fn((3, 3, 10), |_| rng.random::<f64>());
        let cube = SpectralCube::from_array(data.clone()).unwrap();
        let p = random_matrix(&mut rng, 4, 10);
        let out = mode3_apply(&cube, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..4 {
                    let mut expect = 0.0;
                    for b in 0..10 {
                        expect += p[[k, b]] * data[[i, j, b]];
                    }
                    assert!((out.data()[[i, j, k]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mode3_rejects_band_mismatch() {
        let cube = SpectralCube::zeros(2, 2, 3);
        let p = Array2::ones((1, 4));
        assert!(mode3_apply(&cube, &p).is_err());
    }

    #[test]
    fn assemble_rejects_shape_mismatch() {
        let r = AbundanceSet::new(
            vec![Array2::zeros((2, 2)), Array2::zeros((3, 2))],
            vec![arr1(&[1.0]), arr1(&[1.0])],
        );
        assert!(r.is_err());
    }

    // Eq-style consistency: mixing then spectrally degrading equals mixing
    // with transformed endmembers.
    #[test]
    fn mode3_commutes_with_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let maps: Vec<Array2<f64>> = (0..2).map(|_| random_matrix(&mut rng, 4, 5)).collect();
        let ends: Vec<_> = (0..2)
            .map(|_| Array1::from_shape_fn(6, |_| rng.random::<f64>()))
            .collect();
        let p = random_matrix(&mut rng, 3, 6);

        let ab = AbundanceSet::new(maps.clone(), ends.clone()).unwrap();
        let lhs = mode3_apply(&assemble_lmm(&ab).unwrap(), &p).unwrap();

        let mapped_ends: Vec<_> = ends.iter().map(|c| p.dot(c)).collect();
        let ab2 = AbundanceSet::new(maps, mapped_ends).unwrap();
        let rhs = assemble_lmm(&ab2).unwrap();

        assert!(lhs.mse(&rhs).unwrap().sqrt() < 1e-10);
    }

    #[test]
    fn assembly_linear_in_endmembers() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let s = random_matrix(&mut rng, 3, 3);
        let c = Array1::from_shape_fn(4, |_| rng.random::<f64>());
        let alpha = 2.5;

        let base = assemble_lmm(&AbundanceSet::new(vec![s.clone()], vec![c.clone()]).unwrap()).unwrap();
        let scaled =
            assemble_lmm(&AbundanceSet::new(vec![s], vec![c.mapv(|v| alpha * v)]).unwrap()).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data().iter()) {
            assert!((alpha * a - b).abs() < 1e-12);
        }
    }
}
