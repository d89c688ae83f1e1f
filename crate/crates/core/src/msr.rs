//! Coupled regularized LL1 unmixing by alternating projected gradient.
//!
//! The criterion couples two Frobenius fitting terms through shared
//! endmembers (the multispectral endmembers are `P c_r`), with a Schatten-p
//! low-rank surrogate, a sum-to-one penalty on both abundance sets, and a
//! smoothed l_q total-variation penalty on the multispectral abundances.
//! The rank caps are additionally enforced structurally: each abundance is
//! kept in factored form `A_r B_r^T` with `L_r` columns.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::symmetric_eig;
use crate::tensor::{AbundanceSet, Ll1Model, SpectralCube};
use crate::{Error, Result};

/// Step-size policy for the block updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Constant step size; no descent guarantee.
    Fixed(f64),
    /// Backtracking with shrink factor `beta` and sufficient-decrease
    /// constant `c` (both in `(0, 1)`).
    Backtracking { beta: f64, c: f64 },
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct MsrConfig {
    pub r: usize,
    pub l_h: usize,
    pub l_m: usize,
    pub lambda_lr: f64,
    pub lambda_sto: f64,
    pub lambda_tv: f64,
    /// Weight of the soft penalty on negative abundance entries; the
    /// factored-form surrogate of the abundance nonnegativity constraint.
    pub lambda_neg: f64,
    pub p: f64,
    pub q: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub step_rule: StepRule,
    pub seed: u64,
    /// Independent random starts; the lowest final objective wins.
    pub restarts: usize,
    /// Early-success threshold: a start whose objective reaches this value
    /// is returned immediately (noiseless recovery reaches ~0).
    pub obj_tol: Option<f64>,
    /// Extra iterations spent continuing the best start when no start
    /// reached `obj_tol` during exploration.
    pub refine_iters: usize,
    /// Perturb-and-redescend rounds applied to the best iterate when it is
    /// still above `obj_tol` after refinement.
    pub hops: usize,
}

impl MsrConfig {
    pub fn new(r: usize, l_h: usize, l_m: usize) -> Self {
        Self {
            r,
            l_h,
            l_m,
            lambda_lr: 1e-4,
            lambda_sto: 1e-2,
            lambda_tv: 1e-4,
            lambda_neg: 1.0,
            p: 0.5,
            q: 0.5,
            tau: 1.0,
            epsilon: 1e-3,
            max_iters: 1000,
            rel_tol: 1e-6,
            step_rule: StepRule::Backtracking { beta: 0.5, c: 1e-4 },
            seed: 0,
            restarts: 1,
            obj_tol: None,
            refine_iters: 0,
            hops: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.l_h == 0 || self.l_m == 0 {
            return Err(Error::InvalidSpec("R and the rank caps must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidSpec("at least one start is required".into()));
        }
        if !(0.0 < self.p && self.p <= 1.0) || !(0.0 < self.q && self.q <= 1.0) {
            return Err(Error::InvalidSpec("exponents p and q must lie in (0, 1]".into()));
        }
        if self.tau <= 0.0 || self.epsilon <= 0.0 || self.rel_tol <= 0.0 {
            return Err(Error::InvalidSpec("tau, epsilon and rel_tol must be positive".into()));
        }
        if self.lambda_lr < 0.0 || self.lambda_sto < 0.0 || self.lambda_tv < 0.0 || self.lambda_neg < 0.0 {
            return Err(Error::InvalidSpec("regularization weights must be nonnegative".into()));
        }
        match self.step_rule {
            StepRule::Fixed(eta) if eta <= 0.0 => {
                Err(Error::InvalidSpec("fixed step must be positive".into()))
            }
            StepRule::Backtracking { beta, c }
                if !(0.0 < beta && beta < 1.0) || !(0.0 < c && c < 1.0) =>
            {
                Err(Error::InvalidSpec("backtracking needs beta, c in (0, 1)".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One of the cyclic update blocks (`r` is the material index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockId {
    AH(usize),
    BH(usize),
    CH(usize),
    AM(usize),
    BM(usize),
}

/// All decision variables of the criterion.
#[derive(Debug, Clone)]
pub struct MsrFactors {
    pub a_h: Vec<Array2<f64>>,
    pub b_h: Vec<Array2<f64>>,
    pub c_h: Vec<Array1<f64>>,
    pub a_m: Vec<Array2<f64>>,
    pub b_m: Vec<Array2<f64>>,
}

impl MsrFactors {
    fn s_h(&self, r: usize) -> Array2<f64> {
        self.a_h[r].dot(&self.b_h[r].t())
    }

    fn s_m(&self, r: usize) -> Array2<f64> {
        self.a_m[r].dot(&self.b_m[r].t())
    }

    fn all_finite(&self) -> bool {
        let mats = self.a_h.iter().chain(&self.b_h).chain(&self.a_m).chain(&self.b_m);
        mats.flat_map(|m| m.iter()).all(|v| v.is_finite())
            && self.c_h.iter().flat_map(|c| c.iter()).all(|v| v.is_finite())
    }
}

/// Solver output: expanded abundances with endmembers, the objective
/// trace, and the factored iterate.
#[derive(Debug, Clone)]
pub struct MsrSolution {
    pub hsi: AbundanceSet,
    pub msi_abundances: Vec<Array2<f64>>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iters_used: usize,
    pub factors: MsrFactors,
}

/// The unmixing problem: observed pair, spectral response, configuration.
pub struct MsrProblem<'a> {
    y_h: Array2<f64>,
    y_m: Array2<f64>,
    p: &'a Array2<f64>,
    dims_h: (usize, usize, usize),
    dims_m: (usize, usize, usize),
    config: &'a MsrConfig,
}

/// Mode-3 unfolding: pixels as rows (free with band-fastest storage).
fn unfold(cube: &SpectralCube) -> Array2<f64> {
    let (rows, cols, bands) = cube.dim();
    cube.data()
        .to_owned()
        .into_shape_with_order((rows * cols, bands))
        .expect("band-fastest layout reshapes losslessly")
}

fn fold_vec(v: &Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| v[i * cols + j])
}

fn vec_map(m: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(m.iter().cloned())
}

impl<'a> MsrProblem<'a> {
    pub fn new(
        y_h: &SpectralCube,
        y_m: &SpectralCube,
        p: &'a Array2<f64>,
        config: &'a MsrConfig,
    ) -> Result<Self> {
        config.validate()?;
        if p.ncols() != y_h.bands() {
            return Err(Error::Dimension(format!(
                "response has {} columns but the HSI has {} bands",
                p.ncols(),
                y_h.bands()
            )));
        }
        if p.nrows() != y_m.bands() {
            return Err(Error::Dimension(format!(
                "response has {} rows but the MSI has {} bands",
                p.nrows(),
                y_m.bands()
            )));
        }
        Ok(Self {
            y_h: unfold(y_h),
            y_m: unfold(y_m),
            p,
            dims_h: y_h.dim(),
            dims_m: y_m.dim(),
            config,
        })
    }

    /// Random initialization: factors i.i.d. uniform(0,1), then a global
    /// rescale of each image's factors so the mean per-pixel abundance sum
    /// starts near one.
    pub fn init_factors(&self, rng: &mut ChaCha8Rng) -> MsrFactors {
        let (i_h, j_h, k_h) = self.dims_h;
        let (i_m, j_m, _) = self.dims_m;
        let cfg = self.config;
        let uniform_mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
        };

        let mut a_h: Vec<_> = (0..cfg.r).map(|_| uniform_mat(i_h, cfg.l_h, rng)).collect();
        let mut b_h: Vec<_> = (0..cfg.r).map(|_| uniform_mat(j_h, cfg.l_h, rng)).collect();
        let c_h: Vec<_> = (0..cfg.r)
            .map(|_| Array1::from_shape_fn(k_h, |_| rng.random::<f64>()))
            .collect();
        let mut a_m: Vec<_> = (0..cfg.r).map(|_| uniform_mat(i_m, cfg.l_m, rng)).collect();
        let mut b_m: Vec<_> = (0..cfg.r).map(|_| uniform_mat(j_m, cfg.l_m, rng)).collect();

        let rescale = |a: &mut Vec<Array2<f64>>, b: &mut Vec<Array2<f64>>| {
            let mut mean = 0.0;
            for (ar, br) in a.iter().zip(b.iter()) {
                mean += ar.dot(&br.t()).mean().unwrap();
            }
            if mean > 0.0 {
                let scale = (1.0 / mean).sqrt();
                for m in a.iter_mut().chain(b.iter_mut()) {
                    m.mapv_inplace(|v| v * scale);
                }
            }
        };
        rescale(&mut a_h, &mut b_h);
        rescale(&mut a_m, &mut b_m);
        MsrFactors { a_h, b_h, c_h, a_m, b_m }
    }

    fn residual_h(&self, f: &MsrFactors) -> Array2<f64> {
        let mut e = -&self.y_h;
        for r in 0..self.config.r {
            let s = vec_map(&f.s_h(r));
            rank1_update(&mut e, &s, &f.c_h[r].view());
        }
        e
    }

    fn residual_m(&self, f: &MsrFactors) -> Array2<f64> {
        let mut e = -&self.y_m;
        for r in 0..self.config.r {
            let s = vec_map(&f.s_m(r));
            let cm = self.p.dot(&f.c_h[r]);
            rank1_update(&mut e, &s, &cm.view());
        }
        e
    }

    /// Full objective value.
    pub fn objective(&self, f: &MsrFactors) -> Result<f64> {
        if !f.all_finite() {
            return Err(Error::Numeric("objective evaluated at non-finite factors".into()));
        }
        let cfg = self.config;
        let fit = frob2(&self.residual_h(f)) + frob2(&self.residual_m(f));

        let mut lr = 0.0;
        let mut sto = 0.0;
        let mut tv = 0.0;
        if cfg.lambda_lr > 0.0 {
            for r in 0..cfg.r {
                lr += schatten_value(&f.a_h[r], &f.b_h[r], cfg.tau, cfg.p, self.dims_h.0);
                lr += schatten_value(&f.a_m[r], &f.b_m[r], cfg.tau, cfg.p, self.dims_m.0);
            }
        }
        if cfg.lambda_sto > 0.0 {
            sto += sum_to_one_value(&f.a_h, &f.b_h);
            sto += sum_to_one_value(&f.a_m, &f.b_m);
        }
        if cfg.lambda_tv > 0.0 {
            for r in 0..cfg.r {
                tv += tv_value(&f.s_m(r), cfg.epsilon, cfg.q);
            }
        }
        let mut neg = 0.0;
        if cfg.lambda_neg > 0.0 {
            for r in 0..cfg.r {
                neg += negativity_value(&f.s_h(r)) + negativity_value(&f.s_m(r));
            }
        }
        let total = fit + cfg.lambda_lr * lr + cfg.lambda_sto * sto + cfg.lambda_tv * tv
            + cfg.lambda_neg * neg;
        if !total.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(total)
    }

    /// Exact gradient of the objective with respect to one block.
    /// Endmember gradients come back as a single-column matrix.
    pub fn gradient_block(&self, f: &MsrFactors, block: BlockId) -> Array2<f64> {
        let cache = ResidualCache::build(self, f);
        self.gradient_cached(f, block, &cache, None)
    }

    /// Gradient using cached residuals/sums; `override_value` evaluates the
    /// gradient at a shifted block value (rank-one residual delta) without
    /// touching the cache.
    fn gradient_cached(
        &self,
        f: &MsrFactors,
        block: BlockId,
        cache: &ResidualCache,
        override_value: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        let cfg = self.config;
        match block {
            BlockId::AH(r) | BlockId::BH(r) => {
                let (rows, cols) = (self.dims_h.0, self.dims_h.1);
                let (a, b): (&Array2<f64>, &Array2<f64>) = match (block, override_value) {
                    (BlockId::AH(_), Some(x)) => (x, &f.b_h[r]),
                    (BlockId::BH(_), Some(x)) => (&f.a_h[r], x),
                    _ => (&f.a_h[r], &f.b_h[r]),
                };
                let s_cur = a.dot(&b.t());
                let delta = &s_cur - &f.s_h(r);
                let c = &f.c_h[r];
                // e_eff . c = e . c + delta_vec (c . c)
                let mut g_vec = cache.e_h.dot(c);
                let c2 = c.dot(c);
                for (g, d) in g_vec.iter_mut().zip(delta.iter()) {
                    *g += d * c2;
                }
                let mut grad_s = fold_vec(&g_vec, rows, cols).mapv(|v| 2.0 * v);
                if cfg.lambda_sto > 0.0 {
                    let mut total = cache.sum_h.clone();
                    total += &delta;
                    total.mapv_inplace(|v| v - 1.0);
                    grad_s.scaled_add(2.0 * cfg.lambda_sto, &total);
                }
                if cfg.lambda_neg > 0.0 {
                    grad_s.scaled_add(2.0 * cfg.lambda_neg, &s_cur.mapv(|v| v.min(0.0)));
                }
                let mut grad = match block {
                    BlockId::AH(_) => grad_s.dot(b),
                    _ => grad_s.t().dot(a),
                };
                if cfg.lambda_lr > 0.0 {
                    let gs_lr = schatten_grad(a, b, cfg.tau, cfg.p);
                    grad += &match block {
                        BlockId::AH(_) => gs_lr.dot(b).mapv(|v| v * cfg.lambda_lr),
                        _ => gs_lr.t().dot(a).mapv(|v| v * cfg.lambda_lr),
                    };
                }
                grad
            }
            BlockId::AM(r) | BlockId::BM(r) => {
                let (rows, cols) = (self.dims_m.0, self.dims_m.1);
                let (a, b): (&Array2<f64>, &Array2<f64>) = match (block, override_value) {
                    (BlockId::AM(_), Some(x)) => (x, &f.b_m[r]),
                    (BlockId::BM(_), Some(x)) => (&f.a_m[r], x),
                    _ => (&f.a_m[r], &f.b_m[r]),
                };
                let s_cur = a.dot(&b.t());
                let delta = &s_cur - &f.s_m(r);
                let cm = self.p.dot(&f.c_h[r]);
                let mut g_vec = cache.e_m.dot(&cm);
                let c2 = cm.dot(&cm);
                for (g, d) in g_vec.iter_mut().zip(delta.iter()) {
                    *g += d * c2;
                }
                let mut grad_s = fold_vec(&g_vec, rows, cols).mapv(|v| 2.0 * v);
                if cfg.lambda_sto > 0.0 {
                    let mut total = cache.sum_m.clone();
                    total += &delta;
                    total.mapv_inplace(|v| v - 1.0);
                    grad_s.scaled_add(2.0 * cfg.lambda_sto, &total);
                }
                if cfg.lambda_tv > 0.0 {
                    grad_s.scaled_add(cfg.lambda_tv, &tv_grad(&s_cur, cfg.epsilon, cfg.q));
                }
                if cfg.lambda_neg > 0.0 {
                    grad_s.scaled_add(2.0 * cfg.lambda_neg, &s_cur.mapv(|v| v.min(0.0)));
                }
                let mut grad = match block {
                    BlockId::AM(_) => grad_s.dot(b),
                    _ => grad_s.t().dot(a),
                };
                if cfg.lambda_lr > 0.0 {
                    let gs_lr = schatten_grad(a, b, cfg.tau, cfg.p);
                    grad += &match block {
                        BlockId::AM(_) => gs_lr.dot(b).mapv(|v| v * cfg.lambda_lr),
                        _ => gs_lr.t().dot(a).mapv(|v| v * cfg.lambda_lr),
                    };
                }
                grad
            }
            BlockId::CH(r) => {
                // HSI fitting plus the response-backpropagated MSI residual.
                let s_h = vec_map(&f.s_h(r));
                let s_m = vec_map(&f.s_m(r));
                let mut grad = cache.e_h.t().dot(&s_h);
                let mut back = cache.e_m.t().dot(&s_m);
                if let Some(x) = override_value {
                    let c_new = x.column(0).to_owned();
                    let dc = &c_new - &f.c_h[r];
                    // e_h_eff^T s_h = e_h^T s_h + (s_h . s_h) dc
                    let sh2 = s_h.dot(&s_h);
                    grad.scaled_add(sh2, &dc);
                    let sm2 = s_m.dot(&s_m);
                    back.scaled_add(sm2, &self.p.dot(&dc));
                }
                grad.mapv_inplace(|v| 2.0 * v);
                grad.scaled_add(2.0, &self.p.t().dot(&back));
                let k = grad.len();
                grad.into_shape_with_order((k, 1)).unwrap()
            }
        }
    }

    /// Objective restricted to the terms the block can change, evaluated
    /// with the candidate block value. `cache` carries the residuals at the
    /// current iterate so a candidate costs one rank-one delta. The solver
    /// loop uses the specialized line search; this reference version backs
    /// the consistency tests.
    #[cfg_attr(not(test), allow(dead_code))]
    fn partial_objective(
        &self,
        f: &MsrFactors,
        block: BlockId,
        candidate: &Array2<f64>,
        cache: &ResidualCache,
    ) -> f64 {
        let cfg = self.config;
        match block {
            BlockId::AH(r) | BlockId::BH(r) => {
                let (rows, cols) = (self.dims_h.0, self.dims_h.1);
                let (a, b) = match block {
                    BlockId::AH(_) => (candidate, &f.b_h[r]),
                    _ => (&f.a_h[r], candidate),
                };
                let s_new = a.dot(&b.t());
                let delta = vec_map(&(&s_new - &f.s_h(r)));
                let mut val = cache.fit_h + rank1_frob2_delta(&cache.e_h, &delta, &f.c_h[r].view());
                if cfg.lambda_lr > 0.0 {
                    val += cfg.lambda_lr * schatten_value(a, b, cfg.tau, cfg.p, rows);
                }
                if cfg.lambda_sto > 0.0 {
                    let mut total = fold_vec(&delta, rows, cols);
                    total += &cache.sum_h;
                    total.mapv_inplace(|v| v - 1.0);
                    val += cfg.lambda_sto * frob2(&total);
                }
                if cfg.lambda_neg > 0.0 {
                    val += cfg.lambda_neg * negativity_value(&s_new);
                }
                val
            }
            BlockId::AM(r) | BlockId::BM(r) => {
                let (rows, cols) = (self.dims_m.0, self.dims_m.1);
                let (a, b) = match block {
                    BlockId::AM(_) => (candidate, &f.b_m[r]),
                    _ => (&f.a_m[r], candidate),
                };
                let s_new = a.dot(&b.t());
                let delta = vec_map(&(&s_new - &f.s_m(r)));
                let cm = self.p.dot(&f.c_h[r]);
                let mut val = cache.fit_m + rank1_frob2_delta(&cache.e_m, &delta, &cm.view());
                if cfg.lambda_lr > 0.0 {
                    val += cfg.lambda_lr * schatten_value(a, b, cfg.tau, cfg.p, rows);
                }
                if cfg.lambda_sto > 0.0 {
                    let mut total = fold_vec(&delta, rows, cols);
                    total += &cache.sum_m;
                    total.mapv_inplace(|v| v - 1.0);
                    val += cfg.lambda_sto * frob2(&total);
                }
                if cfg.lambda_tv > 0.0 {
                    val += cfg.lambda_tv * tv_value(&s_new, cfg.epsilon, cfg.q);
                }
                if cfg.lambda_neg > 0.0 {
                    val += cfg.lambda_neg * negativity_value(&s_new);
                }
                val
            }
            BlockId::CH(r) => {
                let c_new = candidate.column(0).to_owned();
                let delta_c = &c_new - &f.c_h[r];
                let s_h = vec_map(&f.s_h(r));
                let fit_h = cache.fit_h + rank1_frob2_delta(&cache.e_h, &s_h, &delta_c.view());
                let s_m = vec_map(&f.s_m(r));
                let delta_cm = self.p.dot(&delta_c);
                let fit_m = cache.fit_m + rank1_frob2_delta(&cache.e_m, &s_m, &delta_cm.view());
                fit_h + fit_m
            }
        }
    }

    fn block_value(&self, f: &MsrFactors, block: BlockId) -> Array2<f64> {
        match block {
            BlockId::AH(r) => f.a_h[r].clone(),
            BlockId::BH(r) => f.b_h[r].clone(),
            BlockId::AM(r) => f.a_m[r].clone(),
            BlockId::BM(r) => f.b_m[r].clone(),
            BlockId::CH(r) => {
                let k = f.c_h[r].len();
                f.c_h[r].clone().into_shape_with_order((k, 1)).unwrap()
            }
        }
    }

    fn set_block(&self, f: &mut MsrFactors, block: BlockId, value: Array2<f64>) {
        match block {
            BlockId::AH(r) => f.a_h[r] = value,
            BlockId::BH(r) => f.b_h[r] = value,
            BlockId::AM(r) => f.a_m[r] = value,
            BlockId::BM(r) => f.b_m[r] = value,
            BlockId::CH(r) => f.c_h[r] = value.column(0).to_owned(),
        }
    }
}

/// Residuals and abundance sums at the current iterate.
struct ResidualCache {
    e_h: Array2<f64>,
    e_m: Array2<f64>,
    fit_h: f64,
    fit_m: f64,
    sum_h: Array2<f64>,
    sum_m: Array2<f64>,
}

impl ResidualCache {
    fn build(problem: &MsrProblem, f: &MsrFactors) -> Self {
        let e_h = problem.residual_h(f);
        let e_m = problem.residual_m(f);
        let (i_h, j_h, _) = problem.dims_h;
        let (i_m, j_m, _) = problem.dims_m;
        let mut sum_h = Array2::zeros((i_h, j_h));
        let mut sum_m = Array2::zeros((i_m, j_m));
        for r in 0..problem.config.r {
            sum_h += &f.s_h(r);
            sum_m += &f.s_m(r);
        }
        ResidualCache {
            fit_h: frob2(&e_h),
            fit_m: frob2(&e_m),
            e_h,
            e_m,
            sum_h,
            sum_m,
        }
    }
}

/// Applies an accepted block update to the cache incrementally.
fn update_cache_for(
    problem: &MsrProblem,
    f: &MsrFactors,
    block: BlockId,
    candidate: &Array2<f64>,
    cache: &mut ResidualCache,
) {
    match block {
        BlockId::AH(r) | BlockId::BH(r) => {
            let (a, b) = match block {
                BlockId::AH(_) => (candidate, &f.b_h[r]),
                _ => (&f.a_h[r], candidate),
            };
            let s_new = a.dot(&b.t());
            let delta_m = &s_new - &f.s_h(r);
            let delta = vec_map(&delta_m);
            rank1_update(&mut cache.e_h, &delta, &f.c_h[r].view());
            cache.fit_h = frob2(&cache.e_h);
            cache.sum_h += &delta_m;
        }
        BlockId::AM(r) | BlockId::BM(r) => {
            let (a, b) = match block {
                BlockId::AM(_) => (candidate, &f.b_m[r]),
                _ => (&f.a_m[r], candidate),
            };
            let s_new = a.dot(&b.t());
            let delta_m = &s_new - &f.s_m(r);
            let delta = vec_map(&delta_m);
            let cm = problem.p.dot(&f.c_h[r]);
            rank1_update(&mut cache.e_m, &delta, &cm.view());
            cache.fit_m = frob2(&cache.e_m);
            cache.sum_m += &delta_m;
        }
        BlockId::CH(r) => {
            let c_new = candidate.column(0).to_owned();
            let delta_c = &c_new - &f.c_h[r];
            let s_h = vec_map(&f.s_h(r));
            rank1_update(&mut cache.e_h, &s_h, &delta_c.view());
            cache.fit_h = frob2(&cache.e_h);
            let s_m = vec_map(&f.s_m(r));
            let delta_cm = problem.p.dot(&delta_c);
            rank1_update(&mut cache.e_m, &s_m, &delta_cm.view());
            cache.fit_m = frob2(&cache.e_m);
        }
    }
}

fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `e += s c^T` in place.
fn rank1_update(e: &mut Array2<f64>, s: &Array1<f64>, c: &ArrayView1<f64>) {
    for (mut row, &w) in e.rows_mut().into_iter().zip(s.iter()) {
        if w != 0.0 {
            row.scaled_add(w, c);
        }
    }
}

/// `||e + s c^T||_F^2 - ||e||_F^2` without materializing the update.
#[cfg_attr(not(test), allow(dead_code))]
fn rank1_frob2_delta(e: &Array2<f64>, s: &Array1<f64>, c: &ArrayView1<f64>) -> f64 {
    let ec = e.dot(c);
    let c2 = c.dot(c);
    let mut delta = 0.0;
    for (i, &w) in s.iter().enumerate() {
        delta += 2.0 * w * ec[i] + w * w * c2;
    }
    delta
}

fn sum_to_one_value(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    let (rows, cols) = (a[0].nrows(), b[0].nrows());
    let mut total = Array2::<f64>::zeros((rows, cols));
    for (ar, br) in a.iter().zip(b.iter()) {
        total += &ar.dot(&br.t());
    }
    total.mapv_inplace(|v| v - 1.0);
    frob2(&total)
}

/// Thin QR by modified Gram-Schmidt; numerically zero columns stay zero.
fn thin_qr(m: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let cols = m.ncols();
    let mut q = m.clone();
    let mut r = Array2::<f64>::zeros((cols, cols));
    for j in 0..cols {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            r[[k, j]] = proj;
            let col_k = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &col_k);
        }
        let norm = q.column(j).mapv(|x| x * x).sum().sqrt();
        if norm > 1e-150 {
            r[[j, j]] = norm;
            q.column_mut(j).mapv_inplace(|x| x / norm);
        } else {
            r[[j, j]] = 0.0;
            q.column_mut(j).fill(0.0);
        }
    }
    (q, r)
}

/// Nonzero singular values of `A B^T` via the small `L x L` core.
fn factored_singular_values(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    let (_, ra) = thin_qr(a);
    let (_, rb) = thin_qr(b);
    let core = ra.dot(&rb.t());
    crate::linalg::singular_values(&core)
}

/// `tr((S S^T + tau I)^(p/2))` for `S = A B^T` of height `rows`: the
/// spectrum is the `L` factored singular values plus `rows - L` copies of
/// `tau`.
fn schatten_value(a: &Array2<f64>, b: &Array2<f64>, tau: f64, p: f64, rows: usize) -> f64 {
    let sv = factored_singular_values(a, b);
    let l = sv.len();
    let mut total = (rows.saturating_sub(l)) as f64 * tau.powf(p / 2.0);
    for &s in sv.iter() {
        total += (s * s + tau).powf(p / 2.0);
    }
    total
}

/// `p (S S^T + tau I)^(p/2 - 1) S` for factored `S`, computed in the
/// `L`-dimensional core space.
fn schatten_grad(a: &Array2<f64>, b: &Array2<f64>, tau: f64, p: f64) -> Array2<f64> {
    let (qa, ra) = thin_qr(a);
    let (qb, rb) = thin_qr(b);
    let core = ra.dot(&rb.t());
    let (w, v) = symmetric_eig(&core.t().dot(&core));
    let l = core.nrows();
    let mut u = Array2::<f64>::zeros((l, l));
    let mut sv = Array1::<f64>::zeros(l);
    for j in 0..l {
        let s = w[j].max(0.0).sqrt();
        sv[j] = s;
        if s > 1e-150 {
            let col = core.dot(&v.column(j)) / s;
            u.column_mut(j).assign(&col);
        }
    }
    let mut mid = Array2::<f64>::zeros((l, l));
    for j in 0..l {
        let g = p * (sv[j] * sv[j] + tau).powf(p / 2.0 - 1.0) * sv[j];
        mid.column_mut(j).assign(&u.column(j).mapv(|x| x * g));
    }
    qa.dot(&mid.dot(&v.t())).dot(&qb.t())
}

/// Squared norm of the negative part; zero on feasible abundances.
fn negativity_value(s: &Array2<f64>) -> f64 {
    s.iter().map(|&v| if v < 0.0 { v * v } else { 0.0 }).sum()
}

/// Smoothed l_q total variation with circulant first differences along
/// both axes.
fn tv_value(s: &Array2<f64>, eps: f64, q: f64) -> f64 {
    let (rows, cols) = s.dim();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let dv = s[[i, j]] - s[[(i + 1) % rows, j]];
            let dh = s[[i, j]] - s[[i, (j + 1) % cols]];
            total += (dv * dv + eps).powf(q / 2.0) + (dh * dh + eps).powf(q / 2.0);
        }
    }
    total
}

fn tv_grad(s: &Array2<f64>, eps: f64, q: f64) -> Array2<f64> {
    let (rows, cols) = s.dim();
    let mut grad = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let i1 = (i + 1) % rows;
            let j1 = (j + 1) % cols;
            let dv = s[[i, j]] - s[[i1, j]];
            let wv = q * dv * (dv * dv + eps).powf(q / 2.0 - 1.0);
            grad[[i, j]] += wv;
            grad[[i1, j]] -= wv;
            let dh = s[[i, j]] - s[[i, j1]];
            let wh = q * dh * (dh * dh + eps).powf(q / 2.0 - 1.0);
            grad[[i, j]] += wh;
            grad[[i, j1]] -= wh;
        }
    }
    grad
}

fn block_list(r: usize) -> Vec<BlockId> {
    // All HSI blocks first, then the MSI blocks; materials nested inner.
    let mut blocks = Vec::with_capacity(5 * r);
    for rr in 0..r {
        blocks.push(BlockId::AH(rr));
    }
    for rr in 0..r {
        blocks.push(BlockId::BH(rr));
    }
    for rr in 0..r {
        blocks.push(BlockId::CH(rr));
    }
    for rr in 0..r {
        blocks.push(BlockId::AM(rr));
    }
    for rr in 0..r {
        blocks.push(BlockId::BM(rr));
    }
    blocks
}

/// Solves the coupled criterion by cyclic projected gradient steps with
/// per-block step-size memory. Deterministic given the seed.
pub fn solve_msr(
    y_h: &SpectralCube,
    y_m: &SpectralCube,
    p: &Array2<f64>,
    config: &MsrConfig,
) -> Result<MsrSolution> {
    let problem = MsrProblem::new(y_h, y_m, p, config)?;
    let mut best: Option<MsrSolution> = None;
    let mut last_err = None;
    let mut hit_tol = false;
    for attempt in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(attempt as u64));
        let factors = problem.init_factors(&mut rng);
        match solve_from(&problem, factors, config.max_iters) {
            Ok(solution) => {
                let value = *solution.objective_trace.last().unwrap();
                let better = best
                    .as_ref()
                    .map(|b| value < *b.objective_trace.last().unwrap())
                    .unwrap_or(true);
                if better {
                    best = Some(solution);
                }
                if let Some(tol) = config.obj_tol {
                    if value <= tol {
                        hit_tol = true;
                        break;
                    }
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    // Exploitation: keep descending from the best start when exploration
    // stopped short of the target objective.
    if !hit_tol && config.refine_iters > 0 {
        if let Some(candidate) = &best {
            if let Ok(refined) = solve_from(&problem, candidate.factors.clone(), config.refine_iters) {
                if refined.objective_trace.last().unwrap()
                    < candidate.objective_trace.last().unwrap()
                {
                    hit_tol = config
                        .obj_tol
                        .map(|t| *refined.objective_trace.last().unwrap() <= t)
                        .unwrap_or(false);
                    best = Some(refined);
                }
            }
        }
    }
    // Basin hops: kick the best iterate and redescend.
    if !hit_tol && config.hops > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let kick_sizes = [0.03, 0.08, 0.15, 0.05];
        for hop in 0..config.hops {
            let Some(candidate) = &best else { break };
            let mut kicked = candidate.factors.clone();
            perturb_factors(&mut kicked, kick_sizes[hop % kick_sizes.len()], &mut rng);
            if let Ok(sol) = solve_from(&problem, kicked, config.refine_iters.max(config.max_iters)) {
                let value = *sol.objective_trace.last().unwrap();
                if value < *candidate.objective_trace.last().unwrap() {
                    best = Some(sol);
                    if config.obj_tol.map(|t| value <= t).unwrap_or(false) {
                        break;
                    }
                }
            }
        }
    }
    match best {
        Some(solution) => Ok(solution),
        None => Err(last_err.unwrap_or_else(|| Error::Numeric("no start produced a solution".into()))),
    }
}

fn solve_from(problem: &MsrProblem, mut factors: MsrFactors, max_iters: usize) -> Result<MsrSolution> {
    let config = problem.config;
    let blocks = block_list(config.r);
    let mut steps = vec![1.0f64; blocks.len()];
    // Per-block extrapolation state: previous iterate and restart weight.
    let mut prev: Vec<Option<Array2<f64>>> = vec![None; blocks.len()];
    let mut momentum = vec![1.0f64; blocks.len()];

    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut objective = problem.objective(&factors).map_err(|e| nan_abort(e, 0, &[]))?;
    trace.push(objective);

    let mut converged = false;
    let mut iters_used = 0;
    for iter in 0..max_iters {
        let mut cache = ResidualCache::build(problem, &factors);
        for (b_idx, &block) in blocks.iter().enumerate() {
            let x = problem.block_value(&factors, block);

            let t_old = momentum[b_idx];
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t_old * t_old).sqrt());
            let omega = (t_old - 1.0) / t_new;

            let mut found = None;
            let mut extrapolation_failed = false;
            if let Some(xp) = &prev[b_idx] {
                if omega > 0.0 {
                    let x_ex = &x + &(&x - xp).mapv(|v| omega * v);
                    found = problem.line_search(
                        &factors, block, &cache, &x, &x_ex, steps[b_idx], 4,
                    );
                    extrapolation_failed = found.is_none();
                }
            }
            if found.is_none() {
                found = problem.line_search(&factors, block, &cache, &x, &x, steps[b_idx], 60);
            }
            momentum[b_idx] = if extrapolation_failed { 1.0 } else { t_new };

            match found {
                Some((cand, eta)) => {
                    steps[b_idx] = (eta * 2.0).min(1e6);
                    prev[b_idx] = Some(x);
                    update_cache_for(problem, &factors, block, &cand, &mut cache);
                    problem.set_block(&mut factors, block, cand);
                }
                None => {
                    steps[b_idx] = (steps[b_idx] * 0.5).max(1e-12);
                }
            }
        }

        let next = problem.objective(&factors).map_err(|e| nan_abort(e, iter + 1, &trace))?;
        trace.push(next);
        iters_used = iter + 1;
        let rel = (objective - next).abs() / objective.abs().max(1.0);
        objective = next;
        if let Some(tol) = config.obj_tol {
            if objective <= tol {
                converged = true;
                break;
            }
        }
        if rel < config.rel_tol {
            converged = true;
            break;
        }
    }

    let maps: Vec<Array2<f64>> = (0..config.r).map(|r| factors.s_h(r)).collect();
    let ends: Vec<Array1<f64>> = factors.c_h.clone();
    let mut hsi = AbundanceSet::new(maps, ends)?;
    hsi.clamp_nonnegative();
    let msi_abundances: Vec<Array2<f64>> = (0..config.r)
        .map(|r| factors.s_m(r).mapv(|v| v.max(0.0)))
        .collect();

    Ok(MsrSolution {
        hsi,
        msi_abundances,
        objective_trace: trace,
        converged,
        iters_used,
        factors,
    })
}

impl<'a> MsrProblem<'a> {
    /// Backtracking line search for one block. The candidate is a gradient
    /// step from `origin` (the current iterate or an extrapolated point);
    /// acceptance tests sufficient decrease against the current iterate.
    /// Returns the accepted block value and the accepted step.
    fn line_search(
        &self,
        f: &MsrFactors,
        block: BlockId,
        cache: &ResidualCache,
        x_cur: &Array2<f64>,
        origin: &Array2<f64>,
        eta0: f64,
        max_trials: usize,
    ) -> Option<(Array2<f64>, f64)> {
        let cfg = self.config;
        let (beta, c_armijo) = match cfg.step_rule {
            StepRule::Backtracking { beta, c } => (beta, c),
            StepRule::Fixed(eta) => {
                // Single unconditional step.
                let grad = self.gradient_cached(f, block, cache, Some(origin));
                let cand = gradient_step(origin, &grad, eta, matches!(block, BlockId::CH(_)));
                return Some((cand, eta));
            }
        };
        let grad = self.gradient_cached(f, block, cache, Some(origin));

        match block {
            BlockId::CH(r) => {
                // Projected candidates are piecewise in eta: evaluate the
                // two coupled fitting terms per trial in O(K).
                let c_cur = f.c_h[r].clone();
                let s_h = vec_map(&f.s_h(r));
                let s_m = vec_map(&f.s_m(r));
                let ets_h = cache.e_h.t().dot(&s_h); // K_H
                let ets_m = cache.e_m.t().dot(&s_m); // K_M
                let sh2 = s_h.dot(&s_h);
                let sm2 = s_m.dot(&s_m);
                let origin_c = origin.column(0).to_owned();
                let grad_c = grad.column(0).to_owned();
                let mut eta = eta0;
                for _ in 0..max_trials {
                    let cand = (&origin_c - &grad_c.mapv(|g| eta * g)).mapv(|v| v.max(0.0));
                    let dc = &cand - &c_cur;
                    let move2 = dc.dot(&dc);
                    if move2 == 0.0 {
                        return None;
                    }
                    let d_fit_h = 2.0 * dc.dot(&ets_h) + sh2 * dc.dot(&dc);
                    let dcm = self.p.dot(&dc);
                    let d_fit_m = 2.0 * dcm.dot(&ets_m) + sm2 * dcm.dot(&dcm);
                    let decrease = d_fit_h + d_fit_m;
                    if decrease <= -c_armijo / eta * move2 {
                        let k = cand.len();
                        return Some((cand.into_shape_with_order((k, 1)).unwrap(), eta));
                    }
                    eta *= beta;
                }
                None
            }
            _ => {
                // Factor blocks are unconstrained, so the abundance map is
                // affine in eta: s(eta) = s_origin - eta * d. All quadratic
                // terms reduce to scalars; only the nonsmooth regularizers
                // need the materialized map.
                let (r, is_h, is_a) = match block {
                    BlockId::AH(r) => (r, true, true),
                    BlockId::BH(r) => (r, true, false),
                    BlockId::AM(r) => (r, false, true),
                    BlockId::BM(r) => (r, false, false),
                    BlockId::CH(_) => unreachable!(),
                };
                let (a_cur, b_cur) = if is_h {
                    (&f.a_h[r], &f.b_h[r])
                } else {
                    (&f.a_m[r], &f.b_m[r])
                };
                let s_cur = a_cur.dot(&b_cur.t());
                let (s_origin, d_map) = if is_a {
                    (origin.dot(&b_cur.t()), grad.dot(&b_cur.t()))
                } else {
                    (a_cur.dot(&origin.t()), a_cur.dot(&grad.t()))
                };
                let u = &s_origin - &s_cur; // delta at eta = 0

                let (e, cvec, sum, rows) = if is_h {
                    (&cache.e_h, f.c_h[r].clone(), &cache.sum_h, self.dims_h.0)
                } else {
                    (&cache.e_m, self.p.dot(&f.c_h[r]), &cache.sum_m, self.dims_m.0)
                };
                let ec_vec = e.dot(&cvec);
                let ec = fold_vec(&ec_vec, u.nrows(), u.ncols());
                let c2 = cvec.dot(&cvec);
                let p_ue = (&u * &ec).sum();
                let p_de = (&d_map * &ec).sum();
                let p_uu = (&u * &u).sum();
                let p_ud = (&u * &d_map).sum();
                let p_dd = (&d_map * &d_map).sum();
                // sum-to-one deltas against T = sum - 1
                let (p_tu, p_td) = if cfg.lambda_sto > 0.0 {
                    let t = sum.mapv(|v| v - 1.0);
                    ((&t * &u).sum(), (&t * &d_map).sum())
                } else {
                    (0.0, 0.0)
                };
                // movement in factor space
                let v = origin - x_cur;
                let q_vv = (&v * &v).sum();
                let q_vg = (&v * &grad).sum();
                let q_gg = (&grad * &grad).sum();

                let needs_map = cfg.lambda_lr > 0.0 || cfg.lambda_neg > 0.0 || (!is_h && cfg.lambda_tv > 0.0);
                let base_extra = if needs_map {
                    let mut extra = 0.0;
                    if cfg.lambda_lr > 0.0 {
                        extra += cfg.lambda_lr * schatten_value(a_cur, b_cur, cfg.tau, cfg.p, rows);
                    }
                    if cfg.lambda_neg > 0.0 {
                        extra += cfg.lambda_neg * negativity_value(&s_cur);
                    }
                    if !is_h && cfg.lambda_tv > 0.0 {
                        extra += cfg.lambda_tv * tv_value(&s_cur, cfg.epsilon, cfg.q);
                    }
                    extra
                } else {
                    0.0
                };

                let mut eta = eta0;
                for _ in 0..max_trials {
                    let move2 = q_vv - 2.0 * eta * q_vg + eta * eta * q_gg;
                    if move2 <= 0.0 {
                        return None;
                    }
                    // delta(eta) = u - eta d
                    let d_uu = p_uu - 2.0 * eta * p_ud + eta * eta * p_dd;
                    let d_fit = 2.0 * (p_ue - eta * p_de) + c2 * d_uu;
                    let mut decrease = d_fit;
                    if cfg.lambda_sto > 0.0 {
                        decrease += cfg.lambda_sto * (2.0 * (p_tu - eta * p_td) + d_uu);
                    }
                    if needs_map {
                        let s_new = &s_origin - &d_map.mapv(|v| eta * v);
                        let mut extra = 0.0;
                        if cfg.lambda_lr > 0.0 {
                            let (a_new, b_new): (Array2<f64>, Array2<f64>) = if is_a {
                                ((origin - &grad.mapv(|g| eta * g)), b_cur.clone())
                            } else {
                                (a_cur.clone(), origin - &grad.mapv(|g| eta * g))
                            };
                            extra += cfg.lambda_lr * schatten_value(&a_new, &b_new, cfg.tau, cfg.p, rows);
                        }
                        if cfg.lambda_neg > 0.0 {
                            extra += cfg.lambda_neg * negativity_value(&s_new);
                        }
                        if !is_h && cfg.lambda_tv > 0.0 {
                            extra += cfg.lambda_tv * tv_value(&s_new, cfg.epsilon, cfg.q);
                        }
                        decrease += extra - base_extra;
                    }
                    if decrease <= -c_armijo / eta * move2 {
                        let cand = origin - &grad.mapv(|g| eta * g);
                        return Some((cand, eta));
                    }
                    eta *= beta;
                }
                None
            }
        }
    }
}

/// Relative Gaussian kick on every factor block.
fn perturb_factors<R: Rng>(f: &mut MsrFactors, sigma: f64, rng: &mut R) {
    let mut kick = |m: &mut Array2<f64>| {
        let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt() / (m.len() as f64).sqrt();
        let scale = scale.max(1e-6);
        m.mapv_inplace(|v| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            v + sigma * scale * g
        });
    };
    for m in f.a_h.iter_mut().chain(&mut f.b_h).chain(&mut f.a_m).chain(&mut f.b_m) {
        kick(m);
    }
    for c in f.c_h.iter_mut() {
        let scale = (c.dot(c) / c.len() as f64).sqrt().max(1e-6);
        c.mapv_inplace(|v| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (v + sigma * scale * g).max(0.0)
        });
    }
}

fn nan_abort(e: Error, iter: usize, trace: &[f64]) -> Error {
    let last = trace.last().copied().unwrap_or(f64::NAN);
    Error::Numeric(format!(
        "{e} at iteration {iter}; last finite objective {last:.6e} after {} iterations",
        trace.len().saturating_sub(1)
    ))
}

/// Gradient step; endmember blocks are projected onto the nonnegative
/// orthant, factor blocks stay free (abundance nonnegativity is the soft
/// `lambda_neg` term).
fn gradient_step(x: &Array2<f64>, grad: &Array2<f64>, eta: f64, project: bool) -> Array2<f64> {
    let mut out = x - &grad.mapv(|g| eta * g);
    if project {
        out.mapv_inplace(|v| v.max(0.0));
    }
    out
}

/// Re-assembles the multispectral-region SRI from the solved MSI
/// abundances and the shared hyperspectral endmembers.
pub fn reconstruct_msri(solution: &MsrSolution) -> Result<SpectralCube> {
    let ab = AbundanceSet::new(
        solution.msi_abundances.clone(),
        solution.hsi.endmembers().to_vec(),
    )?;
    crate::tensor::assemble_lmm(&ab)
}

/// Permutation matching result: `perm[r]` is the ground-truth material
/// assigned to estimated material `r`, with per-material relative
/// Frobenius errors after matching.
#[derive(Debug, Clone)]
pub struct PermutationMatch {
    pub perm: Vec<usize>,
    pub endmember_err: Vec<f64>,
    pub hsi_abundance_err: Vec<f64>,
    pub msi_abundance_err: Vec<f64>,
}

impl PermutationMatch {
    pub fn max_error(&self) -> f64 {
        self.endmember_err
            .iter()
            .chain(&self.hsi_abundance_err)
            .chain(&self.msi_abundance_err)
            .cloned()
            .fold(0.0, f64::max)
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Hungarian assignment maximizing total similarity (dense O(n^3)).
/// Returns `assign[row] = column`.
pub fn hungarian_max(similarity: &Array2<f64>) -> Vec<usize> {
    let n = similarity.nrows();
    assert_eq!(n, similarity.ncols());
    let big = similarity.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs())) + 1.0;
    let cost = similarity.mapv(|s| big - s);

    // Shortest augmenting path with potentials (1-based indexing).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut assignment = vec![0usize; n + 1]; // column -> row, 0 = free
    for i in 1..=n {
        assignment[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assignment[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assignment[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assignment[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assignment[j0] = assignment[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if assignment[j] >= 1 {
            row_to_col[assignment[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Matches estimated materials to ground truth by maximizing endmember
/// cosine similarity, then reports relative Frobenius errors per matched
/// material.
pub fn match_permutation(
    estimated: &MsrSolution,
    truth_hsi: &Ll1Model,
    truth_msi: &Ll1Model,
) -> Result<PermutationMatch> {
    let r = estimated.hsi.material_count();
    if truth_hsi.material_count() != r || truth_msi.material_count() != r {
        return Err(Error::Dimension(format!(
            "material counts differ: estimated {r}, truth {}/{}",
            truth_hsi.material_count(),
            truth_msi.material_count()
        )));
    }
    let sim = Array2::from_shape_fn((r, r), |(i, j)| {
        cosine(&estimated.hsi.endmembers()[i].to_owned(), &truth_hsi.factors()[j].c)
    });
    let perm = hungarian_max(&sim);

    let rel = |diff: f64, base: f64| diff.sqrt() / base.sqrt().max(1e-300);
    let mut endmember_err = Vec::with_capacity(r);
    let mut hsi_err = Vec::with_capacity(r);
    let mut msi_err = Vec::with_capacity(r);
    for i in 0..r {
        let t = perm[i];
        let c_t = &truth_hsi.factors()[t].c;
        let dc: f64 = estimated.hsi.endmembers()[i]
            .iter()
            .zip(c_t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        endmember_err.push(rel(dc, c_t.dot(c_t)));

        let s_t = truth_hsi.factors()[t].abundance();
        let ds: f64 = estimated.hsi.maps()[i]
            .iter()
            .zip(s_t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        hsi_err.push(rel(ds, frob2(&s_t)));

        let sm_t = truth_msi.factors()[t].abundance();
        let dm: f64 = estimated.msi_abundances[i]
            .iter()
            .zip(sm_t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        msi_err.push(rel(dm, frob2(&sm_t)));
    }
    Ok(PermutationMatch {
        perm,
        endmember_err,
        hsi_abundance_err: hsi_err,
        msi_abundance_err: msi_err,
    })
}

/// Hyperparameter grid for the three regularization weights.
#[derive(Debug, Clone)]
pub struct LambdaGrid {
    pub lr: Vec<f64>,
    pub sto: Vec<f64>,
    pub tv: Vec<f64>,
}

impl LambdaGrid {
    /// Five log-uniform points per weight in `[1e-4, 1e-2]`.
    pub fn default_grid() -> Self {
        let points: Vec<f64> = (0..5).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect();
        Self {
            lr: points.clone(),
            sto: points.clone(),
            tv: points,
        }
    }
}

/// Score of one tuning cell.
#[derive(Debug, Clone)]
pub struct TuneCell {
    pub lambda_lr: f64,
    pub lambda_sto: f64,
    pub lambda_tv: f64,
    pub observed_psnr: f64,
}

/// Grid-searches the regularization weights, scoring each cell by the
/// summed PSNR of the re-synthesized observations against the observed
/// data (no ground truth involved). Ties break toward the smallest
/// `(lr, sto, tv)` vector lexicographically. Cells run in parallel; the
/// selection is order-independent.
pub fn tune_lambdas(
    y_h: &SpectralCube,
    y_m: &SpectralCube,
    p: &Array2<f64>,
    grid: &LambdaGrid,
    base: &MsrConfig,
) -> Result<(MsrConfig, Vec<TuneCell>)> {
    if grid.lr.is_empty() || grid.sto.is_empty() || grid.tv.is_empty() {
        return Err(Error::Tuning("empty grid".into()));
    }
    let mut cells = Vec::new();
    for &lr in &grid.lr {
        for &sto in &grid.sto {
            for &tv in &grid.tv {
                cells.push((lr, sto, tv));
            }
        }
    }

    let results: Vec<std::result::Result<TuneCell, String>> = cells
        .par_iter()
        .map(|&(lr, sto, tv)| {
            let mut config = base.clone();
            config.lambda_lr = lr;
            config.lambda_sto = sto;
            config.lambda_tv = tv;
            let solution = solve_msr(y_h, y_m, p, &config)
                .map_err(|e| format!("lr={lr:.1e} sto={sto:.1e} tv={tv:.1e}: {e}"))?;
            observed_psnr(y_h, y_m, p, &solution)
                .map(|psnr| TuneCell {
                    lambda_lr: lr,
                    lambda_sto: sto,
                    lambda_tv: tv,
                    observed_psnr: psnr,
                })
                .map_err(|e| format!("lr={lr:.1e} sto={sto:.1e} tv={tv:.1e}: {e}"))
        })
        .collect();

    let mut table = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(cell) => table.push(cell),
            Err(e) => failures.push(e),
        }
    }
    if table.is_empty() {
        return Err(Error::Tuning(format!(
            "all {} grid points failed: {}",
            cells.len(),
            failures.join("; ")
        )));
    }

    let best = table
        .iter()
        .max_by(|a, b| {
            a.observed_psnr
                .partial_cmp(&b.observed_psnr)
                .unwrap()
                .then_with(|| {
                    // On exact PSNR ties prefer the smaller lambda vector,
                    // so compare the keys reversed.
                    let ka = (b.lambda_lr, b.lambda_sto, b.lambda_tv);
                    let kb = (a.lambda_lr, a.lambda_sto, a.lambda_tv);
                    ka.partial_cmp(&kb).unwrap()
                })
        })
        .unwrap();

    let mut config = base.clone();
    config.lambda_lr = best.lambda_lr;
    config.lambda_sto = best.lambda_sto;
    config.lambda_tv = best.lambda_tv;
    Ok((config, table))
}

/// Summed PSNR of the re-synthesized observations against the observed
/// pair, each with its own reference peak.
pub fn observed_psnr(
    y_h: &SpectralCube,
    y_m: &SpectralCube,
    p: &Array2<f64>,
    solution: &MsrSolution,
) -> Result<f64> {
    let est_h = crate::tensor::assemble_lmm(&solution.hsi)?;
    let msi_ends: Vec<Array1<f64>> = solution.hsi.endmembers().iter().map(|c| p.dot(c)).collect();
    let est_m = crate::tensor::assemble_lmm(&AbundanceSet::new(
        solution.msi_abundances.clone(),
        msi_ends,
    )?)?;
    let peak_h = y_h.max_value().max(1e-12);
    let peak_m = y_m.max_value().max(1e-12);
    Ok(crate::metrics::psnr(y_h, &est_h, peak_h)? + crate::metrics::psnr(y_m, &est_m, peak_m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_ll1_scene, SceneDims};
    use crate::tensor::{assemble_model, factors_to_abundances};
    use ndarray::arr2;

    fn small_scene(seed: u64) -> (SpectralCube, SpectralCube, Array2<f64>, crate::synth::SynthScene) {
        let dims = SceneDims { i_h: 6, j_h: 6, k_h: 8, i_m: 8, j_m: 8, k_m: 3 };
        let scene = synth_ll1_scene(seed, dims, 2, 2, 2).unwrap();
        let y_h = assemble_model(&scene.hsi_model);
        let y_m = assemble_model(&scene.msi_model);
        let p = scene.degradation.p.clone();
        (y_h, y_m, p, scene)
    }

    #[test]
    fn objective_zero_at_zero() {
        let zero_h = SpectralCube::zeros(6, 6, 8);
        let zero_m = SpectralCube::zeros(8, 8, 3);
        let p = crate::degrade::build_pm(8, 3).unwrap();
        let mut config = MsrConfig::new(2, 2, 2);
        config.lambda_lr = 0.0;
        config.lambda_sto = 0.0;
        config.lambda_tv = 0.0;
        let problem = MsrProblem::new(&zero_h, &zero_m, &p, &config).unwrap();
        let factors = MsrFactors {
            a_h: vec![Array2::zeros((6, 2)); 2],
            b_h: vec![Array2::zeros((6, 2)); 2],
            c_h: vec![Array1::zeros(8); 2],
            a_m: vec![Array2::zeros((8, 2)); 2],
            b_m: vec![Array2::zeros((8, 2)); 2],
        };
        assert_eq!(problem.objective(&factors).unwrap(), 0.0);
    }

    #[test]
    fn schatten_identity_matches_eigen_oracle() {
        // S = I (2x2), tau = 1, p = 0.5: eigenvalues of S S^T + I are {2, 2},
        // so the term is 2 * 2^(1/4).
        let a = Array2::<f64>::eye(2);
        let b = Array2::<f64>::eye(2);
        let v = schatten_value(&a, &b, 1.0, 0.5, 2);
        assert!((v - 2.0 * 2f64.powf(0.25)).abs() < 1e-10, "got {v}");
        assert!((v - 2.37841423).abs() < 1e-6);
    }

    #[test]
    fn schatten_value_matches_dense_eig() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((7, 3), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>());
        let s = a.dot(&b.t());
        let dense = {
            let m = s.dot(&s.t()) + &(Array2::<f64>::eye(7) * 0.8);
            crate::linalg::trace_power(&m, 0.25, 0.0)
        };
        let fast = schatten_value(&a, &b, 0.8, 0.5, 7);
        assert!((dense - fast).abs() < 1e-9, "dense {dense} vs fast {fast}");
    }

    #[test]
    fn tv_constant_map_is_floor_only() {
        let s = Array2::from_elem((5, 4), 0.7);
        let eps: f64 = 1e-3;
        let q = 0.5;
        let v = tv_value(&s, eps, q);
        let expect = 5.0 * 4.0 * 2.0 * eps.powf(q / 2.0);
        assert!((v - expect).abs() < 1e-12);
    }

    fn finite_diff_block(
        problem: &MsrProblem,
        factors: &MsrFactors,
        block: BlockId,
        h: f64,
    ) -> Array2<f64> {
        let x = problem.block_value(factors, block);
        let mut grad = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = factors.clone();
            let mut xm = x.clone();
            xm[[i, j]] += h;
            problem.set_block(&mut plus, block, xm.clone());
            let fp = problem.objective(&plus).unwrap();
            let mut minus = factors.clone();
            xm[[i, j]] -= 2.0 * h;
            problem.set_block(&mut minus, block, xm);
            let fm = problem.objective(&minus).unwrap();
            grad[[i, j]] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (y_h, y_m, p, _) = small_scene(1);
        let mut config = MsrConfig::new(2, 2, 2);
        config.lambda_lr = 5e-3;
        config.lambda_sto = 2e-2;
        config.lambda_tv = 1e-3;
        config.seed = 7;
        let problem = MsrProblem::new(&y_h, &y_m, &p, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        for point in 0..10 {
            let factors = problem.init_factors(&mut rng);
            let blocks = [
                BlockId::AH(point % 2),
                BlockId::BH((point + 1) % 2),
                BlockId::CH(point % 2),
                BlockId::AM((point + 1) % 2),
                BlockId::BM(point % 2),
            ];
            for block in blocks {
                let analytic = problem.gradient_block(&factors, block);
                let numeric = finite_diff_block(&problem, &factors, block, 1e-5);
                let denom = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
                let diff = (&analytic - &numeric).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(
                    diff / denom <= 1e-4,
                    "block {block:?} point {point}: rel err {}",
                    diff / denom
                );
            }
        }
    }

    #[test]
    fn partial_objective_tracks_full_objective() {
        // The line-search surrogate must differ from the full objective by
        // a block-independent constant.
        let (y_h, y_m, p, _) = small_scene(8);
        let mut config = MsrConfig::new(2, 2, 2);
        config.lambda_lr = 3e-3;
        config.lambda_sto = 1e-2;
        config.lambda_tv = 2e-3;
        let problem = MsrProblem::new(&y_h, &y_m, &p, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let factors = problem.init_factors(&mut rng);
        let cache = ResidualCache::build(&problem, &factors);

        for block in block_list(2) {
            let x = problem.block_value(&factors, block);
            let base_partial = problem.partial_objective(&factors, block, &x, &cache);
            let base_full = problem.objective(&factors).unwrap();
            // Perturb the block and compare deltas.
            let cand = x.mapv(|v| v * 1.07 + 0.01);
            let cand_partial = problem.partial_objective(&factors, block, &cand, &cache);
            let mut moved = factors.clone();
            problem.set_block(&mut moved, block, cand);
            let cand_full = problem.objective(&moved).unwrap();
            let delta_full = cand_full - base_full;
            let delta_partial = cand_partial - base_partial;
            assert!(
                (delta_full - delta_partial).abs() <= 1e-8 * delta_full.abs().max(1.0),
                "block {block:?}: {delta_full} vs {delta_partial}"
            );
        }
    }

    #[test]
    fn gradient_vanishes_at_ground_truth_without_regularizers() {
        let (y_h, y_m, p, scene) = small_scene(2);
        let mut config = MsrConfig::new(2, 2, 2);
        config.lambda_lr = 0.0;
        config.lambda_sto = 0.0;
        config.lambda_tv = 0.0;
        config.lambda_neg = 0.0;
        let problem = MsrProblem::new(&y_h, &y_m, &p, &config).unwrap();
        let factors = MsrFactors {
            a_h: scene.hsi_model.factors().iter().map(|f| f.a.clone()).collect(),
            b_h: scene.hsi_model.factors().iter().map(|f| f.b.clone()).collect(),
            c_h: scene.hsi_model.factors().iter().map(|f| f.c.clone()).collect(),
            a_m: scene.msi_model.factors().iter().map(|f| f.a.clone()).collect(),
            b_m: scene.msi_model.factors().iter().map(|f| f.b.clone()).collect(),
        };
        for block in block_list(2) {
            let g = problem.gradient_block(&factors, block);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-8, "block {block:?} gradient norm {norm}");
        }
    }

    #[test]
    fn endmember_gradient_backpropagates_response() {
        // Zeroing the MSI residual must remove the response-adjoint term.
        let (y_h, y_m, p, _) = small_scene(3);
        let mut config = MsrConfig::new(2, 2, 2);
        config.lambda_lr = 0.0;
        config.lambda_sto = 0.0;
        config.lambda_tv = 0.0;
        let problem = MsrProblem::new(&y_h, &y_m, &p, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let factors = problem.init_factors(&mut rng);

        let full = problem.gradient_block(&factors, BlockId::CH(0));

        // A problem whose MSI observation matches the factors exactly, so
        // its MSI residual vanishes.
        let maps: Vec<Array2<f64>> = (0..2).map(|r| factors.s_m(r)).collect();
        let ends: Vec<Array1<f64>> = factors.c_h.iter().map(|c| p.dot(c)).collect();
        let y_m_exact =
            crate::tensor::assemble_lmm(&AbundanceSet::new(maps, ends).unwrap()).unwrap();
        let problem2 = MsrProblem::new(&y_h, &y_m_exact, &p, &config).unwrap();
        let hsi_only = problem2.gradient_block(&factors, BlockId::CH(0));

        let e_m = problem.residual_m(&factors);
        let s_m = vec_map(&factors.s_m(0));
        let expected_diff = p.t().dot(&e_m.t().dot(&s_m)).mapv(|v| 2.0 * v);
        for i in 0..full.nrows() {
            let diff = full[[i, 0]] - hsi_only[[i, 0]];
            assert!((diff - expected_diff[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_data_zero_lambdas_reaches_zero() {
        let zero_h = SpectralCube::zeros(6, 6, 8);
        let zero_m = SpectralCube::zeros(8, 8, 3);
        let p = crate::degrade::build_pm(8, 3).unwrap();
        let mut config = MsrConfig::new(2, 2, 2);
        config.lambda_lr = 0.0;
        config.lambda_sto = 0.0;
        config.lambda_tv = 0.0;
        config.lambda_neg = 0.0;
        config.max_iters = 300;
        let solution = solve_msr(&zero_h, &zero_m, &p, &config).unwrap();
        let last = *solution.objective_trace.last().unwrap();
        assert!(last < 1e-12, "objective should reach zero, got {last}");
    }

    #[test]
    fn backtracking_trace_is_monotone() {
        let (y_h, y_m, p, _) = small_scene(4);
        let mut config = MsrConfig::new(2, 2, 2);
        config.max_iters = 60;
        let solution = solve_msr(&y_h, &y_m, &p, &config).unwrap();
        for w in solution.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trace must be non-increasing: {} -> {}", w[0], w[1]);
        }
        // Endmembers are projected, reported abundances clamped.
        for c in &solution.factors.c_h {
            assert!(c.iter().all(|&v| v >= 0.0));
        }
        for m in solution.hsi.maps().iter().chain(&solution.msi_abundances) {
            assert!(m.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn solver_is_deterministic_per_seed() {
        let (y_h, y_m, p, _) = small_scene(10);
        let mut config = MsrConfig::new(2, 2, 2);
        config.max_iters = 25;
        config.seed = 42;
        let s1 = solve_msr(&y_h, &y_m, &p, &config).unwrap();
        let s2 = solve_msr(&y_h, &y_m, &p, &config).unwrap();
        assert_eq!(s1.objective_trace, s2.objective_trace);
        assert_eq!(s1.hsi.maps()[0], s2.hsi.maps()[0]);
    }

    fn empty_factors() -> MsrFactors {
        MsrFactors { a_h: vec![], b_h: vec![], c_h: vec![], a_m: vec![], b_m: vec![] }
    }

    #[test]
    fn reconstruction_from_truth_is_exact() {
        let (_, _, _, scene) = small_scene(5);
        let hsi_ab = factors_to_abundances(&scene.hsi_model);
        let solution = MsrSolution {
            hsi: hsi_ab,
            msi_abundances: scene.msi_model.factors().iter().map(|f| f.abundance()).collect(),
            objective_trace: vec![0.0],
            converged: true,
            iters_used: 0,
            factors: empty_factors(),
        };
        let rec = reconstruct_msri(&solution).unwrap();
        // Ground-truth MSI-region SRI: MSI abundances with HSI endmembers.
        let truth = crate::tensor::assemble_lmm(
            &AbundanceSet::new(
                scene.msi_model.factors().iter().map(|f| f.abundance()).collect(),
                scene.hsi_model.factors().iter().map(|f| f.c.clone()).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        assert!(rec.mse(&truth).unwrap() < 1e-24);

        // Swapping matched material pairs leaves the assembled sum unchanged.
        let swapped = MsrSolution {
            hsi: AbundanceSet::new(
                vec![solution.hsi.maps()[1].clone(), solution.hsi.maps()[0].clone()],
                vec![solution.hsi.endmembers()[1].clone(), solution.hsi.endmembers()[0].clone()],
            )
            .unwrap(),
            msi_abundances: vec![
                solution.msi_abundances[1].clone(),
                solution.msi_abundances[0].clone(),
            ],
            objective_trace: vec![0.0],
            converged: true,
            iters_used: 0,
            factors: empty_factors(),
        };
        let rec2 = reconstruct_msri(&swapped).unwrap();
        assert!(rec.mse(&rec2).unwrap() < 1e-24);
    }

    #[test]
    fn hungarian_identity_and_swap() {
        let sim = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(hungarian_max(&sim), vec![0, 1]);
        let sim = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(hungarian_max(&sim), vec![1, 0]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_noisy_endmembers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(12, |_| rng.random::<f64>()))
            .collect();
        let order = [2usize, 0, 3, 1];
        let noisy: Vec<Array1<f64>> = order
            .iter()
            .map(|&t| truth[t].mapv(|v| v + 0.01 * (rng.random::<f64>() - 0.5)))
            .collect();
        let sim = Array2::from_shape_fn((4, 4), |(i, j)| cosine(&noisy[i], &truth[j]));
        let assignment = hungarian_max(&sim);

        // Exhaustive search over all 4! permutations.
        let mut best = (f64::NEG_INFINITY, vec![0usize; 4]);
        let mut perm = [0usize, 1, 2, 3];
        heap_permutations(&mut perm, 4, &mut |p| {
            let score: f64 = p.iter().enumerate().map(|(i, &j)| sim[[i, j]]).sum();
            if score > best.0 {
                best = (score, p.to_vec());
            }
        });
        assert_eq!(assignment, best.1);
        assert_eq!(assignment, order.to_vec());
    }

    fn heap_permutations(arr: &mut [usize; 4], k: usize, visit: &mut impl FnMut(&[usize; 4])) {
        if k == 1 {
            visit(arr);
            return;
        }
        for i in 0..k {
            heap_permutations(arr, k - 1, visit);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn identity_match_has_zero_errors() {
        let (_, _, _, scene) = small_scene(12);
        let solution = MsrSolution {
            hsi: factors_to_abundances(&scene.hsi_model),
            msi_abundances: scene.msi_model.factors().iter().map(|f| f.abundance()).collect(),
            objective_trace: vec![0.0],
            converged: true,
            iters_used: 0,
            factors: empty_factors(),
        };
        let m = match_permutation(&solution, &scene.hsi_model, &scene.msi_model).unwrap();
        assert_eq!(m.perm, vec![0, 1]);
        assert!(m.max_error() < 1e-12);

        // Swapped materials recover the swapping permutation with zero error.
        let swapped = MsrSolution {
            hsi: AbundanceSet::new(
                vec![solution.hsi.maps()[1].clone(), solution.hsi.maps()[0].clone()],
                vec![solution.hsi.endmembers()[1].clone(), solution.hsi.endmembers()[0].clone()],
            )
            .unwrap(),
            msi_abundances: vec![
                solution.msi_abundances[1].clone(),
                solution.msi_abundances[0].clone(),
            ],
            objective_trace: vec![0.0],
            converged: true,
            iters_used: 0,
            factors: empty_factors(),
        };
        let m = match_permutation(&swapped, &scene.hsi_model, &scene.msi_model).unwrap();
        assert_eq!(m.perm, vec![1, 0]);
        assert!(m.max_error() < 1e-12);
    }

    #[test]
    fn tune_single_point_returns_it() {
        let (y_h, y_m, p, _) = small_scene(6);
        let grid = LambdaGrid { lr: vec![1e-3], sto: vec![1e-2], tv: vec![1e-4] };
        let mut base = MsrConfig::new(2, 2, 2);
        base.max_iters = 30;
        let (config, table) = tune_lambdas(&y_h, &y_m, &p, &grid, &base).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(config.lambda_lr, 1e-3);
        assert_eq!(config.lambda_sto, 1e-2);
        assert_eq!(config.lambda_tv, 1e-4);
    }

    #[test]
    fn tune_prefers_higher_observed_psnr() {
        let (y_h, y_m, p, _) = small_scene(7);
        // A huge TV weight wrecks the fit; the small one must win.
        let grid = LambdaGrid { lr: vec![1e-4], sto: vec![1e-3], tv: vec![1e-4, 50.0] };
        let mut base = MsrConfig::new(2, 2, 2);
        base.max_iters = 60;
        let (config, table) = tune_lambdas(&y_h, &y_m, &p, &grid, &base).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(config.lambda_tv, 1e-4);
        let exhaustive_best = table.iter().map(|c| c.observed_psnr).fold(f64::NEG_INFINITY, f64::max);
        let selected = table
            .iter()
            .find(|c| c.lambda_tv == config.lambda_tv)
            .unwrap()
            .observed_psnr;
        assert_eq!(selected, exhaustive_best);
    }
}
