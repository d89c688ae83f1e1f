//! Small dense linear-algebra kernels: cyclic Jacobi eigendecomposition,
//! truncated factorization, and symmetric matrix powers.
//!
//! Everything here targets matrices up to a few hundred rows, which covers
//! abundance Gram matrices; no external LAPACK is involved, so results are
//! deterministic across platforms.

use ndarray::{Array1, Array2};
use rand::Rng;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted in
/// descending order and eigenvectors in the matching columns, so
/// `a = V diag(w) V^T` up to the sweep tolerance.
pub fn symmetric_eig(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);

    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let w = Array1::from_iter(idx.iter().map(|&i| m[[i, i]]));
    let mut vs = Array2::<f64>::zeros((n, n));
    for (to, &from) in idx.iter().enumerate() {
        vs.column_mut(to).assign(&v.column(from));
    }
    (w, vs)
}

/// Singular values of `s`, descending, via the smaller Gram matrix.
pub fn singular_values(s: &Array2<f64>) -> Array1<f64> {
    let gram = if s.nrows() <= s.ncols() {
        s.dot(&s.t())
    } else {
        s.t().dot(s)
    };
    let (w, _) = symmetric_eig(&gram);
    w.mapv(|x| x.max(0.0).sqrt())
}

/// Best rank-`l` factorization `s ~= a b^T` with `a: m x l`, `b: n x l`,
/// columns balanced to equal norms.
pub fn truncated_factor(s: &Array2<f64>, l: usize) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = s.dim();
    let l = l.min(m).min(n);
    // Right singular vectors from the n x n Gram (or left from m x m).
    let (a, b) = if n <= m {
        let (_, v) = symmetric_eig(&s.t().dot(s));
        let v_l = v.slice(ndarray::s![.., ..l]).to_owned();
        (s.dot(&v_l), v_l)
    } else {
        let (_, u) = symmetric_eig(&s.dot(&s.t()));
        let u_l = u.slice(ndarray::s![.., ..l]).to_owned();
        (u_l.clone(), s.t().dot(&u_l))
    };
    balance_columns(a, b)
}

fn balance_columns(mut a: Array2<f64>, mut b: Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    for l in 0..a.ncols() {
        let na = a.column(l).mapv(|x| x * x).sum().sqrt();
        let nb = b.column(l).mapv(|x| x * x).sum().sqrt();
        if na > 0.0 && nb > 0.0 {
            let scale = (nb / na).sqrt();
            a.column_mut(l).mapv_inplace(|x| x * scale);
            b.column_mut(l).mapv_inplace(|x| x / scale);
        }
    }
    (a, b)
}

/// `m^power` for symmetric positive semi-definite `m`, via eigenvalues.
/// Eigenvalues are floored at `floor` before exponentiation.
pub fn symmetric_power(m: &Array2<f64>, power: f64, floor: f64) -> Array2<f64> {
    let (w, v) = symmetric_eig(m);
    let wp = w.mapv(|x| x.max(floor).powf(power));
    let mut scaled = v.clone();
    for (j, &p) in wp.iter().enumerate() {
        scaled.column_mut(j).mapv_inplace(|x| x * p);
    }
    scaled.dot(&v.t())
}

/// Sum of `max(eig, floor)^power` over the spectrum of symmetric psd `m`.
pub fn trace_power(m: &Array2<f64>, power: f64, floor: f64) -> f64 {
    let (w, _) = symmetric_eig(m);
    w.iter().map(|&x| x.max(floor).powf(power)).sum()
}

/// Random orthogonal `n x n` matrix from QR of a Gaussian draw
/// (modified Gram-Schmidt, diagonal sign-fixed).
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Array2<f64> {
    let gauss = Array2::from_shape_fn((n, n), |_| {
        // Box-Muller from two uniforms keeps the dependency surface small.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let mut q = gauss;
    for j in 0..n {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let col_k = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &col_k);
        }
        let norm = q.column(j).mapv(|x| x * x).sum().sqrt();
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    q
}
