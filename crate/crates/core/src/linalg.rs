//! Dense double-precision helpers shared by prompt sampling and the oracles.
//!
//! Symmetric positive-definite systems go through a hand-rolled lower
//! Cholesky factorization. The pseudo-inverse is the only place an SVD is
//! used.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Largest absolute asymmetry `|a_ij - a_ji|`, with its position.
pub fn max_asymmetry(a: &DMatrix<f64>) -> (usize, usize, f64) {
    let mut worst = (0, 0, 0.0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            let gap = (a[(i, j)] - a[(j, i)]).abs();
            if gap > worst.2 {
                worst = (i, j, gap);
            }
        }
    }
    worst
}

pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let (i, j, gap) = max_asymmetry(a);
    if gap > tol {
        return Err(LinalgError::NotSymmetric { i, j, gap });
    }
    Ok(())
}

/// Lower-triangular `L` with `a = L Lᵀ`. Only the lower triangle of `a` is read.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for p in 0..j {
            diag -= l[(j, p)] * l[(j, p)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` for every column of `b`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(LinalgError::Dimension(format!(
            "factor is {n}x{n}, rhs has {} rows",
            b.nrows()
        )));
    }
    let mut x = b.clone();
    for c in 0..x.ncols() {
        // forward: L z = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for p in 0..i {
                s -= l[(i, p)] * x[(p, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = z
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for p in (i + 1)..n {
                s -= l[(p, i)] * x[(p, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

pub fn cholesky_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = cholesky_solve(l, &m)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let l = cholesky_lower(a)?;
    let mut inv = cholesky_solve(&l, &DMatrix::identity(a.nrows(), a.nrows()))?;
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Singular values below this are treated as zero when forming `A⁺`:
/// `eps · max(m, n) · s_max`.
pub fn pinv_cutoff(rows: usize, cols: usize, s_max: f64) -> f64 {
    f64::EPSILON * rows.max(cols) as f64 * s_max
}

/// Moore-Penrose pseudo-inverse via SVD. Shape `n x m` for an `m x n` input.
/// An empty matrix maps to the zero matrix of the transposed shape.
///
/// The decomposition comes from `faer`; nalgebra's SVD loses accuracy on
/// rank-deficient inputs, which are exactly the ones this has to handle.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let mat = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let svd = mat.thin_svd().expect("svd of a finite matrix converges");
    let (u, v) = (svd.U(), svd.V());
    let s = svd.S().column_vector();
    let s_max = (0..s.nrows()).map(|r| s[r]).fold(0.0, f64::max);
    let tau = pinv_cutoff(m, n, s_max);
    let mut out = DMatrix::<f64>::zeros(n, m);
    for r in 0..s.nrows() {
        let sr = s[r];
        if sr <= tau || sr == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = v[(i, r)] / sr;
            if vi == 0.0 {
                continue;
            }
            for j in 0..m {
                out[(i, j)] += vi * u[(j, r)];
            }
        }
    }
    out
}
