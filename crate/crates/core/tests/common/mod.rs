//! Reference computations that share no code with the library's oracles.

#![allow(dead_code)]

use icl_core::prompting::Prefix;
use icl_core::rng::RandomStream;
use nalgebra::{DMatrix, DVector};

/// Posterior mean of a two-dimensional task by composite Simpson quadrature
/// of the unnormalized posterior on `[-r, r]²` with `n` (even) intervals.
pub fn simpson_posterior_mean(x: &[[f64; 2]], y: &[f64], sigma: f64, prior_precision: [[f64; 2]; 2], r: f64, n: usize) -> [f64; 2] {
    assert!(n.is_multiple_of(2));
    let h = 2.0 * r / n as f64;
    let weight = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let log_post = |b: [f64; 2]| -> f64 {
        let mut s = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            let e = yi - xi[0] * b[0] - xi[1] * b[1];
            s += e * e;
        }
        let p = &prior_precision;
        let q = b[0] * (p[0][0] * b[0] + p[0][1] * b[1]) + b[1] * (p[1][0] * b[0] + p[1][1] * b[1]);
        -s / (2.0 * sigma * sigma) - q / 2.0
    };
    let mut peak = f64::NEG_INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            peak = peak.max(log_post([-r + i as f64 * h, -r + j as f64 * h]));
        }
    }
    let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        for j in 0..=n {
            let b = [-r + i as f64 * h, -r + j as f64 * h];
            let w = weight(i) * weight(j) * (log_post(b) - peak).exp();
            z += w;
            m0 += w * b[0];
            m1 += w * b[1];
        }
    }
    [m0 / z, m1 / z]
}

/// Minimizes `‖y − Xb‖² + σ² bᵀPb` by exact coordinate-wise minimization
/// (Gauss-Seidel sweeps) until no coordinate moves by more than `tol`.
pub fn coordinate_descent_ridge(x: &[Vec<f64>], y: &[f64], sigma: f64, precision: &[Vec<f64>], tol: f64) -> Vec<f64> {
    let d = precision.len();
    let s2 = sigma * sigma;
    let mut b = vec![0.0; d];
    for _sweep in 0..1_000_000 {
        let mut largest: f64 = 0.0;
        for i in 0..d {
            // gradient terms excluding coordinate i
            let mut num = 0.0;
            let mut den = s2 * precision[i][i];
            for (row, yr) in x.iter().zip(y) {
                let mut fit = 0.0;
                for c in 0..d {
                    if c != i {
                        fit += row[c] * b[c];
                    }
                }
                num += row[i] * (yr - fit);
                den += row[i] * row[i];
            }
            for c in 0..d {
                if c != i {
                    num -= s2 * precision[i][c] * b[c];
                }
            }
            let new = num / den;
            largest = largest.max((new - b[i]).abs());
            b[i] = new;
        }
        if largest < tol {
            break;
        }
    }
    b
}

/// Orthonormal columns spanning random directions, by twice-applied
/// modified Gram-Schmidt.
pub fn random_orthonormal(s: &mut RandomStream, n: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    cols
}

/// `X = Σ_r s_r u_r v_rᵀ` with `rank` singular values in `[0.5, 2]` and its
/// pseudo-inverse `Σ_r v_r u_rᵀ / s_r`.
pub fn matrix_with_known_pinv(s: &mut RandomStream, rows: usize, cols: usize, rank: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let u = random_orthonormal(s, rows);
    let v = random_orthonormal(s, cols);
    let mut x = DMatrix::zeros(rows, cols);
    let mut pinv = DMatrix::zeros(cols, rows);
    for r in 0..rank {
        let sv = 0.5 + 1.5 * s.uniform();
        for i in 0..rows {
            for j in 0..cols {
                x[(i, j)] += sv * u[r][i] * v[r][j];
                pinv[(j, i)] += u[r][i] * v[r][j] / sv;
            }
        }
    }
    (x, pinv)
}

pub fn prefix_from(x: &[Vec<f64>], y: &[f64], query: &[f64]) -> Prefix {
    let d = query.len();
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    Prefix {
        context_x: DMatrix::from_row_slice(x.len(), d, &flat),
        context_y: DVector::from_column_slice(y),
        query: DVector::from_column_slice(query),
        j: x.len() + 1,
    }
}

/// A random symmetric positive-definite matrix as rows, with its inverse.
pub fn random_spd_rows(s: &mut RandomStream, d: usize) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    let a = DMatrix::from_fn(d, d, |_, _| s.normal());
    let m = (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.5;
    let m = (&m + m.transpose()) * 0.5;
    let rows = (0..d).map(|i| (0..d).map(|j| m[(i, j)]).collect()).collect();
    (rows, m)
}
