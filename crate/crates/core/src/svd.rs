//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Targets the small `C × |support|` matrices of per-sample BN statistics.
//! Columns of the working copy are rotated pairwise until mutually
//! orthogonal; column norms are the singular values and the accumulated
//! rotations form `V`. Wide inputs are handled through the transpose.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};

const MAX_SWEEPS: usize = 100;

/// `a ≈ u · diag(s) · vᵀ` with `u: rows×r`, `v: cols×r`, `r = min(rows, cols)`.
/// Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

impl Svd {
    pub fn rank_bound(&self) -> usize {
        self.s.len()
    }

    /// Column `j` of `U`.
    pub fn u_col(&self, j: usize) -> Vec<f64> {
        let r = self.s.len();
        (0..self.rows).map(|i| self.u[i * r + j]).collect()
    }

    /// Number of singular values above `rel_tol · s[0]`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        match self.s.first() {
            Some(&top) if top > 0.0 => self.s.iter().take_while(|&&x| x > rel_tol * top).count(),
            _ => 0,
        }
    }

    /// Reassembles `U · diag(s) · Vᵀ`, optionally truncated to the first `keep` triples.
    pub fn reconstruct(&self, keep: usize) -> Vec<f64> {
        let r = self.s.len();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] =
                    (0..keep.min(r)).map(|t| self.u[i * r + t] * self.s[t] * self.v[j * r + t]).sum();
            }
        }
        out
    }
}

/// Thin SVD of a row-major `rows × cols` matrix.
///
/// Singular values are nonincreasing; each column of `U` has a nonnegative
/// entry of largest magnitude, which makes the factorization deterministic.
pub fn svd_thin(a: &[f64], rows: usize, cols: usize) -> Result<Svd> {
    ensure!(rows > 0 && cols > 0, "svd of an empty {}x{} matrix", rows, cols);
    ensure!(a.len() == rows * cols, "svd expects {} entries, got {}", rows * cols, a.len());
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericDomain("svd input has non-finite entries".into()));
    }
    let mut svd = if rows >= cols {
        tall(a, rows, cols)
    } else {
        let mut at = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                at[j * rows + i] = a[i * cols + j];
            }
        }
        let t = tall(&at, cols, rows);
        Svd { rows, cols, u: t.v, s: t.s, v: t.u }
    };
    fix_signs(&mut svd);
    Ok(svd)
}

/// Hestenes iteration for `rows >= cols`.
fn tall(a: &[f64], rows: usize, cols: usize) -> Svd {
    let mut w: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a[i * cols + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| libm::sqrt(col.iter().map(|x| x * x).sum())).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let top = norms[order[0]];
    let cutoff = top * f64::EPSILON * rows.max(cols) as f64;
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| (norms[j] > cutoff && norms[j] > 0.0).then(|| w[j].iter().map(|x| x / norms[j]).collect()))
        .collect();
    complete_basis(&mut u_cols, rows);

    let r = cols;
    let mut u = vec![0.0; rows * r];
    let mut vv = vec![0.0; cols * r];
    let mut s = vec![0.0; r];
    for (t, &j) in order.iter().enumerate() {
        s[t] = norms[j];
        let col = u_cols[t].as_ref().expect("basis completed");
        for i in 0..rows {
            u[i * r + t] = col[i];
        }
        for i in 0..cols {
            vv[i * r + t] = v[j][i];
        }
    }
    Svd { rows, cols, u, s, v: vv }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills missing (null-space) columns with unit vectors orthogonal to the rest.
fn complete_basis(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for t in 0..cols.len() {
        if cols[t].is_some() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let dot: f64 = e.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= dot * o;
                    }
                }
            }
            let norm = libm::sqrt(e.iter().map(|x| x * x).sum());
            if norm > 0.5 {
                cols[t] = Some(e.into_iter().map(|x| x / norm).collect());
                break;
            }
        }
    }
}

fn fix_signs(svd: &mut Svd) {
    let r = svd.s.len();
    for j in 0..r {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..svd.rows {
            let x = svd.u[i * r + j];
            if x.abs() > best {
                best = x.abs();
                sign = if x < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            for i in 0..svd.rows {
                svd.u[i * r + j] = -svd.u[i * r + j];
            }
            for i in 0..svd.cols {
                svd.v[i * r + j] = -svd.v[i * r + j];
            }
        }
    }
}
