//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! For an `m × n` input with `p = min(m, n)` the result holds `U` (`m × p`),
//! `S` (length `p`, descending, non-negative) and `V` (`n × p`) such that
//! `M = U diag(S) Vᵀ`. Columns of `V` are sign-normalized so that their
//! largest-magnitude entry is non-negative.

use super::matrix::{dot, Matrix, Vector};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

impl Svd {
    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, p) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                out[(i, j)] = (0..p).map(|l| self.u[(i, l)] * self.s[l] * self.v[(j, l)]).sum();
            }
        }
        out
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::arg("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::Domain("svd input contains non-finite entries".into()));
    }
    if rows >= cols {
        let (u, s, v) = jacobi_tall(m);
        Ok(finish(u, s, v))
    } else {
        // Mᵀ = U' S V'ᵀ  ⇒  M = V' S U'ᵀ
        let (u, s, v) = jacobi_tall(&m.transpose());
        Ok(finish(v, s, u))
    }
}

/// Columns of `a` are orthogonalized in place; returns (U columns, S, V columns).
fn jacobi_tall(m: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j).into_inner()).collect();
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
            for q in (p + 1)..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let s: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let sigma_max = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = sigma_max * (rows.max(cols) as f64) * f64::EPSILON;

    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    let mut u_cols = Vec::with_capacity(cols);
    let mut s_sorted = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if s[j] > cutoff && s[j] > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s[j]).collect());
            s_sorted.push(s[j]);
        } else {
            u_cols.push(vec![0.0; rows]);
            s_sorted.push(0.0);
            deficient.push(slot);
        }
        v_cols.push(v[j].clone());
    }
    complete_orthonormal(&mut u_cols, &deficient);
    (u_cols, s_sorted, v_cols)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column
/// (Gram-Schmidt against the standard basis, re-orthogonalized once).
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut filled: Vec<bool> = (0..cols.len()).map(|i| !slots.contains(&i)).collect();
    let mut basis = 0;
    for &slot in slots {
        while basis < dim {
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for (other, ok) in cols.iter().zip(&filled) {
                    if *ok {
                        let proj = dot(other, &cand);
                        for (c, o) in cand.iter_mut().zip(other) {
                            *c -= proj * o;
                        }
                    }
                }
            }
            let n = dot(&cand, &cand).sqrt();
            if n > 1e-8 {
                cols[slot] = cand.into_iter().map(|c| c / n).collect();
                filled[slot] = true;
                break;
            }
        }
    }
}

fn finish(u_cols: Vec<Vec<f64>>, s: Vec<f64>, v_cols: Vec<Vec<f64>>) -> Svd {
    let p = s.len();
    let m = u_cols[0].len();
    let n = v_cols[0].len();
    let mut u = Matrix::zeros(m, p);
    let mut v = Matrix::zeros(n, p);
    for l in 0..p {
        let pivot = v_cols[l]
            .iter()
            .cloned()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            u[(i, l)] = sign * u_cols[l][i];
        }
        for j in 0..n {
            v[(j, l)] = sign * v_cols[l][j];
        }
    }
    Svd {
        u,
        s: Vector::new(s),
        v,
    }
}
