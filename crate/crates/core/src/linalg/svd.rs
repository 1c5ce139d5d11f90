//! One-sided (Hestenes) Jacobi SVD, numerical rank and null-space bases.
//!
//! Right rotations are applied to the columns of a working copy until every
//! column pair is orthogonal to a relative tolerance of `1e-12`. The
//! accumulated rotation is `V`, the column norms are the singular values and
//! the normalised columns are `U`.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{OsdError, Result};

const ORTHO_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × p` with orthonormal columns, `p = min(m, n)`.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `n × p` with orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t_unchecked(&self.v)
    }
}

/// Orthonormal split of `ℝ^{d_in}` into the row space of a task
/// down-projection (`v_par`) and its complement (`v_perp`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpaceBasis {
    pub v_par: Matrix,
    pub v_perp: Matrix,
    pub rank: usize,
    pub tau: f64,
}

impl NullSpaceBasis {
    pub fn dim(&self) -> usize {
        self.v_perp.rows()
    }

    pub fn null_dim(&self) -> usize {
        self.v_perp.cols()
    }
}

/// Thin SVD of an arbitrary finite matrix.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(OsdError::Argument(
            "svd input has non-finite entries".into(),
        ));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

/// Number of singular values strictly greater than `tau`.
pub fn numerical_rank(sigma: &[f64], tau: f64) -> usize {
    sigma.iter().filter(|&&s| s > tau).count()
}

/// Row-space / null-space split of `a_t` (`r_T × d_in`) by the singular
/// value threshold `tau`.
pub fn null_space_basis(a_t: &Matrix, tau: f64) -> Result<NullSpaceBasis> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(OsdError::Argument(format!(
            "threshold must be positive, got {tau}"
        )));
    }
    if !a_t.is_finite() {
        return Err(OsdError::Argument(
            "task matrix has non-finite entries".into(),
        ));
    }
    let d_in = a_t.cols();
    let (sigma, v) = right_singular_full(a_t)?;
    let p = a_t.rows().min(d_in);
    let rank = numerical_rank(&sigma[..p], tau);
    if rank == d_in {
        return Err(OsdError::DegenerateBasis { rank, dim: d_in });
    }
    Ok(NullSpaceBasis {
        v_par: v.columns(0, rank),
        v_perp: v.columns(rank, d_in),
        rank,
        tau,
    })
}

/// All `n` column norms (sorted descending) and the full `n × n` right
/// rotation of a one-sided Jacobi sweep over `m`.
fn right_singular_full(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (w, v) = jacobi_columns(m)?;
    let norms: Vec<f64> = (0..w.cols()).map(|j| column_norm(&w, j)).collect();
    let order = descending_order(&norms);
    let sigma = order.iter().map(|&j| norms[j]).collect();
    let v = Matrix::from_fn(v.rows(), v.cols(), |i, j| v[(i, order[j])]);
    Ok((sigma, v))
}

fn svd_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    let (w, v) = jacobi_columns(m)?;
    let norms: Vec<f64> = (0..n).map(|j| column_norm(&w, j)).collect();
    let order = descending_order(&norms);
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);

    // Columns whose norm is at rounding level carry no direction; they are
    // replaced by an orthonormal completion.
    let floor = sigma.first().copied().unwrap_or(0.0) * f64::EPSILON * (rows.max(n) as f64);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (j, &src) in order.iter().enumerate() {
        let s = sigma[j];
        let candidate = if s > floor && s > 0.0 {
            let mut c: Vec<f64> = (0..rows).map(|i| w[(i, src)] / s).collect();
            if orthogonalize_against(&mut c, &basis) > 0.5 {
                Some(c)
            } else {
                None
            }
        } else {
            None
        };
        let col = match candidate {
            Some(c) => c,
            None => completion_vector(rows, &basis),
        };
        basis.push(col);
    }
    let u = Matrix::from_fn(rows, n, |i, j| basis[j][i]);
    Ok(SvdResult { u, sigma, v })
}

/// One-sided Jacobi on the columns of `m`. Returns `(m·V, V)`.
fn jacobi_columns(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (rows, n) = m.shape();
    // Column-major copies keep each rotation on contiguous memory.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let max_sweeps = 100 * rows.max(n).max(1);
    // Columns at rounding level relative to the whole matrix are treated as
    // exact zeros; their direction is noise and cannot be orthogonalised to
    // a relative tolerance.
    let negligible = {
        let frob_sq: f64 = w.iter().map(|c| dot(c, c)).sum();
        let eps = f64::EPSILON * (rows.max(n) as f64);
        eps * eps * frob_sq
    };
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == max_sweeps {
            return Err(OsdError::NonConvergence { iterations: sweeps });
        }
        sweeps += 1;
        converged = true;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
    }
    let w = Matrix::from_fn(rows, n, |i, j| w[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| v[j][i]);
    Ok((w, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn column_norm(m: &Matrix, j: usize) -> f64 {
    (0..m.rows())
        .map(|i| m[(i, j)] * m[(i, j)])
        .sum::<f64>()
        .sqrt()
}

/// Stable descending argsort; equal values keep factorization order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Twice-iterated Gram–Schmidt of `c` against `basis`, then normalisation.
/// Returns the norm retained after projection (relative to the input norm).
fn orthogonalize_against(c: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    let start = dot(c, c).sqrt();
    if start == 0.0 {
        return 0.0;
    }
    for _ in 0..2 {
        for b in basis {
            let proj = dot(c, b);
            for (x, y) in c.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
    }
    let norm = dot(c, c).sqrt();
    if norm > 0.0 {
        for x in c.iter_mut() {
            *x /= norm;
        }
    }
    norm / start
}

/// Unit vector orthogonal to `basis`, taken from the standard basis vector
/// with the largest residual.
fn completion_vector(dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        let kept = orthogonalize_against(&mut e, basis);
        if best.as_ref().is_none_or(|(b, _)| kept > *b) {
            best = Some((kept, e));
        }
        if kept > 0.7 {
            break;
        }
    }
    best.map(|(_, e)| e).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
        g.max_abs_diff(&Matrix::identity(m.cols()))
    }

    fn rel_recon(m: &Matrix, r: &SvdResult) -> f64 {
        let norm = m.frobenius_norm();
        let diff = r.reconstruct().sub(m).unwrap().frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(r.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_zero_singular_values_and_orthonormal_factors() {
        let r = svd(&Matrix::zeros(2, 5)).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&r.u) <= 1e-10);
        assert!(orthonormality_error(&r.v) <= 1e-10);
    }

    #[test]
    fn random_wide_matrix_reconstructs() {
        let m = random(8, 12, 11);
        let r = svd(&m).unwrap();
        assert!(rel_recon(&m, &r) <= 1e-9);
        assert!(orthonormality_error(&r.u) <= 1e-10);
        assert!(orthonormality_error(&r.v) <= 1e-10);
        assert!(r.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_factors_stay_orthonormal() {
        let a = random(6, 2, 12);
        let b = random(2, 9, 13);
        let m = matmul(&a, &b).unwrap();
        let r = svd(&m).unwrap();
        assert!(rel_recon(&m, &r) <= 1e-9);
        assert!(orthonormality_error(&r.u) <= 1e-10);
        assert!(orthonormality_error(&r.v) <= 1e-10);
    }

    #[test]
    fn numerical_rank_examples() {
        assert_eq!(numerical_rank(&[1.0, 1e-9], 1e-5), 1);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-5), 0);
        // outer-product sum of two terms
        let u = random(4, 2, 21);
        let w = random(2, 6, 22);
        let m = matmul(&u, &w).unwrap();
        assert_eq!(numerical_rank(&svd(&m).unwrap().sigma, 1e-5), 2);
    }

    #[test]
    fn axis_aligned_row_null_space() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let b = null_space_basis(&a, 1e-5).unwrap();
        assert_eq!(b.rank, 1);
        let proj = b.v_perp.matmul_t(&b.v_perp).unwrap();
        assert!(proj.max_abs_diff(&Matrix::diag(&[0.0, 1.0, 1.0])) <= 1e-10);
    }

    #[test]
    fn zero_task_matrix_null_space_is_everything() {
        let b = null_space_basis(&Matrix::zeros(2, 4), 1e-5).unwrap();
        assert_eq!(b.rank, 0);
        assert_eq!(b.v_perp.shape(), (4, 4));
        assert!(orthonormality_error(&b.v_perp) <= 1e-10);
    }

    #[test]
    fn random_task_matrix_residual() {
        let a = random(4, 16, 31);
        let b = null_space_basis(&a, 1e-5).unwrap();
        assert_eq!(b.rank, 4);
        assert!(matmul(&a, &b.v_perp).unwrap().max_abs() <= 1e-8);
        assert!(b.v_perp.t_matmul(&b.v_par).unwrap().max_abs() <= 1e-10);
        assert_eq!(b.rank, numerical_rank(&svd(&a).unwrap().sigma, 1e-5));
    }

    #[test]
    fn full_rank_square_is_degenerate() {
        let err = null_space_basis(&Matrix::identity(3), 1e-5).unwrap_err();
        assert_eq!(err, OsdError::DegenerateBasis { rank: 3, dim: 3 });
    }
}
