//! Dense real linear algebra: products, SVD, null spaces, overlaps.

mod matrix;
mod svd;

pub use matrix::{dot, matmul, Matrix};
pub use svd::{null_space_basis, numerical_rank, svd, NullSpaceBasis, SvdResult};

pub(crate) use matrix::matmul_unchecked;

use crate::error::{OsdError, Result};

/// `‖a_t · a_kᵀ‖_F²`, the squared row-space overlap of two down-projections.
pub fn cross_overlap(a_t: &Matrix, a_k: &Matrix) -> Result<f64> {
    Ok(a_t.matmul_t(a_k)?.frobenius_sq())
}

/// Same quantity evaluated as `tr(A_T A_Kᵀ A_K A_Tᵀ)`.
pub fn cross_overlap_trace(a_t: &Matrix, a_k: &Matrix) -> Result<f64> {
    let cross = a_t.matmul_t(a_k)?; // r_T × r_K
    let inner = matmul(&cross, a_k)?; // r_T × d_in
    Ok(inner.matmul_t(a_t)?.trace())
}

/// Cosine similarity. A single zero vector yields `0`; two zero vectors are
/// an error.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(OsdError::shape(
            "cosine",
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 && nv == 0.0 {
        return Err(OsdError::UndefinedSimilarity);
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    // Double-double accumulation (Knuth two-sum + exact product split) as an
    // extended-precision reference.
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    fn dd_dot(u: &[f64], v: &[f64]) -> f64 {
        let (mut hi, mut lo) = (0.0, 0.0);
        for (a, b) in u.iter().zip(v) {
            let (p, pe) = two_prod(*a, *b);
            let (s, se) = two_sum(hi, p);
            hi = s;
            lo += se + pe;
        }
        hi + lo
    }

    #[test]
    fn orthogonal_rows_do_not_overlap() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_overlap(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_self_overlap_is_rank() {
        let q = Matrix::from_rows(&[
            vec![0.6, 0.8, 0.0, 0.0],
            vec![-0.8, 0.6, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!((cross_overlap(&q, &q).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_matches_trace_identity() {
        for seed in 0..10 {
            let a = random(4, 16, seed);
            let b = random(6, 16, seed + 100);
            let lhs = cross_overlap(&a, &b).unwrap();
            let rhs = cross_overlap_trace(&a, &b).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn overlap_shape_mismatch() {
        assert!(cross_overlap(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn zero_overlap_iff_rows_orthogonal() {
        // rows of b built inside the null space of a
        let a = random(3, 8, 5);
        let basis = null_space_basis(&a, 1e-5).unwrap();
        let coeffs = random(2, basis.null_dim(), 6);
        let b = coeffs.matmul_t(&basis.v_perp).unwrap();
        assert!(cross_overlap(&a, &b).unwrap() <= 1e-20);
        // mixing in one row-space direction breaks it
        let mut c = b.clone();
        for j in 0..8 {
            c[(0, j)] += 1e-3 * basis.v_par[(j, 0)];
        }
        assert!(cross_overlap(&a, &c).unwrap() > 1e-10);
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -3.0];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            cosine(&[0.0, 0.0], &[0.0, 0.0]).unwrap_err(),
            OsdError::UndefinedSimilarity
        );
    }

    #[test]
    fn cosine_matches_extended_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let u: Vec<f64> = (0..257).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..257).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = dd_dot(&u, &v) / (dd_dot(&u, &u).sqrt() * dd_dot(&v, &v).sqrt());
            assert!((cosine(&u, &v).unwrap() - want).abs() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn overlap_invariant_under_row_permutation(seed in 0u64..1000, shift in 0usize..5) {
            let a = random(5, 7, seed);
            let b = random(3, 7, seed + 1);
            let perm = Matrix::from_fn(5, 7, |i, j| a[((i + shift) % 5, j)]);
            let base = cross_overlap(&a, &b).unwrap();
            prop_assert!((cross_overlap(&perm, &b).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
            let permb = Matrix::from_fn(3, 7, |i, j| b[((i + shift) % 3, j)]);
            prop_assert!((cross_overlap(&a, &permb).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn cosine_is_bounded(u in prop::collection::vec(-10.0f64..10.0, 6), v in prop::collection::vec(-10.0f64..10.0, 6)) {
            prop_assume!(u.iter().any(|x| *x != 0.0) || v.iter().any(|x| *x != 0.0));
            let c = cosine(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
