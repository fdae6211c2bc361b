//! Dense symmetric linear algebra for small matrices.
//!
//! Covariance blocks here are 2x2 or 4x4 and the largest system is the
//! observed information of a 2PL calibration (2m x 2m with m <= a few
//! dozen), so a plain Cholesky factorization covers every need: positive
//! definiteness checks, linear solves, and full inverses.
//!
//! Matrices are row-major `&[f64]` slices of length `n * n`.

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` if
/// the matrix is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n, "matrix shape mismatch");
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Whether a symmetric matrix is positive definite (all eigenvalues > 0),
/// decided by attempting a Cholesky factorization.
pub fn is_positive_definite(a: &[f64], n: usize) -> bool {
    cholesky(a, n).is_some()
}

/// Solves `A x = b` given the lower Cholesky factor `l` of `A`.
pub fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), n, "rhs length mismatch");
    // Forward substitution: L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    // Back substitution: L^T x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Full inverse of a symmetric positive definite matrix from its lower
/// Cholesky factor.
pub fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = chol_solve(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // Symmetrize to remove the last bit of round-off skew.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// Quadratic form `v^T A^{-1} v` for symmetric positive definite `A`,
/// or `None` if `A` is not positive definite.
pub fn quad_form_inv(a: &[f64], n: usize, v: &[f64]) -> Option<f64> {
    let l = cholesky(a, n)?;
    let x = chol_solve(&l, n, v);
    Some(v.iter().zip(&x).map(|(vi, xi)| vi * xi).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_known_3x3() {
        // A = L L^T with L = [[2,0,0],[6,1,0],[-8,5,3]].
        let a = [4.0, 12.0, -16.0, 12.0, 37.0, -43.0, -16.0, -43.0, 98.0];
        let l = cholesky(&a, 3).expect("matrix is PD");
        let want = [2.0, 0.0, 0.0, 6.0, 1.0, 0.0, -8.0, 5.0, 3.0];
        for (g, w) in l.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "factor mismatch: {l:?}");
        }
    }

    #[test]
    fn non_pd_rejected() {
        let a = [1.0, 2.0, 2.0, 1.0]; // eigenvalues 3 and -1
        assert!(cholesky(&a, 2).is_none());
        assert!(!is_positive_definite(&a, 2));
        let zero = [0.0, 0.0, 0.0, 0.0];
        assert!(!is_positive_definite(&zero, 2));
    }

    #[test]
    fn solve_and_inverse_round_trip() {
        let a = [4.0, 12.0, -16.0, 12.0, 37.0, -43.0, -16.0, -43.0, 98.0];
        let l = cholesky(&a, 3).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = chol_solve(&l, 3, &b);
        // Check A x = b.
        for i in 0..3 {
            let got: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((got - b[i]).abs() < 1e-9, "solve residual too large");
        }
        let inv = chol_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let got: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((got - want).abs() < 1e-9, "inverse residual too large");
            }
        }
    }

    #[test]
    fn quad_form_identity_is_dot_product() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let v = [3.0, 4.0];
        assert!((quad_form_inv(&a, 2, &v).unwrap() - 25.0).abs() < 1e-12);
    }
}
