//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Number of entries in the upper triangle (diagonal included) of an n-by-n
/// symmetric matrix.
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Checks symmetry up to `rel_tol` times the largest absolute entry.
/// An all-zero matrix counts as symmetric.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax();
    if scale == 0.0 {
        return true;
    }
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst <= rel_tol * scale
}

/// Returns (M + Mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalue range (λ_min, λ_max) of a symmetric matrix.
pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigenvalues();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues below zero are clipped; callers are expected to have checked
/// that any negative part is numerical noise.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::linalg::SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Cholesky factorization with an escalating diagonal jitter fallback.
/// Returns the factorization together with the jitter that was added
/// (zero when the matrix factors cleanly).
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    base_jitter: f64,
) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some((ch, 0.0));
    }
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = base_jitter * scale;
    for _ in 0..8 {
        let bumped = m + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = Cholesky::new(bumped) {
            return Some((ch, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// Solves A x = b for symmetric positive definite A, with jitter fallback.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (ch, _) = cholesky_with_jitter(a, 1e-14)?;
    Some(ch.solve(b))
}

/// Maximum absolute entry of the difference of two matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tri_len_matches_triangle_numbers() {
        assert_eq!(tri_len(1), 1);
        assert_eq!(tri_len(2), 3);
        assert_eq!(tri_len(4), 10);
    }

    #[test]
    fn symmetry_check_is_relative() {
        let mut m = DMatrix::from_diagonal_element(3, 3, 1e6);
        m[(0, 1)] = 1e-4;
        assert!(is_symmetric(&m, 1e-9));
        assert!(!is_symmetric(&m, 1e-12));
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert_relative_eq!(&s * &s, m, epsilon = 1e-12);
    }

    #[test]
    fn jitter_recovers_semidefinite_factorization() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, jitter) = cholesky_with_jitter(&m, 1e-12).unwrap();
        assert!(jitter > 0.0);
    }
}
