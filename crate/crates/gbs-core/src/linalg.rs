//! Small dense-matrix helpers shared across modules.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Largest entry magnitude of `m`; 0 for empty matrices.
pub fn max_abs_entry(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry magnitude of `U^dag U - I`.
pub fn unitarity_residual(u: &DMatrix<Complex64>) -> f64 {
    let n = u.nrows();
    let mut g = u.adjoint() * u;
    for i in 0..n {
        g[(i, i)] -= Complex64::new(1.0, 0.0);
    }
    max_abs_entry(&g)
}

/// Largest entry magnitude of `m - m^T`.
pub fn symmetry_residual(m: &DMatrix<Complex64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).norm());
        }
    }
    worst
}

/// Assembles `[[a, b], [c, d]]` from four `n x n` blocks.
pub fn four_block(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
    c: &DMatrix<Complex64>,
    d: &DMatrix<Complex64>,
) -> DMatrix<Complex64> {
    let n = a.nrows();
    debug_assert!(
        [a, b, c, d]
            .iter()
            .all(|m| m.nrows() == n && m.ncols() == n)
    );
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((0, n), (n, n)).copy_from(b);
    out.view_mut((n, 0), (n, n)).copy_from(c);
    out.view_mut((n, n), (n, n)).copy_from(d);
    out
}

/// Complex identity matrix.
pub fn identity_c(n: usize) -> DMatrix<Complex64> {
    DMatrix::identity(n, n)
}

/// Submatrix on the listed rows and columns; indices may repeat.
/// Callers must bounds-check `idx` against `m` beforehand.
pub fn principal_submatrix(m: &DMatrix<Complex64>, idx: &[usize]) -> DMatrix<Complex64> {
    let k = idx.len();
    DMatrix::from_fn(k, k, |a, b| m[(idx[a], idx[b])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_assembly_places_corners() {
        let a = DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0));
        let b = DMatrix::from_element(2, 2, Complex64::new(2.0, 0.0));
        let c = DMatrix::from_element(2, 2, Complex64::new(3.0, 0.0));
        let d = DMatrix::from_element(2, 2, Complex64::new(4.0, 0.0));
        let m = four_block(&a, &b, &c, &d);
        assert_eq!(m[(0, 0)].re, 1.0);
        assert_eq!(m[(0, 2)].re, 2.0);
        assert_eq!(m[(2, 0)].re, 3.0);
        assert_eq!(m[(3, 3)].re, 4.0);
    }

    #[test]
    fn residuals_detect_structure() {
        let id = identity_c(3);
        assert!(unitarity_residual(&id) == 0.0);
        let mut m = id.clone();
        m[(0, 1)] = Complex64::new(0.5, 0.0);
        assert!(symmetry_residual(&m) == 0.5);
        assert!(symmetry_residual(&id) == 0.0);
    }
}
