//! Covariance matrices of squeezed vacuum under uniform loss, and the kernel
//! matrix whose submatrix hafnians give outcome probabilities.
//!
//! Conventions: vacuum quadrature variance 1/2 (so the M-mode vacuum has
//! covariance I/2), quadrature ordering (x_1..x_M, p_1..p_M), and the ladder
//! basis ordered (a_1..a_M, a*_1..a*_M). The Q-function covariance is
//! Sigma_Q = Sigma + I/2 in either basis.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hafnian::{kernel_coupling, ComplexSymMatrix, UNITARY_TOL};
use crate::linalg::{four_block, identity_c, unitarity_residual};

const I_UNIT: Complex64 = Complex64::new(0.0, 1.0);

/// Basis a covariance matrix is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Basis {
    /// (x_1..x_M, p_1..p_M), real entries.
    Quadrature,
    /// (a_1..a_M, a*_1..a*_M), Hermitian complex entries.
    Ladder,
}

/// Zero-mean Gaussian state covariance, 2M x 2M.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCovariance {
    modes: usize,
    basis: Basis,
    mat: DMatrix<Complex64>,
}

impl GaussianCovariance {
    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.mat
    }

    fn require_basis(&self, basis: Basis, what: &str) -> Result<()> {
        if self.basis != basis {
            return Err(Error::invalid(format!(
                "{what} expects a covariance in the {basis:?} basis"
            )));
        }
        Ok(())
    }
}

/// Covariance of M modes squeezed by a common parameter r:
/// diag(e^{2r}/2 ... , e^{-2r}/2 ...) in the quadrature basis.
pub fn squeezed_vacuum_cov(modes: usize, r: f64) -> Result<GaussianCovariance> {
    if modes == 0 {
        return Err(Error::invalid("state must have at least one mode"));
    }
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid("squeezing parameter must be finite and >= 0"));
    }
    let mut mat = DMatrix::zeros(2 * modes, 2 * modes);
    let vx = Complex64::new(0.5 * (2.0 * r).exp(), 0.0);
    let vp = Complex64::new(0.5 * (-2.0 * r).exp(), 0.0);
    for k in 0..modes {
        mat[(k, k)] = vx;
        mat[(modes + k, modes + k)] = vp;
    }
    Ok(GaussianCovariance {
        modes,
        basis: Basis::Quadrature,
        mat,
    })
}

/// Uniform transmission eta applied to every mode:
/// sigma -> eta sigma + (1-eta)/2 I.
pub fn apply_loss(cov: &GaussianCovariance, eta: f64) -> Result<GaussianCovariance> {
    cov.require_basis(Basis::Quadrature, "apply_loss")?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("transmission must lie in [0, 1]"));
    }
    let dim = 2 * cov.modes;
    let mut mat = &cov.mat * Complex64::new(eta, 0.0);
    for k in 0..dim {
        mat[(k, k)] += Complex64::new(0.5 * (1.0 - eta), 0.0);
    }
    Ok(GaussianCovariance {
        modes: cov.modes,
        basis: Basis::Quadrature,
        mat,
    })
}

/// Change of basis W sigma W^dag with W = (1/sqrt 2) [[I, iI], [I, -iI]].
pub fn to_ladder(cov: &GaussianCovariance) -> Result<GaussianCovariance> {
    cov.require_basis(Basis::Quadrature, "to_ladder")?;
    let m = cov.modes;
    let id = identity_c(m);
    let w = four_block(&id, &(&id * I_UNIT), &id, &(&id * (-I_UNIT)))
        * Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let mat = &w * &cov.mat * w.adjoint();
    Ok(GaussianCovariance {
        modes: m,
        basis: Basis::Ladder,
        mat,
    })
}

/// Interferometer action in the ladder basis: diag(U, U*) sigma diag(U, U*)^dag.
pub fn conjugate_by_interferometer(
    cov: &GaussianCovariance,
    u: &DMatrix<Complex64>,
) -> Result<GaussianCovariance> {
    cov.require_basis(Basis::Ladder, "conjugate_by_interferometer")?;
    let m = cov.modes;
    if u.nrows() != m || u.ncols() != m {
        return Err(Error::invalid("interferometer dimension mismatch"));
    }
    if unitarity_residual(u) > UNITARY_TOL {
        return Err(Error::invalid("interferometer is not unitary"));
    }
    let zero = DMatrix::zeros(m, m);
    let s = four_block(u, &zero, &zero, &u.conjugate());
    let mat = &s * &cov.mat * s.adjoint();
    Ok(GaussianCovariance {
        modes: m,
        basis: Basis::Ladder,
        mat,
    })
}

/// det(sigma + I/2), the normalization determinant of the Q function.
/// Basis-independent; must come out real.
pub fn q_representation_det(cov: &GaussianCovariance) -> Result<f64> {
    let mut sq = cov.mat.clone();
    for k in 0..2 * cov.modes {
        sq[(k, k)] += Complex64::new(0.5, 0.0);
    }
    let det = sq.determinant();
    if det.im.abs() > 1e-10 * det.re.abs().max(1.0) {
        return Err(Error::numerical(format!(
            "Q determinant has a large imaginary part: {det}"
        )));
    }
    if det.re <= 0.0 {
        return Err(Error::numerical("Q determinant must be positive"));
    }
    Ok(det.re)
}

/// Closed form of the same determinant for M equally squeezed modes under
/// uniform loss: cosh(r)^{2M} (1 - (1-eta)^2 tanh(r)^2)^M.
pub fn lossy_q_det_closed_form(modes: usize, r: f64, eta: f64) -> f64 {
    let t = r.tanh();
    let w = (1.0 - eta) * t;
    (r.cosh().powi(2) * (1.0 - w * w)).powi(modes as i32)
}

/// The 2M x 2M kernel whose outcome-indexed submatrix hafnians carry all
/// pattern dependence, in closed form:
///
/// ```text
/// c [ conj(U U^T)            (1-eta) tanh(r) I ]
///   [ (1-eta) tanh(r) I           U U^T        ]
/// ```
///
/// with c = [`kernel_coupling`]. Equals `X (I - Sigma_Q^{-1})` computed from
/// the state covariance; see [`kernel_via_covariance`].
pub fn build_a_matrix(u: &DMatrix<Complex64>, r: f64, eta: f64) -> Result<ComplexSymMatrix> {
    if u.nrows() != u.ncols() {
        return Err(Error::invalid("interferometer matrix must be square"));
    }
    if unitarity_residual(u) > UNITARY_TOL {
        return Err(Error::invalid(format!(
            "interferometer is not unitary: residual {:.3e}",
            unitarity_residual(u)
        )));
    }
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid("squeezing parameter must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("transmission must lie in [0, 1]"));
    }
    let m = u.nrows();
    let c = Complex64::new(kernel_coupling(r, eta), 0.0);
    let beta = Complex64::new((1.0 - eta) * r.tanh(), 0.0);
    let uut = u * u.transpose();
    let off = identity_c(m) * beta;
    let full = four_block(&(uut.conjugate() * c), &(&off * c), &(&off * c), &(uut * c));
    ComplexSymMatrix::from_matrix(&full)
}

/// The same kernel computed the long way round: squeezed covariance, loss,
/// ladder basis, interferometer, then X (I - Sigma_Q^{-1}).
pub fn kernel_via_covariance(
    u: &DMatrix<Complex64>,
    r: f64,
    eta: f64,
) -> Result<DMatrix<Complex64>> {
    if u.nrows() != u.ncols() {
        return Err(Error::invalid("interferometer matrix must be square"));
    }
    let m = u.nrows();
    let state = conjugate_by_interferometer(
        &to_ladder(&apply_loss(&squeezed_vacuum_cov(m, r)?, eta)?)?,
        u,
    )?;
    let mut sigma_q = state.mat;
    for k in 0..2 * m {
        sigma_q[(k, k)] += Complex64::new(0.5, 0.0);
    }
    let inv = sigma_q
        .try_inverse()
        .ok_or_else(|| Error::numerical("Sigma_Q is singular"))?;
    let g = identity_c(2 * m) - inv;
    // X swaps the two M-blocks: (X g)[i] = g[i +- M].
    let mut kernel = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..2 * m {
        let src = if i < m { i + m } else { i - m };
        for j in 0..2 * m {
            kernel[(i, j)] = g[(src, j)];
        }
    }
    Ok(kernel)
}

/// Symplectic form Omega = [[0, I], [-I, 0]] in the quadrature basis.
fn omega(modes: usize) -> DMatrix<Complex64> {
    let id = identity_c(modes);
    let zero = DMatrix::zeros(modes, modes);
    four_block(&zero, &id, &(&id * Complex64::new(-1.0, 0.0)), &zero)
}

/// Largest entry of (2 Omega sigma)^2 + I; zero exactly for pure states.
pub fn purity_residual(cov: &GaussianCovariance) -> Result<f64> {
    cov.require_basis(Basis::Quadrature, "purity_residual")?;
    let t = omega(cov.modes) * &cov.mat * Complex64::new(2.0, 0.0);
    let mut sq = &t * &t;
    for k in 0..2 * cov.modes {
        sq[(k, k)] += Complex64::new(1.0, 0.0);
    }
    Ok(crate::linalg::max_abs_entry(&sq))
}

/// Smallest eigenvalue of sigma + (i/2) Omega. Physical covariances keep this
/// nonnegative (up to roundoff); -1e-10 is the accepted floor.
pub fn uncertainty_min_eigenvalue(cov: &GaussianCovariance) -> Result<f64> {
    cov.require_basis(Basis::Quadrature, "uncertainty_min_eigenvalue")?;
    let h = &cov.mat + omega(cov.modes) * Complex64::new(0.0, 0.5);
    let eig = h.symmetric_eigen();
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Fidelity <psi| rho |psi> between a pure Gaussian state and an arbitrary
/// Gaussian state with the same zero mean: 1 / sqrt(det(sigma_pure + sigma)).
pub fn gaussian_fidelity_pure(
    pure: &GaussianCovariance,
    mixed: &GaussianCovariance,
) -> Result<f64> {
    pure.require_basis(Basis::Quadrature, "gaussian_fidelity_pure")?;
    mixed.require_basis(Basis::Quadrature, "gaussian_fidelity_pure")?;
    if pure.modes != mixed.modes {
        return Err(Error::invalid("mode counts differ"));
    }
    let residual = purity_residual(pure)?;
    if residual > 1e-8 {
        return Err(Error::invalid(format!(
            "first argument is not pure: residual {residual:.3e}"
        )));
    }
    let sum = &pure.mat + &mixed.mat;
    let det = sum.determinant();
    if det.im.abs() > 1e-10 * det.re.abs().max(1.0) || det.re <= 0.0 {
        return Err(Error::numerical(format!("ill-conditioned overlap: {det}")));
    }
    Ok(1.0 / det.re.sqrt())
}

/// Per-mode closed form of the fidelity between an M-mode squeezed vacuum and
/// its uniformly lossy counterpart: (1 + (1 - eta^2) sinh^2 r)^{-M/2}.
pub fn lossy_fidelity_closed_form(modes: usize, r: f64, eta: f64) -> f64 {
    let s2 = r.sinh().powi(2);
    (1.0 + (1.0 - eta * eta) * s2).powi(-(modes as i32)).sqrt()
}
