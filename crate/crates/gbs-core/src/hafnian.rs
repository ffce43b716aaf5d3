//! Exact hafnian engines and the lossy block matrices they act on.
//!
//! The hafnian of a 2m x 2m symmetric matrix B is the matching polynomial
//!
//! ```text
//! Haf(B) = sum over perfect matchings pi of prod_{(i,j) in pi} B_ij
//! ```
//!
//! with `Haf` of the empty matrix defined as 1. Two independent engines are
//! provided: a direct matching enumeration with (2m-1)!! terms, and a
//! power-trace engine that runs in O(poly(m) * 2^m). They share no code past
//! the matrix type, which is what makes their agreement a meaningful check.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian;
use crate::linalg::{four_block, principal_submatrix, unitarity_residual};
use crate::outcome::Outcome;

/// Dimension ceiling of [`haf_enumerate`]; (15)!! terms is the practical top.
pub const MAX_ENUMERATE_DIM: usize = 16;
/// Dimension ceiling of [`haf_fast`].
pub const MAX_FAST_DIM: usize = 32;

const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Dense complex symmetric matrix. Construction symmetrizes, so the symmetry
/// residual of a stored matrix is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSymMatrix {
    dim: usize,
    /// Row-major entries, `data[i * dim + j]`.
    data: Vec<Complex64>,
}

impl ComplexSymMatrix {
    /// Builds from row-major entries, storing `(a_ij + a_ji) / 2`.
    pub fn new(dim: usize, entries: Vec<Complex64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {} entries for dimension {dim}, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let mut data = entries;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let avg = (data[i * dim + j] + data[j * dim + i]) * 0.5;
                data[i * dim + j] = avg;
                data[j * dim + i] = avg;
            }
        }
        Ok(ComplexSymMatrix { dim, data })
    }

    pub fn from_matrix(m: &DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid("matrix must be square"));
        }
        let dim = m.nrows();
        let mut entries = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                entries.push(m[(i, j)]);
            }
        }
        ComplexSymMatrix::new(dim, entries)
    }

    pub fn zeros(dim: usize) -> Self {
        ComplexSymMatrix {
            dim,
            data: vec![ZERO; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    /// Sets the symmetric pair (i, j) and (j, i).
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn as_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }
}

/// Principal submatrix of `b` on the listed rows/columns. Indices are 0-based
/// and may repeat; a repeated index duplicates its row and column, which is
/// how collision outcomes enter hafnian formulas.
pub fn sub_symmetric(b: &ComplexSymMatrix, indices: &[usize]) -> Result<ComplexSymMatrix> {
    for &i in indices {
        if i >= b.dim {
            return Err(Error::invalid(format!(
                "index {i} outside matrix of dimension {}",
                b.dim
            )));
        }
    }
    let k = indices.len();
    let mut data = Vec::with_capacity(k * k);
    for &i in indices {
        for &j in indices {
            data.push(b.get(i, j));
        }
    }
    Ok(ComplexSymMatrix { dim: k, data })
}

/// Hafnian by direct enumeration of perfect matchings, (dim-1)!! terms.
///
/// The recursion always pairs the lowest unmatched index, so every matching
/// is generated exactly once and the summation order is fixed.
pub fn haf_enumerate(b: &ComplexSymMatrix) -> Result<Complex64> {
    let n = b.dim;
    if !n.is_multiple_of(2) {
        return Err(Error::invalid("hafnian requires even dimension"));
    }
    if n > MAX_ENUMERATE_DIM {
        return Err(Error::size(format!(
            "dimension {n} exceeds enumeration ceiling {MAX_ENUMERATE_DIM}"
        )));
    }
    let active: Vec<usize> = (0..n).collect();
    Ok(match_rec(b, &active))
}

fn match_rec(b: &ComplexSymMatrix, active: &[usize]) -> Complex64 {
    if active.is_empty() {
        return ONE;
    }
    let first = active[0];
    let mut acc = ZERO;
    for p in 1..active.len() {
        let partner = active[p];
        let mut rest = Vec::with_capacity(active.len() - 2);
        rest.extend_from_slice(&active[1..p]);
        rest.extend_from_slice(&active[p + 1..]);
        acc += b.get(first, partner) * match_rec(b, &rest);
    }
    acc
}

/// Hafnian by the inclusion-exclusion power-trace algorithm.
///
/// Indices are grouped into m = dim/2 consecutive pairs. For a pair subset Z
/// let B_Z be the induced submatrix and X_Z the block-diagonal matrix of
/// 2x2 swaps; with p_j(Z) = tr((X_Z B_Z)^j),
///
/// ```text
/// Haf(B) = sum_{Z} (-1)^{m-|Z|} [x^m] exp( sum_{j=1..m} p_j(Z) x^j / (2j) )
/// ```
///
/// Each subset costs O(m^4) scalar work, so the total is O(m^4 2^m); near the
/// dimension ceiling a single call takes seconds. Subset contributions are
/// accumulated in a fixed order, so results do not depend on thread count.
pub fn haf_fast(b: &ComplexSymMatrix) -> Result<Complex64> {
    let n = b.dim;
    if !n.is_multiple_of(2) {
        return Err(Error::invalid("hafnian requires even dimension"));
    }
    if n > MAX_FAST_DIM {
        return Err(Error::size(format!(
            "dimension {n} exceeds power-trace ceiling {MAX_FAST_DIM}"
        )));
    }
    if n == 0 {
        return Ok(ONE);
    }
    let m = n / 2;
    let masks: Vec<u32> = (1..(1u32 << m)).collect();
    let contribution = |mask: &u32| -> Complex64 {
        let mask = *mask;
        let pairs: Vec<usize> = (0..m).filter(|k| mask >> k & 1 == 1).collect();
        subset_term(b, m, &pairs)
    };
    let terms: Vec<Complex64> = if m >= 10 {
        masks.par_iter().map(contribution).collect()
    } else {
        masks.iter().map(contribution).collect()
    };
    Ok(terms.into_iter().sum())
}

fn subset_term(b: &ComplexSymMatrix, m: usize, pairs: &[usize]) -> Complex64 {
    let s = 2 * pairs.len();
    // Row/column indices of B_Z, and D = X_Z * B_Z with within-pair row swaps.
    let idx: Vec<usize> = pairs.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect();
    let mut d = DMatrix::from_element(s, s, ZERO);
    for a in 0..s {
        let swapped = if a % 2 == 0 { a + 1 } else { a - 1 };
        for c in 0..s {
            d[(a, c)] = b.get(idx[swapped], idx[c]);
        }
    }
    // Power sums tr(D^j) for j = 1..m.
    let mut traces = Vec::with_capacity(m);
    let mut power = d.clone();
    traces.push(power.trace());
    for _ in 2..=m {
        power = &power * &d;
        traces.push(power.trace());
    }
    // [x^m] of exp(sum_j traces[j-1]/(2j) x^j) by the standard recurrence.
    let f: Vec<Complex64> = traces
        .iter()
        .enumerate()
        .map(|(i, t)| t / (2.0 * (i as f64 + 1.0)))
        .collect();
    let mut e = vec![ZERO; m + 1];
    e[0] = ONE;
    for k in 1..=m {
        let mut acc = ZERO;
        for j in 1..=k {
            acc += f[j - 1] * e[k - j] * (j as f64);
        }
        e[k] = acc / (k as f64);
    }
    let sign = if (m - pairs.len()).is_multiple_of(2) { 1.0 } else { -1.0 };
    e[m] * sign
}

/// Largest unitarity residual tolerated for interferometer inputs.
pub const UNITARY_TOL: f64 = 1e-10;

fn check_interferometer(u: &DMatrix<Complex64>, s: &Outcome) -> Result<usize> {
    if u.nrows() != u.ncols() {
        return Err(Error::invalid("interferometer matrix must be square"));
    }
    let m = u.nrows();
    if s.total_modes() != m {
        return Err(Error::invalid(format!(
            "outcome is on {} modes but the interferometer has {m}",
            s.total_modes()
        )));
    }
    let residual = unitarity_residual(u);
    if residual > UNITARY_TOL {
        return Err(Error::invalid(format!(
            "interferometer is not unitary: residual {residual:.3e}"
        )));
    }
    Ok(m)
}

fn check_loss_params(r: f64, eta: f64) -> Result<()> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid("squeezing parameter must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("transmission must lie in [0, 1]"));
    }
    Ok(())
}

/// The 2N x 2N block matrix whose hafnian carries the outcome dependence of
/// lossy probabilities:
///
/// ```text
/// [ conj(U U^T)_S          (1-eta) tanh(r) (I_M)_S ]
/// [ (1-eta) tanh(r) (I_M)_S        (U U^T)_S       ]
/// ```
///
/// `(.)_S` keeps the rows and columns named by the outcome, with repeats for
/// collisions. Note the off-diagonal block is the identity restricted to S,
/// entry `delta(s_i, s_j)`: repeated modes share loss correlations, so on
/// collision outcomes it is denser than the identity of size N.
pub fn build_lossy_block(
    u: &DMatrix<Complex64>,
    s: &Outcome,
    r: f64,
    eta: f64,
) -> Result<ComplexSymMatrix> {
    check_interferometer(u, s)?;
    check_loss_params(r, eta)?;
    let idx = s.zero_based();
    let n = idx.len();
    let uut_s = principal_submatrix(&(u * u.transpose()), &idx);
    let beta = (1.0 - eta) * r.tanh();
    let mut delta_s = DMatrix::from_element(n, n, ZERO);
    for a in 0..n {
        for b in 0..n {
            if idx[a] == idx[b] {
                delta_s[(a, b)] = Complex64::new(beta, 0.0);
            }
        }
    }
    ComplexSymMatrix::from_matrix(&four_block(&uut_s.conjugate(), &delta_s, &delta_s, &uut_s))
}

/// Coupling constant relating the lossy block to the full-state kernel:
/// the kernel is `c` times the block pattern, entry for entry.
pub fn kernel_coupling(r: f64, eta: f64) -> f64 {
    let t = r.tanh();
    let w = (1.0 - eta) * t;
    eta * t / (1.0 - w * w)
}

/// Hafnian of the outcome-indexed kernel submatrix, computed through the
/// covariance-matrix pipeline instead of the closed-form block. Index j of
/// the outcome selects rows/columns j and j+M of the 2M x 2M kernel.
///
/// Agrees with `kernel_coupling(r, eta)^N * Haf(build_lossy_block(..))`; the
/// two routes share no intermediate algebra, which is the point.
pub fn haf_alternate_a_form(
    u: &DMatrix<Complex64>,
    s: &Outcome,
    r: f64,
    eta: f64,
) -> Result<Complex64> {
    let m = check_interferometer(u, s)?;
    check_loss_params(r, eta)?;
    let kernel = gaussian::kernel_via_covariance(u, r, eta)?;
    let mut idx = s.zero_based();
    let shifted: Vec<usize> = idx.iter().map(|&j| j + m).collect();
    idx.extend(shifted);
    let sub = principal_submatrix(&kernel, &idx);
    haf_fast(&ComplexSymMatrix::from_matrix(&sub)?)
}
