//! Loss-series representation of the hiding-instance value, its low-degree
//! truncation, and noisy extrapolation back to the lossless point.
//!
//! For an N x M Gaussian matrix X the quantity of interest is
//!
//! ```text
//! R_X(eta) = Haf [ X X^T                  (1-eta) M tanh r I ]
//!                [ (1-eta) M tanh r I     conj(X X^T)        ]
//! ```
//!
//! a polynomial in (1-eta) with nonnegative even coefficients whose value
//! at eta = 1 is the ideal quantity |Haf(X X^T)|^2. The experiment queries
//! a noisy oracle for Q(eta)^{-1} R_X(eta) on a short grid of lossy points,
//! rescales, and extrapolates a truncated polynomial to eta = 1. Everything
//! here uses natural logarithms.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hafnian::{haf_fast, ComplexSymMatrix};
use crate::linalg::four_block;
use crate::probability::{q_factor_adaptive, GbsConfig};
use crate::rng::{sample_ginibre, Seed};
use crate::stats::{haf_second_moment, wilson_interval};

/// Largest photon count for the direct block-hafnian route (matrix side 2N).
const MAX_DIRECT_PHOTONS: usize = 12;
/// Largest photon count for full subset enumeration of the series.
const MAX_SERIES_PHOTONS: usize = 10;
/// Degree beyond which extrapolation switches to exact rational arithmetic.
const MAX_F64_DEGREE: usize = 20;
/// Relative imaginary residue allowed on values that should be real.
const IM_RESIDUE_REL: f64 = 1e-10;

/// Even polynomial in (1-eta) carrying the loss expansion of R_X. Index k
/// of `coeffs` is the coefficient of (1-eta)^k; odd entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RPolynomial {
    photons: usize,
    coeffs: Vec<f64>,
}

impl RPolynomial {
    pub fn photons(&self) -> usize {
        self.photons
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// The eta = 1 value, the ideal quantity |Haf(X X^T)|^2.
    pub fn constant(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn eval(&self, eta: f64) -> f64 {
        let x = 1.0 - eta;
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// Sum of the terms of degree strictly above `l` at the given eta:
    /// exactly the evaluation gap left by `truncated(l)`.
    pub fn tail_eval(&self, eta: f64, l: usize) -> f64 {
        let x = 1.0 - eta;
        let mut acc = 0.0f64;
        for k in ((l + 1)..self.coeffs.len()).rev() {
            acc = acc * x + self.coeffs[k];
        }
        acc * x.powi(l as i32 + 1)
    }

    /// Drops every term of degree above `l`. `l` must be even and at most
    /// the polynomial degree.
    pub fn truncated(&self, l: usize) -> Result<RPolynomial> {
        if !l.is_multiple_of(2) {
            return Err(Error::invalid("truncation degree must be even"));
        }
        if l > self.photons {
            return Err(Error::invalid(
                "truncation degree cannot exceed the polynomial degree",
            ));
        }
        let mut coeffs = self.coeffs.clone();
        for c in coeffs.iter_mut().skip(l + 1) {
            *c = 0.0;
        }
        Ok(RPolynomial {
            photons: self.photons,
            coeffs,
        })
    }
}

fn check_series_input(x: &DMatrix<Complex64>, limit: usize) -> Result<usize> {
    let n = x.nrows();
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid("row count must be even and >= 2"));
    }
    if n > limit {
        return Err(Error::size(format!("row count must be at most {limit}")));
    }
    if x.ncols() == 0 {
        return Err(Error::invalid("need at least one column"));
    }
    Ok(n)
}

fn real_checked(v: Complex64, what: &str) -> Result<f64> {
    if v.im.abs() > IM_RESIDUE_REL * v.re.abs().max(1e-300) && v.im.abs() > 1e-14 {
        return Err(Error::numerical(format!(
            "{what} has imaginary residue {:.3e} on real part {:.3e}",
            v.im, v.re
        )));
    }
    Ok(v.re)
}

/// |Haf(X X^T)|^2, the lossless value the extrapolation targets.
pub fn ideal_value(x: &DMatrix<Complex64>) -> Result<f64> {
    check_series_input(x, MAX_DIRECT_PHOTONS)?;
    let b = ComplexSymMatrix::from_matrix(&(x * x.transpose()))?;
    Ok(haf_fast(&b)?.norm_sqr())
}

/// R_X(eta) through the single 2N x 2N hafnian, no series expansion.
pub fn r_polynomial_direct(x: &DMatrix<Complex64>, r: f64, eta: f64) -> Result<f64> {
    let n = check_series_input(x, MAX_DIRECT_PHOTONS)?;
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid("squeezing parameter must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("transmission must lie in [0, 1]"));
    }
    let b = x * x.transpose();
    let off = Complex64::new((1.0 - eta) * x.ncols() as f64 * r.tanh(), 0.0);
    let eye = DMatrix::from_diagonal_element(n, n, off);
    let block = four_block(&b, &eye, &eye, &b.conjugate());
    let haf = haf_fast(&ComplexSymMatrix::from_matrix(&block)?)?;
    real_checked(haf, "loss-block hafnian")
}

fn for_each_subset_of_size(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // Advance to the next combination in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Expands R_X as a polynomial in (1-eta): coefficient 2n is
/// (M tanh r)^{2n} times the sum of |Haf((X X^T)_J)|^2 over all index
/// subsets J of size N-2n. The empty hafnian counts as 1, so the top
/// coefficient is (M tanh r)^N.
pub fn series_coefficients(x: &DMatrix<Complex64>, r: f64) -> Result<RPolynomial> {
    let n = check_series_input(x, MAX_SERIES_PHOTONS)?;
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid("squeezing parameter must be finite and >= 0"));
    }
    let b = ComplexSymMatrix::from_matrix(&(x * x.transpose()))?;
    let mt = x.ncols() as f64 * r.tanh();
    let mut coeffs = vec![0.0f64; n + 1];
    for pairs in 0..=n / 2 {
        let keep = n - 2 * pairs;
        let mut total = 0.0f64;
        let mut err: Option<Error> = None;
        for_each_subset_of_size(n, keep, |idx| {
            if err.is_some() {
                return;
            }
            match crate::hafnian::sub_symmetric(&b, idx).and_then(|sub| haf_fast(&sub)) {
                Ok(h) => total += h.norm_sqr(),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        coeffs[2 * pairs] = mt.powi(2 * pairs as i32) * total;
    }
    Ok(RPolynomial { photons: n, coeffs })
}

/// Worst-case noise amplification of degree-d equispaced extrapolation from
/// [-width, width] to the point 1: exp(d (1 + ln(1/width))) / sqrt(2 pi d).
pub fn amplification_factor(degree: usize, width: f64) -> Result<f64> {
    if degree == 0 || !(0.0..1.0).contains(&width) || width <= 0.0 {
        return Err(Error::invalid(
            "amplification needs degree >= 1 and width in (0, 1)",
        ));
    }
    let d = degree as f64;
    Ok((d * (1.0 + (1.0 / width).ln())).exp() / (2.0 * std::f64::consts::PI * d).sqrt())
}

/// Result of extrapolating noisy node values to x = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extrapolated {
    pub value: f64,
    /// Sum of |L_j(1)|: the factor by which node noise can grow at 1.
    pub lebesgue_at_one: f64,
    /// node_eps times the closed-form amplification envelope.
    pub error_bound: f64,
    /// Whether the rational-arithmetic path evaluated the interpolant.
    pub exact_path: bool,
}

fn checked_grid(xs: &[f64], ys: &[f64]) -> Result<(usize, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("need matching node and value lists, >= 2"));
    }
    let h = xs[1] - xs[0];
    if h <= 0.0 {
        return Err(Error::invalid("nodes must increase"));
    }
    for w in xs.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h {
            return Err(Error::invalid("nodes must be equally spaced"));
        }
    }
    let last = *xs.last().unwrap();
    if last >= 1.0 {
        return Err(Error::invalid("all nodes must lie strictly below 1"));
    }
    Ok((xs.len() - 1, h))
}

fn big(x: f64) -> BigRational {
    BigRational::from_f64(x).expect("finite float")
}

/// Exact Lagrange basis values L_j(1) for the equispaced grid
/// x_j = -width + 2 j width / d, j = 0..=d.
pub fn lagrange_basis_at_one_exact(degree: usize, width: &BigRational) -> Vec<BigRational> {
    let d = degree;
    let mut w = vec![BigInt::from(1); d + 1];
    for j in 0..d {
        // w_{j+1} = -w_j (d - j) / (j + 1), the signed binomial recurrence.
        w[j + 1] = -(&w[j] * BigInt::from(d - j)) / BigInt::from(j + 1);
    }
    let taus: Vec<BigRational> = (0..=d)
        .map(|j| {
            let xj = width * BigRational::new(BigInt::from(2 * j as i64 - d as i64), BigInt::from(d as i64));
            BigRational::from(w[j].clone()) / (BigRational::from(BigInt::from(1)) - xj)
        })
        .collect();
    let total: BigRational = taus.iter().cloned().fold(BigRational::zero(), |a, b| a + b);
    taus.into_iter().map(|t| t / total.clone()).collect()
}

/// Evaluates the unique degree-d interpolant through equispaced nodes at
/// x = 1 in barycentric form. `node_eps` is the per-node error the caller
/// vouches for; the emitted bound amplifies it by the closed-form envelope
/// for the grid's half width. Degrees above 20 evaluate in exact rational
/// arithmetic: the barycentric weights there are too large for the f64
/// path to keep the roundoff below the signal.
pub fn extrapolate_to_one(xs: &[f64], ys: &[f64], node_eps: f64) -> Result<Extrapolated> {
    let (d, _h) = checked_grid(xs, ys)?;
    if node_eps < 0.0 || !node_eps.is_finite() {
        return Err(Error::invalid("node error must be finite and >= 0"));
    }
    let half_width = (xs[d] - xs[0]) / 2.0;
    let bound = if half_width < 1.0 {
        node_eps * amplification_factor(d, half_width)?
    } else {
        f64::INFINITY
    };
    if d <= MAX_F64_DEGREE {
        let mut w = 1.0f64;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut lebesgue = 0.0f64;
        for j in 0..=d {
            let tau = w / (1.0 - xs[j]);
            num += tau * ys[j];
            den += tau;
            lebesgue += tau.abs();
            w *= -((d - j) as f64) / (j + 1) as f64;
        }
        Ok(Extrapolated {
            value: num / den,
            lebesgue_at_one: lebesgue / den.abs(),
            error_bound: bound,
            exact_path: false,
        })
    } else {
        let mut w = BigInt::from(1);
        let mut num = BigRational::zero();
        let mut den = BigRational::zero();
        let mut lebesgue = BigRational::zero();
        for j in 0..=d {
            let tau = BigRational::from(w.clone()) / (big(1.0) - big(xs[j]));
            num += tau.clone() * big(ys[j]);
            lebesgue += tau.abs();
            den += tau;
            if j < d {
                w = -(&w * BigInt::from(d - j)) / BigInt::from(j + 1);
            }
        }
        let value = (num / den.clone()).to_f64().ok_or_else(|| {
            Error::numerical("extrapolated value does not fit in double precision")
        })?;
        let leb = (lebesgue / den.abs()).to_f64().unwrap_or(f64::INFINITY);
        Ok(Extrapolated {
            value,
            lebesgue_at_one: leb,
            error_bound: bound,
            exact_path: true,
        })
    }
}

/// Noise injected on top of the exact oracle value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NoiseMode {
    None,
    Uniform,
    Adversarial,
}

/// One oracle reply: the (noisy) estimate of Q(eta)^{-1} R_X(eta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub eta: f64,
    pub value: f64,
    pub injected_noise: f64,
}

/// Flags describing how the derived schedule relates to its hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReductionFlags {
    /// k_max k* / N <= 1/40, the regime the width margin 20/21 is sized for.
    pub kmax_kstar_small: bool,
    /// The width stays within the exact admissible bound
    /// (k_max - k*) / ((k_max + k*)(1 + 2 k_max k* / N)).
    pub delta_within_exact_bound: bool,
    /// The degree formula exceeded N and was capped: truncation error is
    /// then exactly zero, a degenerate but valid regime.
    pub l_capped: bool,
    /// ln(N / (eps0 delta0)) >= e, the regime the chi definition assumes.
    pub log_term_ok: bool,
    /// The interpolation degree exceeds k_max.
    pub degree_exceeds_kmax: bool,
    /// 1 - eta* <= 1 / (12 sqrt(N)), the loss-gap regime the noise floor
    /// eps is sized for.
    pub eta_gap_small: bool,
    /// All mapped nodes g([-width, width]) actually land in [eta_min, eta*];
    /// fails when the width margin overshoots its exact bound.
    pub nodes_within_eta: bool,
}

/// Derived schedule for the extrapolation experiment. All logarithms are
/// natural.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionParams {
    pub photons: usize,
    pub modes: usize,
    /// Squeezing calibrated once at eta*: sinh^2 r = N / (eta* M). It is
    /// held fixed across all oracle queries, which keeps tanh^2 r below
    /// N / (eta M) for every eta <= eta*.
    pub r: f64,
    pub eps0: f64,
    pub delta0: f64,
    pub k_star: f64,
    pub k_max: f64,
    pub eta_star: f64,
    pub eta_min: f64,
    /// Half width of the interpolation interval, (20/21)(k_max - k*)/(k_max + k*).
    pub width: f64,
    pub chi: f64,
    /// Interpolation degree l: even, at least 2, capped at N.
    pub degree: usize,
    /// Per-node failure budget (1 - (1-delta0)^{1/(l+1)}) / 2.
    pub delta: f64,
    /// Truncation budget N k_max^l / (2 delta l!), in units of `scale`.
    pub eps1: f64,
    pub alpha: f64,
    /// Oracle error N^{-3} eps0^3 delta0^2 e^{-alpha k*}, in units of `scale`.
    pub eps: f64,
    /// C(M/2+N/2-1, N/2) N!, the natural size of R_X values.
    pub scale: f64,
    /// max_j Q(g(x_j)) over the node grid.
    pub q_max: f64,
    /// Largest oracle error the degree-l pipeline could absorb while still
    /// meeting eps0: (eps0 e^{-l(1+ln(1/width))} - eps1) / q_max. Negative
    /// when the truncation budget alone exceeds the target.
    pub eps_admissible: f64,
    pub flags: ReductionFlags,
    pub warnings: Vec<String>,
}

impl ReductionParams {
    /// Builds the full schedule from the free parameters.
    pub fn derive(
        photons: usize,
        modes: usize,
        k_star: f64,
        eps0: f64,
        delta0: f64,
    ) -> Result<Self> {
        if photons < 2 || !photons.is_multiple_of(2) || photons > MAX_SERIES_PHOTONS {
            return Err(Error::invalid(format!(
                "photon count must be even in 2..={MAX_SERIES_PHOTONS}"
            )));
        }
        if modes == 0 || !modes.is_multiple_of(2) {
            return Err(Error::invalid("mode count must be even and positive"));
        }
        if !k_star.is_finite() || k_star <= 0.0 {
            return Err(Error::invalid("k* must be positive"));
        }
        if !(0.0..1.0).contains(&eps0) || eps0 <= 0.0 {
            return Err(Error::invalid("eps0 must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&delta0) || delta0 <= 0.0 {
            return Err(Error::invalid("delta0 must lie in (0, 1)"));
        }
        let n = photons as f64;
        let m = modes as f64;
        let k_max = 3.0 * k_star;
        let eta_star = n / (n + k_star);
        let eta_min = n / (n + k_max);
        let r = (n / (eta_star * m)).sqrt().asinh();
        let width = (20.0 / 21.0) * (k_max - k_star) / (k_max + k_star);
        let exact_width_bound =
            (k_max - k_star) / ((k_max + k_star) * (1.0 + 2.0 * k_max * k_star / n));
        let mut warnings = Vec::new();

        let log_term = (n / (eps0 * delta0)).ln();
        let log_term_ok = log_term >= std::f64::consts::E;
        if !log_term_ok {
            warnings.push(format!(
                "ln(N/(eps0 delta0)) = {log_term:.4} < e; the chi definition is outside \
                 its stated regime, proceeding anyway"
            ));
        }
        let chi = log_term.powf(1.0 / log_term);

        let kmax_kstar_small = k_max * k_star / n <= 1.0 / 40.0 + 1e-12;
        if !kmax_kstar_small {
            warnings.push(format!(
                "k_max k*/N = {:.4} exceeds 1/40; the 20/21 width margin is not \
                 guaranteed to respect the exact bound",
                k_max * k_star / n
            ));
        }
        let delta_within_exact_bound = width <= exact_width_bound + 1e-12;
        if !delta_within_exact_bound {
            warnings.push(format!(
                "width {width:.6} exceeds the exact admissible bound \
                 {exact_width_bound:.6}; mapped nodes can spill outside [eta_min, eta*]"
            ));
        }

        let raw_degree = (std::f64::consts::E.powi(2) / width) * chi * k_max + log_term;
        let mut degree = (raw_degree.ceil() as usize).max(2);
        if !degree.is_multiple_of(2) {
            degree += 1;
        }
        let l_capped = degree > photons;
        if l_capped {
            degree = photons;
            warnings.push(format!(
                "degree formula gave {raw_degree:.2}, capped at N = {photons}; \
                 truncation error is exactly zero in this regime"
            ));
        }
        let degree_exceeds_kmax = degree as f64 > k_max;
        if !degree_exceeds_kmax {
            warnings.push(format!(
                "degree {degree} does not exceed k_max = {k_max:.3}; the truncation \
                 budget formula is outside its regime"
            ));
        }

        let delta = (1.0 - (1.0 - delta0).powf(1.0 / (degree as f64 + 1.0))) / 2.0;
        let eps1 = (n.ln() + degree as f64 * k_max.ln()
            - (2.0 * delta).ln()
            - crate::probability::ln_factorial(degree as u64))
        .exp();
        let alpha = 6.0 * (1.0 + 2.1f64.ln()) * std::f64::consts::E.powi(2) * chi + 3.0;
        let eps = eps0.powi(3) * delta0.powi(2) * n.powi(-3) * (-alpha * k_star).exp();
        let scale = haf_second_moment(modes, photons)?;

        let eta_gap_small = 1.0 - eta_star <= 1.0 / (12.0 * n.sqrt()) + 1e-12;
        if !eta_gap_small {
            warnings.push(format!(
                "1 - eta* = {:.5} exceeds 1/(12 sqrt(N)) = {:.5}; outside the \
                 loss-gap regime",
                1.0 - eta_star,
                1.0 / (12.0 * n.sqrt())
            ));
        }

        let mut params = ReductionParams {
            photons,
            modes,
            r,
            eps0,
            delta0,
            k_star,
            k_max,
            eta_star,
            eta_min,
            width,
            chi,
            degree,
            delta,
            eps1,
            alpha,
            eps,
            scale,
            q_max: f64::NAN,
            eps_admissible: f64::NAN,
            flags: ReductionFlags {
                kmax_kstar_small,
                delta_within_exact_bound,
                l_capped,
                log_term_ok,
                degree_exceeds_kmax,
                eta_gap_small,
                nodes_within_eta: false,
            },
            warnings,
        };

        let lo = g_map(-params.width, &params)?;
        let hi = g_map(params.width, &params)?;
        params.flags.nodes_within_eta =
            lo >= params.eta_min - 1e-12 && hi <= params.eta_star + 1e-12;
        if !params.flags.nodes_within_eta {
            params.warnings.push(format!(
                "mapped node range [{lo:.6}, {hi:.6}] spills outside \
                 [eta_min, eta*] = [{:.6}, {:.6}]",
                params.eta_min, params.eta_star
            ));
        }

        let mut q_max = 0.0f64;
        for eta in params.eta_nodes()? {
            let cfg = GbsConfig::new(modes, photons, params.r, eta)?;
            q_max = q_max.max(q_factor_adaptive(&cfg, 1e-12)?.value);
        }
        params.q_max = q_max;
        let shrink = (-(params.degree as f64) * (1.0 + (1.0 / params.width).ln())).exp();
        params.eps_admissible = (eps0 * shrink - params.eps1) / q_max;
        Ok(params)
    }

    /// Interpolation nodes x_j = -width + 2 j width / degree, j = 0..=degree.
    pub fn nodes(&self) -> Vec<f64> {
        let d = self.degree as f64;
        (0..=self.degree)
            .map(|j| self.width * (2.0 * j as f64 - d) / d)
            .collect()
    }

    /// The transmission values g(x_j) the oracle is queried at.
    pub fn eta_nodes(&self) -> Result<Vec<f64>> {
        self.nodes().iter().map(|&x| g_map(x, self)).collect()
    }

    /// Transmission hull the oracle accepts: [eta_min, eta*] widened to the
    /// mapped node range when the width margin overshoots.
    pub fn eta_hull(&self) -> Result<(f64, f64)> {
        let lo = g_map(-self.width, self)?;
        let hi = g_map(self.width, self)?;
        Ok((self.eta_min.min(lo), self.eta_star.max(hi)))
    }

    /// Deterministic end-to-end error budget for oracle error `eps`:
    /// (q_max eps + eps1) e^{l (1 + ln(1/width))} scale.
    pub fn budget(&self, eps: f64) -> f64 {
        let eps_prime = self.q_max * eps + self.eps1;
        eps_prime * ((self.degree as f64) * (1.0 + (1.0 / self.width).ln())).exp() * self.scale
    }
}

/// Affine rescaling from the interpolation variable x to transmission:
/// g(x) = slope (x - 1) + 1 with
/// slope = (N (k_max + k*) + 2 k_max k*) / (2 (N + k_max)(N + k*)).
/// Accepts x in [-width, width] and the anchor x = 1, where g(1) = 1
/// exactly.
pub fn g_map(x: f64, params: &ReductionParams) -> Result<f64> {
    if x != 1.0 && x.abs() > params.width + 1e-12 {
        return Err(Error::invalid(
            "rescaling argument must lie in [-width, width] or equal 1",
        ));
    }
    let n = params.photons as f64;
    let slope = (n * (params.k_max + params.k_star) + 2.0 * params.k_max * params.k_star)
        / (2.0 * (n + params.k_max) * (n + params.k_star));
    Ok(slope * (x - 1.0) + 1.0)
}

/// Queries the simulated oracle for Q(eta)^{-1} R_X(eta) at one node.
/// Uniform noise draws from the substream (seed, "node", node_index), so
/// replies are independent of query order; adversarial noise is the
/// alternating pattern (-1)^{degree - j} eps scale that aligns with the
/// signs of the Lagrange basis at 1.
pub fn noisy_oracle(
    poly: &RPolynomial,
    params: &ReductionParams,
    node_index: usize,
    eta: f64,
    eps: f64,
    mode: NoiseMode,
    seed: Seed,
) -> Result<OracleEstimate> {
    if node_index > params.degree {
        return Err(Error::invalid("node index exceeds the schedule degree"));
    }
    let (lo, hi) = params.eta_hull()?;
    if !(lo - 1e-9..=hi + 1e-9).contains(&eta) {
        return Err(Error::invalid(
            "oracle transmission outside the scheduled hull",
        ));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::invalid("oracle error must be finite and >= 0"));
    }
    let cfg = GbsConfig::new(params.modes, params.photons, params.r, eta)?;
    let q = q_factor_adaptive(&cfg, 1e-12)?.value;
    let exact = poly.eval(eta) / q;
    let amplitude = eps * params.scale;
    let noise = match mode {
        NoiseMode::None => 0.0,
        NoiseMode::Uniform => {
            if amplitude == 0.0 {
                0.0
            } else {
                use rand::Rng;
                let mut rng = seed.child("node", node_index as u64).rng();
                rng.random_range(-amplitude..=amplitude)
            }
        }
        NoiseMode::Adversarial => {
            if (params.degree - node_index).is_multiple_of(2) {
                amplitude
            } else {
                -amplitude
            }
        }
    };
    Ok(OracleEstimate {
        eta,
        value: exact + noise,
        injected_noise: noise,
    })
}

/// One instance of the end-to-end pipeline on a fixed X.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionRun {
    pub estimate: f64,
    pub truth: f64,
    pub abs_error: f64,
    /// |estimate - truth| <= eps0 scale.
    pub within_eps0: bool,
    /// |estimate - truth| <= (q_max eps + eps1) e^{l(1+ln(1/width))} scale.
    pub within_budget: bool,
    /// Every node honored its eps bound and its truncation deviation
    /// stayed within eps1 scale; the budget is unconditional under these.
    pub hypotheses_hold: bool,
    pub max_injected_noise: f64,
    pub max_truncation_dev: f64,
    pub lebesgue_at_one: f64,
}

/// Runs the full protocol once: query the oracle at every mapped node,
/// rescale by Q, extrapolate to the lossless point, compare with the ideal
/// value.
pub fn reduction_run(
    x: &DMatrix<Complex64>,
    params: &ReductionParams,
    eps: f64,
    mode: NoiseMode,
    noise_seed: Seed,
) -> Result<ReductionRun> {
    if x.nrows() != params.photons || x.ncols() != params.modes {
        return Err(Error::invalid("matrix shape disagrees with the schedule"));
    }
    let poly = series_coefficients(x, params.r)?;
    let truth = poly.constant();
    let xs = params.nodes();
    let mut ys = Vec::with_capacity(xs.len());
    let mut max_noise = 0.0f64;
    let mut max_dev = 0.0f64;
    for (j, &xj) in xs.iter().enumerate() {
        let eta = g_map(xj, params)?;
        let est = noisy_oracle(&poly, params, j, eta, eps, mode, noise_seed)?;
        let cfg = GbsConfig::new(params.modes, params.photons, params.r, eta)?;
        let q = q_factor_adaptive(&cfg, 1e-12)?.value;
        ys.push(q * est.value);
        max_noise = max_noise.max(est.injected_noise.abs());
        max_dev = max_dev.max(poly.tail_eval(eta, params.degree).abs());
    }
    let node_eps = (params.q_max * eps + params.eps1) * params.scale;
    let extrap = extrapolate_to_one(&xs, &ys, node_eps)?;
    let abs_error = (extrap.value - truth).abs();
    let budget = params.budget(eps);
    let hypotheses_hold = max_noise <= eps * params.scale * (1.0 + 1e-9)
        && max_dev <= params.eps1 * params.scale * (1.0 + 1e-9);
    Ok(ReductionRun {
        estimate: extrap.value,
        truth,
        abs_error,
        within_eps0: abs_error <= params.eps0 * params.scale,
        within_budget: abs_error <= budget * (1.0 + 1e-9),
        hypotheses_hold,
        max_injected_noise: max_noise,
        max_truncation_dev: max_dev,
        lebesgue_at_one: extrap.lebesgue_at_one,
    })
}

/// Aggregate of many pipeline instances on fresh Gaussian matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub params: ReductionParams,
    pub trials: usize,
    pub eps_used: f64,
    pub mode: NoiseMode,
    pub successes: usize,
    pub success_fraction: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    /// Runs where the hypotheses held yet the budget was exceeded; the
    /// deterministic bound says this must be zero.
    pub budget_violations_under_hypotheses: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub runs: Vec<ReductionRun>,
}

/// Repeats `reduction_run` on `trials` fresh matrices. Per-trial seeds are
/// substreams of `seed`, so the report does not depend on scheduling.
pub fn reduction_experiment(
    params: &ReductionParams,
    trials: usize,
    eps: f64,
    mode: NoiseMode,
    seed: Seed,
) -> Result<ReductionReport> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let runs: Vec<ReductionRun> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let x = sample_ginibre(
                seed.child("reduction-x", t as u64),
                params.photons,
                params.modes,
            )?;
            reduction_run(&x, params, eps, mode, seed.child("reduction-noise", t as u64))
        })
        .collect::<Result<_>>()?;
    let successes = runs.iter().filter(|r| r.within_eps0).count();
    let (wilson_low, wilson_high) = wilson_interval(successes, trials)?;
    let budget_violations_under_hypotheses = runs
        .iter()
        .filter(|r| r.hypotheses_hold && !r.within_budget)
        .count();
    let mean_abs_error = runs.iter().map(|r| r.abs_error).sum::<f64>() / trials as f64;
    let max_abs_error = runs.iter().map(|r| r.abs_error).fold(0.0, f64::max);
    Ok(ReductionReport {
        params: params.clone(),
        trials,
        eps_used: eps,
        mode,
        successes,
        success_fraction: successes as f64 / trials as f64,
        wilson_low,
        wilson_high,
        budget_violations_under_hypotheses,
        mean_abs_error,
        max_abs_error,
        runs,
    })
}

/// Free parameters of the truncation-deviation experiment: unlike the full
/// schedule, the degree and per-X failure budget are chosen directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationConfig {
    pub photons: usize,
    pub modes: usize,
    pub k_star: f64,
    /// Allowed fraction of matrices whose deviation exceeds the threshold.
    pub delta: f64,
    /// Truncation degree l, even, in 0..=N.
    pub degree: usize,
}

/// Outcome of the truncation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationReport {
    pub photons: usize,
    pub modes: usize,
    pub k_star: f64,
    pub k_max: f64,
    pub eta_min: f64,
    pub r: f64,
    pub degree: usize,
    pub delta: f64,
    /// N k_max^l / (2 delta l!), in units of `scale`.
    pub eps1: f64,
    pub scale: f64,
    pub threshold: f64,
    pub trials: usize,
    pub exceedances: usize,
    pub exceedance_fraction: f64,
    pub wilson_high: f64,
    pub p95_deviation: f64,
    pub max_deviation: f64,
}

/// Measures how often |R_X - R_X^{(l)}| at eta_min exceeds the Markov-type
/// threshold eps1 scale over fresh Gaussian matrices. The deviation is
/// evaluated at eta_min because the series has nonnegative coefficients,
/// so the gap is largest at the lossiest end of the range.
pub fn truncation_lemma_experiment(
    cfg: &TruncationConfig,
    trials: usize,
    seed: Seed,
) -> Result<TruncationReport> {
    if cfg.photons < 2 || !cfg.photons.is_multiple_of(2) || cfg.photons > MAX_SERIES_PHOTONS {
        return Err(Error::invalid(format!(
            "photon count must be even in 2..={MAX_SERIES_PHOTONS}"
        )));
    }
    if cfg.modes == 0 || !cfg.modes.is_multiple_of(2) {
        return Err(Error::invalid("mode count must be even and positive"));
    }
    if !cfg.k_star.is_finite() || cfg.k_star <= 0.0 {
        return Err(Error::invalid("k* must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.delta) || cfg.delta <= 0.0 {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    if !cfg.degree.is_multiple_of(2) || cfg.degree > cfg.photons {
        return Err(Error::invalid("degree must be even and at most N"));
    }
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let n = cfg.photons as f64;
    let k_max = 3.0 * cfg.k_star;
    let eta_star = n / (n + cfg.k_star);
    let eta_min = n / (n + k_max);
    let r = (n / (eta_star * cfg.modes as f64)).sqrt().asinh();
    let scale = haf_second_moment(cfg.modes, cfg.photons)?;
    let eps1 = (n.ln() + cfg.degree as f64 * k_max.ln()
        - (2.0 * cfg.delta).ln()
        - crate::probability::ln_factorial(cfg.degree as u64))
    .exp();
    let threshold = eps1 * scale;
    let devs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let x = sample_ginibre(
                seed.child("truncation-x", t as u64),
                cfg.photons,
                cfg.modes,
            )?;
            let poly = series_coefficients(&x, r)?;
            Ok(poly.tail_eval(eta_min, cfg.degree).abs())
        })
        .collect::<Result<_>>()?;
    let exceedances = devs.iter().filter(|&&d| d > threshold).count();
    let mut sorted = devs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95 = sorted[((0.95 * trials as f64).ceil() as usize).min(trials) - 1];
    let (_, wilson_high) = wilson_interval(exceedances, trials)?;
    Ok(TruncationReport {
        photons: cfg.photons,
        modes: cfg.modes,
        k_star: cfg.k_star,
        k_max,
        eta_min,
        r,
        degree: cfg.degree,
        delta: cfg.delta,
        eps1,
        scale,
        threshold,
        trials,
        exceedances,
        exceedance_fraction: exceedances as f64 / trials as f64,
        wilson_high,
        p95_deviation: p95,
        max_deviation: *sorted.last().unwrap(),
    })
}
