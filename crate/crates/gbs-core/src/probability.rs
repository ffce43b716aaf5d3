//! Photon-count statistics of the lossy device.
//!
//! Three layers, from coarse to fine:
//!
//! * `prob_postselect_n`: the probability Pr[N] that the device emits N
//!   photons in total.
//! * `prob_no_postselect`: the joint weight q_S of seeing the specific
//!   pattern S (so the q_S over all N-photon patterns sum to Pr[N]).
//! * `prob_postselected`: the conditional probability p_S = q_S / Pr[N]
//!   actually reported by a post-selected experiment.
//!
//! The common analytic engine is a Gauss series in z = ((1-eta) tanh r)^2
//! with half-integer parameters; `q_factor` exposes its regularized form
//! Q(eta), normalized so that Q(1) = 1 exactly.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hafnian::{build_lossy_block, haf_fast};
use crate::outcome::{enumerate_outcomes, outcome_count, Outcome};

/// Frozen envelope constant: Q(eta) <= C sqrt(N) exp((1-eta) N) in the
/// calibrated regime (1-eta) sqrt(N) <= 1.
pub const Q_ENVELOPE_C: f64 = 4.0;

/// Hard ceiling on series length before giving up as non-convergent.
const MAX_SERIES_TERMS: usize = 200_000;

/// Largest multiset family `enumerate_distribution` will walk.
const MAX_ENUMERATION: u128 = 100_000;

/// Relative tolerance on the imaginary residue of a hafnian that should be
/// real, plus a small absolute floor for values near zero.
const IM_RESIDUE_REL: f64 = 1e-12;
const IM_RESIDUE_ABS: f64 = 1e-15;

/// ln(n!) in double precision.
pub fn ln_factorial(n: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0)
}

/// ln(C(n, k)). Requires k <= n.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n, "binomial coefficient needs k <= n");
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Device and channel parameters: `modes` equally squeezed inputs at
/// squeezing `r`, uniform transmission `eta`, post-selected on `photons`
/// detected photons. Both counts stay even so every combinatorial factor
/// downstream is an integer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GbsConfig {
    pub modes: usize,
    pub photons: usize,
    pub r: f64,
    pub eta: f64,
}

impl GbsConfig {
    pub fn new(modes: usize, photons: usize, r: f64, eta: f64) -> Result<Self> {
        if modes == 0 || !modes.is_multiple_of(2) {
            return Err(Error::invalid("mode count must be even and positive"));
        }
        if !photons.is_multiple_of(2) {
            return Err(Error::invalid("photon count must be even"));
        }
        if !r.is_finite() || r < 0.0 {
            return Err(Error::invalid("squeezing parameter must be finite and >= 0"));
        }
        if !eta.is_finite() || !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid("transmission must lie in [0, 1]"));
        }
        Ok(Self {
            modes,
            photons,
            r,
            eta,
        })
    }

    /// Calibrates the squeezing so the expected photon number matches the
    /// post-selected count: photons = eta * modes * sinh^2(r).
    pub fn with_auto_r(modes: usize, photons: usize, eta: f64) -> Result<Self> {
        if photons > 0 && eta <= 0.0 {
            return Err(Error::domain(
                "cannot calibrate squeezing: a zero-transmission channel emits no photons",
            ));
        }
        let r = if photons == 0 {
            0.0
        } else {
            (photons as f64 / (eta * modes as f64)).sqrt().asinh()
        };
        Self::new(modes, photons, r, eta)
    }

    pub fn tanh_r(&self) -> f64 {
        self.r.tanh()
    }

    /// Series argument z = ((1-eta) tanh r)^2, always in [0, 1).
    pub fn series_argument(&self) -> f64 {
        let w = (1.0 - self.eta) * self.tanh_r();
        w * w
    }

    /// Geometric envelope ratio 2 (1-eta)^2 N / (eta M) used by the emitted
    /// truncation bound. Infinite when eta = 0 and photons > 0.
    pub fn envelope_ratio(&self) -> f64 {
        if self.photons == 0 {
            return 0.0;
        }
        2.0 * (1.0 - self.eta).powi(2) * self.photons as f64 / (self.eta * self.modes as f64)
    }
}

/// A truncated evaluation of Q(eta): the partial sum, how many terms past
/// the zeroth were kept, and the geometric tail envelope for what was cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QFactorResult {
    pub value: f64,
    pub truncation_terms: usize,
    pub error_bound: f64,
}

fn kahan_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let y = x - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// Ratio T_{n+1}/T_n of consecutive Gauss-series terms with parameters
/// (a, b; 1/2) at argument z. Decreasing in n whenever a, b >= 1/2.
fn term_ratio(a: f64, b: f64, z: f64, n: usize) -> f64 {
    let nf = n as f64;
    (a + nf) * (b + nf) / ((0.5 + nf) * (1.0 + nf)) * z
}

struct SeriesEval {
    sum: f64,
    terms: usize,
}

/// Partial Gauss sum with exactly `terms` terms past the zeroth, Kahan
/// compensated. Terms are all nonnegative for the parameter ranges used
/// here, so no cancellation occurs.
fn gauss_sum_fixed(a: f64, b: f64, z: f64, terms: usize) -> f64 {
    let mut sum = 1.0f64;
    let mut comp = 0.0f64;
    let mut term = 1.0f64;
    for n in 0..terms {
        term *= term_ratio(a, b, z, n);
        kahan_add(&mut sum, &mut comp, term);
    }
    sum
}

/// Gauss sum extended until its rigorous ratio-tail bound drops below
/// `rel_target` relative to the partial sum. The tail of a series with
/// decreasing term ratios rho is bounded by last_term * rho / (1 - rho).
fn gauss_sum_adaptive(a: f64, b: f64, z: f64, rel_target: f64) -> Result<SeriesEval> {
    let mut sum = 1.0f64;
    let mut comp = 0.0f64;
    let mut term = 1.0f64;
    let mut n = 0usize;
    loop {
        term *= term_ratio(a, b, z, n);
        kahan_add(&mut sum, &mut comp, term);
        n += 1;
        let rho = term_ratio(a, b, z, n);
        if rho < 1.0 {
            let tail = term * rho / (1.0 - rho);
            if tail <= rel_target * sum {
                return Ok(SeriesEval { sum, terms: n });
            }
        }
        if n >= MAX_SERIES_TERMS {
            return Err(Error::numerical(
                "series did not reach the requested tolerance within the term budget",
            ));
        }
    }
}

fn gauss_params(cfg: &GbsConfig) -> (f64, f64) {
    let a = ((cfg.modes + cfg.photons) / 2) as f64;
    let b = (cfg.photons as f64 + 1.0) / 2.0;
    (a, b)
}

/// Checks the precondition for the emitted geometric bound and returns the
/// envelope ratio. The calibrated regime tanh^2 r <= N / (eta M) makes the
/// envelope dominate the true term ratios from some index on.
fn envelope_ratio_checked(cfg: &GbsConfig) -> Result<f64> {
    let zg = cfg.envelope_ratio();
    if !zg.is_finite() || zg >= 1.0 {
        return Err(Error::domain(
            "geometric envelope needs 2 (1-eta)^2 N < eta M",
        ));
    }
    Ok(zg)
}

fn q_prefactor(cfg: &GbsConfig) -> f64 {
    let z = cfg.series_argument();
    (1.0 - z).powi((cfg.modes / 2 + cfg.photons) as i32)
}

/// Q(eta) truncated after `terms` series terms past the zeroth.
///
/// Q(eta) = (1-z)^{M/2+N} * F((M+N)/2, (N+1)/2; 1/2; z), z = ((1-eta) tanh r)^2.
///
/// The reported `error_bound` is the geometric envelope
/// prefactor * zg^{terms+1} / (1 - zg) with zg = 2 (1-eta)^2 N / (eta M),
/// which requires zg < 1 (a domain error otherwise) and is meaningful in
/// the calibrated regime sinh^2 r <= N / (eta M). Q(1) = 1 exactly, with a
/// zero bound.
pub fn q_factor(cfg: &GbsConfig, terms: usize) -> Result<QFactorResult> {
    if cfg.photons == 0 || cfg.eta == 1.0 {
        return Ok(QFactorResult {
            value: 1.0,
            truncation_terms: 0,
            error_bound: 0.0,
        });
    }
    let zg = envelope_ratio_checked(cfg)?;
    let (a, b) = gauss_params(cfg);
    let prefactor = q_prefactor(cfg);
    let sum = gauss_sum_fixed(a, b, cfg.series_argument(), terms);
    Ok(QFactorResult {
        value: prefactor * sum,
        truncation_terms: terms,
        error_bound: prefactor * zg.powi(terms as i32 + 1) / (1.0 - zg),
    })
}

/// Q(eta) with the term count grown until the emitted bound falls below
/// 1e-3 of `tol` and the rigorous internal tail is negligible at the same
/// scale.
pub fn q_factor_adaptive(cfg: &GbsConfig, tol: f64) -> Result<QFactorResult> {
    if cfg.photons == 0 || cfg.eta == 1.0 {
        return Ok(QFactorResult {
            value: 1.0,
            truncation_terms: 0,
            error_bound: 0.0,
        });
    }
    let zg = envelope_ratio_checked(cfg)?;
    let (a, b) = gauss_params(cfg);
    let prefactor = q_prefactor(cfg);
    let target = 1e-3 * tol;
    let eval = gauss_sum_adaptive(a, b, cfg.series_argument(), target)?;
    let mut terms = eval.terms;
    while prefactor * zg.powi(terms as i32 + 1) / (1.0 - zg) > target {
        terms += 1;
        if terms >= MAX_SERIES_TERMS {
            return Err(Error::numerical(
                "geometric bound did not reach the requested tolerance within the term budget",
            ));
        }
    }
    let sum = gauss_sum_fixed(a, b, cfg.series_argument(), terms);
    Ok(QFactorResult {
        value: prefactor * sum,
        truncation_terms: terms,
        error_bound: prefactor * zg.powi(terms as i32 + 1) / (1.0 - zg),
    })
}

/// Probability that the device emits exactly `cfg.photons` photons:
///
/// Pr[N] = eta^N tanh^N r / cosh^M r * C(M/2+N/2-1, N/2)
///         * F((M+N)/2, (N+1)/2; 1/2; z).
pub fn prob_postselect_n(cfg: &GbsConfig) -> Result<f64> {
    let m = cfg.modes as f64;
    let n = cfg.photons as f64;
    let z = cfg.series_argument();
    if cfg.eta == 0.0 || cfg.r == 0.0 {
        // Vacuum output: all probability sits at zero photons.
        return Ok(if cfg.photons == 0 { 1.0 } else { 0.0 });
    }
    if cfg.photons == 0 {
        let ln_p = -m * cfg.r.cosh().ln() - 0.5 * m * (1.0 - z).ln();
        return Ok(ln_p.exp());
    }
    let (a, b) = gauss_params(cfg);
    let series = gauss_sum_adaptive(a, b, z, 1e-14)?;
    let ln_pref = n * (cfg.eta * cfg.tanh_r()).ln() - m * cfg.r.cosh().ln()
        + ln_binomial(
            (cfg.modes / 2 + cfg.photons / 2 - 1) as u64,
            (cfg.photons / 2) as u64,
        );
    Ok(ln_pref.exp() * series.sum)
}

fn real_part_checked(value: Complex64, what: &str) -> Result<f64> {
    if value.im.abs() > IM_RESIDUE_REL * value.re.abs() + IM_RESIDUE_ABS {
        return Err(Error::numerical(format!(
            "{what} has imaginary residue {:.3e} on real part {:.3e}",
            value.im, value.re
        )));
    }
    Ok(value.re)
}

fn check_pattern(s: &Outcome, cfg: &GbsConfig) -> Result<()> {
    if s.total_modes() != cfg.modes {
        return Err(Error::invalid("outcome lives on a different mode count"));
    }
    if s.photons() != cfg.photons {
        return Err(Error::invalid("outcome photon count disagrees with config"));
    }
    Ok(())
}

/// Joint (non-post-selected) weight q_S of detecting exactly the pattern S:
///
/// q_S = (1/mu(S)) * eta^N tanh^N r
///       / (cosh^M r * (1-z)^{M/2+N}) * Haf(lossy block).
///
/// Summed over all N-photon patterns this gives Pr[N].
pub fn prob_no_postselect(u: &DMatrix<Complex64>, s: &Outcome, cfg: &GbsConfig) -> Result<f64> {
    check_pattern(s, cfg)?;
    if cfg.photons == 0 {
        return prob_postselect_n(cfg);
    }
    if cfg.eta == 0.0 || cfg.r == 0.0 {
        return Ok(0.0);
    }
    let block = build_lossy_block(u, s, cfg.r, cfg.eta)?;
    let haf = real_part_checked(haf_fast(&block)?, "pattern hafnian")?;
    let m = cfg.modes as f64;
    let n = cfg.photons as f64;
    let z = cfg.series_argument();
    let ln_pref = n * (cfg.eta * cfg.tanh_r()).ln()
        - m * cfg.r.cosh().ln()
        - (m / 2.0 + n) * (1.0 - z).ln()
        - s.mu().ln();
    Ok(ln_pref.exp() * haf)
}

/// Post-selected probability of the pattern S among N-photon events:
///
/// p_S = (1/mu(S)) * C(M/2+N/2-1, N/2)^{-1} * Q(eta)^{-1} * Haf(lossy block),
///
/// which equals q_S / Pr[N].
pub fn prob_postselected(u: &DMatrix<Complex64>, s: &Outcome, cfg: &GbsConfig) -> Result<f64> {
    check_pattern(s, cfg)?;
    if cfg.photons == 0 {
        return Ok(1.0);
    }
    if cfg.eta == 0.0 || cfg.r == 0.0 {
        return Err(Error::domain(
            "post-selecting on photons that are never produced conditions on a null event",
        ));
    }
    let block = build_lossy_block(u, s, cfg.r, cfg.eta)?;
    let haf = real_part_checked(haf_fast(&block)?, "pattern hafnian")?;
    let q = q_factor_adaptive(cfg, 1e-12)?.value;
    let ln_scale = -ln_binomial(
        (cfg.modes / 2 + cfg.photons / 2 - 1) as u64,
        (cfg.photons / 2) as u64,
    ) - s.mu().ln();
    Ok(ln_scale.exp() * haf / q)
}

/// Full post-selected distribution over every N-photon multiset pattern,
/// in the lexicographic order of `enumerate_outcomes`. Patterns evaluate
/// in parallel; the output order is deterministic.
pub fn enumerate_distribution(
    u: &DMatrix<Complex64>,
    cfg: &GbsConfig,
) -> Result<Vec<(Outcome, f64)>> {
    let count = outcome_count(cfg.modes, cfg.photons);
    if count > MAX_ENUMERATION {
        return Err(Error::size(format!(
            "{count} patterns exceed the enumeration ceiling of {MAX_ENUMERATION}"
        )));
    }
    let outcomes = enumerate_outcomes(cfg.modes, cfg.photons)?;
    let probs: Vec<f64> = outcomes
        .par_iter()
        .map(|s| prob_postselected(u, s, cfg))
        .collect::<Result<_>>()?;
    Ok(outcomes.into_iter().zip(probs).collect())
}

/// One row of the post-selection yield table: Pr[N] at the calibrated
/// operating point M = N^3, eta = 1 - 1/(12 sqrt(N)), together with the
/// scaled value Pr[N] sqrt(N) whose infimum the yield guard watches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerBoundRow {
    pub photons: usize,
    pub modes: usize,
    pub eta: f64,
    pub r: f64,
    pub pr_n: f64,
    pub pr_sqrt_n: f64,
}

/// Evaluates the yield table for even N up to `n_max` inclusive.
pub fn postselect_lower_bound_check(n_max: usize) -> Result<Vec<LowerBoundRow>> {
    if n_max < 2 || !n_max.is_multiple_of(2) {
        return Err(Error::invalid("grid limit must be even and >= 2"));
    }
    let mut rows = Vec::new();
    for photons in (2..=n_max).step_by(2) {
        let modes = photons * photons * photons;
        let eta = 1.0 - 1.0 / (12.0 * (photons as f64).sqrt());
        let cfg = GbsConfig::with_auto_r(modes, photons, eta)?;
        let pr_n = prob_postselect_n(&cfg)?;
        rows.push(LowerBoundRow {
            photons,
            modes,
            eta,
            r: cfg.r,
            pr_n,
            pr_sqrt_n: pr_n * (photons as f64).sqrt(),
        });
    }
    Ok(rows)
}

/// Outcome of testing Q(eta) against its frozen envelope
/// C sqrt(N) exp((1-eta) N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QEnvelopeCheck {
    pub value: f64,
    pub bound: f64,
    /// Whether (1-eta) sqrt(N) <= 1, the regime the envelope is stated for.
    pub in_regime: bool,
    pub holds: bool,
}

/// Compares Q(eta) to the envelope bound at the config's parameters.
pub fn q_upper_bound_check(cfg: &GbsConfig) -> Result<QEnvelopeCheck> {
    if cfg.photons == 0 {
        return Err(Error::invalid("envelope check needs a positive photon count"));
    }
    let n = cfg.photons as f64;
    let value = q_factor_adaptive(cfg, 1e-12)?.value;
    let bound = Q_ENVELOPE_C * n.sqrt() * ((1.0 - cfg.eta) * n).exp();
    Ok(QEnvelopeCheck {
        value,
        bound,
        in_regime: (1.0 - cfg.eta) * n.sqrt() <= 1.0 + 1e-12,
        holds: value <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_haar_unitary, Seed};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn outcome(occupied: &[usize], modes: usize) -> Outcome {
        Outcome::new(occupied.to_vec(), modes).unwrap()
    }

    #[test]
    fn ln_binomial_matches_integer_arithmetic() {
        for n in 0..20u64 {
            for k in 0..=n {
                let mut num = 1u128;
                let mut den = 1u128;
                for i in 0..k {
                    num *= (n - i) as u128;
                    den *= (i + 1) as u128;
                }
                let c = (num / den) as f64;
                assert_relative_eq!(ln_binomial(n, k).exp(), c, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn config_rejects_bad_parameters() {
        assert!(GbsConfig::new(3, 2, 0.5, 0.9).is_err());
        assert!(GbsConfig::new(4, 3, 0.5, 0.9).is_err());
        assert!(GbsConfig::new(4, 2, -0.1, 0.9).is_err());
        assert!(GbsConfig::new(4, 2, 0.5, 1.1).is_err());
        assert!(GbsConfig::new(4, 2, 0.5, 0.9).is_ok());
    }

    #[test]
    fn auto_r_hits_the_calibration_identity() {
        let cfg = GbsConfig::with_auto_r(8, 4, 0.75).unwrap();
        let lhs = cfg.eta * cfg.modes as f64 * cfg.r.sinh().powi(2);
        assert_relative_eq!(lhs, cfg.photons as f64, max_relative = 1e-12);

        let vac = GbsConfig::with_auto_r(4, 0, 0.5).unwrap();
        assert_eq!(vac.r, 0.0);

        assert!(GbsConfig::with_auto_r(4, 2, 0.0).is_err());
    }

    #[test]
    fn q_factor_is_exactly_one_without_loss_or_photons() {
        let lossless = GbsConfig::with_auto_r(8, 4, 1.0).unwrap();
        let q = q_factor(&lossless, 50).unwrap();
        assert_eq!(q.value, 1.0);
        assert_eq!(q.error_bound, 0.0);

        let vacuum = GbsConfig::new(8, 0, 0.6, 0.7).unwrap();
        let q = q_factor_adaptive(&vacuum, 1e-12).unwrap();
        assert_eq!(q.value, 1.0);
    }

    #[test]
    fn q_factor_rejects_envelope_domain_violation() {
        // 2 (1-eta)^2 N = 3.92 > eta M = 1.2.
        let cfg = GbsConfig::new(4, 4, 0.5, 0.3).unwrap();
        assert!(matches!(q_factor(&cfg, 10), Err(Error::Domain(_))));
    }

    /// Plain term-by-term Gauss summation from the Pochhammer definition,
    /// no recurrence shared with the implementation.
    fn gauss_reference(a: f64, b: f64, z: f64, terms: usize) -> f64 {
        let mut sum = 0.0f64;
        for n in 0..=terms {
            let mut t = 1.0f64;
            for i in 0..n {
                let i = i as f64;
                t *= (a + i) * (b + i) / ((0.5 + i) * (1.0 + i));
            }
            sum += t * z.powi(n as i32);
        }
        sum
    }

    #[test]
    fn q_factor_matches_reference_summation() {
        let cfg = GbsConfig::with_auto_r(8, 2, 0.8).unwrap();
        let q = q_factor_adaptive(&cfg, 1e-12).unwrap();
        let z = cfg.series_argument();
        let reference = (1.0 - z).powi(6) * gauss_reference(5.0, 1.5, z, 200);
        assert_relative_eq!(q.value, reference, max_relative = 1e-13);
    }

    #[test]
    fn q_factor_value_grows_and_bound_shrinks_with_terms() {
        let cfg = GbsConfig::with_auto_r(8, 2, 0.7).unwrap();
        let coarse = q_factor(&cfg, 3).unwrap();
        let fine = q_factor(&cfg, 30).unwrap();
        assert!(fine.value >= coarse.value);
        assert!(fine.error_bound < coarse.error_bound);
        assert!(coarse.error_bound > 0.0);
    }

    /// Single-mode squeezed vacuum photon-number mass function after a
    /// lossy channel, truncated at `cut` input pairs.
    fn single_mode_lossy_pmf(r: f64, eta: f64, cut: usize) -> Vec<f64> {
        let t = r.tanh();
        let mut pmf = vec![0.0f64; 2 * cut + 1];
        for j in 0..=cut {
            let n = 2 * j;
            // |<2j|squeezed>|^2 = (2j)! / (4^j (j!)^2) t^{2j} / cosh r.
            let ln_amp = ln_factorial(n as u64) - 2.0 * ln_factorial(j as u64)
                - (n as f64) * std::f64::consts::LN_2
                + (n as f64) * t.ln()
                - r.cosh().ln();
            let p_in = ln_amp.exp();
            for (k, slot) in pmf.iter_mut().enumerate().take(n + 1) {
                let ln_loss = ln_binomial(n as u64, k as u64)
                    + (k as f64) * eta.ln()
                    + ((n - k) as f64) * (1.0 - eta).ln();
                *slot += p_in * ln_loss.exp();
            }
        }
        pmf
    }

    #[test]
    fn counting_distribution_matches_convolution_oracle() {
        let modes = 2;
        let r = 0.4;
        let eta = 0.7;
        let single = single_mode_lossy_pmf(r, eta, 40);
        let mut two_mode = vec![0.0f64; 2 * single.len() - 1];
        for (i, a) in single.iter().enumerate() {
            for (j, b) in single.iter().enumerate() {
                two_mode[i + j] += a * b;
            }
        }
        assert_relative_eq!(two_mode.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        for photons in [0usize, 2, 4, 6] {
            let cfg = GbsConfig::new(modes, photons, r, eta).unwrap();
            let formula = prob_postselect_n(&cfg).unwrap();
            assert_relative_eq!(formula, two_mode[photons], max_relative = 1e-10);
        }

        // Odd totals carry real mass under loss, so the even-N masses sum
        // to strictly less than one.
        let even_sum: f64 = (0..=20)
            .step_by(2)
            .map(|n| {
                let cfg = GbsConfig::new(modes, n, r, eta).unwrap();
                prob_postselect_n(&cfg).unwrap()
            })
            .sum();
        assert!(even_sum > 0.9);
        assert!(even_sum < 1.0 - 1e-3);
        let odd_sum: f64 = (1..=21).step_by(2).map(|n| two_mode[n]).sum();
        assert_relative_eq!(even_sum + odd_sum, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn lossless_counting_is_negative_binomial() {
        for (modes, photons) in [(4usize, 2usize), (8, 4)] {
            let cfg = GbsConfig::new(modes, photons, 0.35, 1.0).unwrap();
            let t = cfg.tanh_r();
            let expected = ln_binomial(
                (modes / 2 + photons / 2 - 1) as u64,
                (photons / 2) as u64,
            )
            .exp()
                * t.powi(photons as i32)
                / cfg.r.cosh().powi(modes as i32);
            let got = prob_postselect_n(&cfg).unwrap();
            assert_relative_eq!(got, expected, max_relative = 1e-12);
        }

        // Without loss the even-photon masses exhaust the distribution.
        let sum: f64 = (0..=20)
            .step_by(2)
            .map(|n| {
                let cfg = GbsConfig::new(2, n, 0.4, 1.0).unwrap();
                prob_postselect_n(&cfg).unwrap()
            })
            .sum();
        assert!(sum >= 1.0 - 1e-8);
    }

    #[test]
    fn vacuum_probability_matches_q_determinant() {
        use crate::gaussian::{apply_loss, lossy_q_det_closed_form, q_representation_det,
            squeezed_vacuum_cov};
        let (modes, r, eta) = (4usize, 0.45f64, 0.65f64);
        let cfg = GbsConfig::new(modes, 0, r, eta).unwrap();
        let pr0 = prob_postselect_n(&cfg).unwrap();

        let closed = lossy_q_det_closed_form(modes, r, eta);
        assert_relative_eq!(pr0, closed.sqrt().recip(), max_relative = 1e-12);

        let cov = apply_loss(&squeezed_vacuum_cov(modes, r).unwrap(), eta).unwrap();
        let det = q_representation_det(&cov).unwrap();
        assert_relative_eq!(pr0, det.sqrt().recip(), max_relative = 1e-10);
    }

    #[test]
    fn joint_weights_sum_to_counting_probability() {
        let (modes, photons, r, eta) = (2usize, 2usize, 0.4f64, 0.7f64);
        let cfg = GbsConfig::new(modes, photons, r, eta).unwrap();
        let u = sample_haar_unitary(Seed::new(11), modes).unwrap();
        let total: f64 = enumerate_outcomes(modes, photons)
            .unwrap()
            .iter()
            .map(|s| prob_no_postselect(&u, s, &cfg).unwrap())
            .sum();
        let pr = prob_postselect_n(&cfg).unwrap();
        assert!((total - pr).abs() <= 1e-10 * pr.max(1.0));
    }

    #[test]
    fn postselected_distribution_normalizes() {
        for (modes, photons, eta) in [(2usize, 2usize, 1.0f64), (2, 2, 0.7), (4, 2, 0.8)] {
            let cfg = GbsConfig::new(modes, photons, 0.5, eta).unwrap();
            let u = sample_haar_unitary(Seed::new(23), modes).unwrap();
            let dist = enumerate_distribution(&u, &cfg).unwrap();
            let total: f64 = dist.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() <= 1e-9, "sum = {total}");
            assert!(dist.iter().all(|&(_, p)| p >= -1e-12));
        }
    }

    #[test]
    fn postselected_times_counting_equals_joint() {
        let (modes, photons, r, eta) = (4usize, 2usize, 0.5f64, 0.75f64);
        let cfg = GbsConfig::new(modes, photons, r, eta).unwrap();
        let u = sample_haar_unitary(Seed::new(37), modes).unwrap();
        let pr = prob_postselect_n(&cfg).unwrap();
        for occ in [[1usize, 1], [1, 2], [2, 4], [3, 3], [4, 4]] {
            let s = outcome(&occ, modes);
            let p = prob_postselected(&u, &s, &cfg).unwrap();
            let q = prob_no_postselect(&u, &s, &cfg).unwrap();
            assert!((p * pr - q).abs() <= 1e-10 * q.abs().max(1e-12), "pattern {occ:?}");
        }
    }

    #[test]
    fn lossless_postselected_is_squared_hafnian() {
        use crate::hafnian::{sub_symmetric, ComplexSymMatrix};
        let modes = 4;
        let cfg = GbsConfig::new(modes, 2, 0.5, 1.0).unwrap();
        let u = sample_haar_unitary(Seed::new(5), modes).unwrap();
        let uut = ComplexSymMatrix::from_matrix(&(&u * u.transpose())).unwrap();
        let s = outcome(&[1, 3], modes);
        let sub = sub_symmetric(&uut, &s.zero_based()).unwrap();
        let haf = haf_fast(&sub).unwrap();
        let expected = haf.norm_sqr() / ln_binomial(2, 1).exp();
        let got = prob_postselected(&u, &s, &cfg).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-10);
    }

    #[test]
    fn zero_transmission_degenerates() {
        let vac = GbsConfig::new(4, 0, 0.5, 0.0).unwrap();
        assert_eq!(prob_postselect_n(&vac).unwrap(), 1.0);

        let cfg = GbsConfig::new(4, 2, 0.5, 0.0).unwrap();
        assert_eq!(prob_postselect_n(&cfg).unwrap(), 0.0);
        let u = sample_haar_unitary(Seed::new(2), 4).unwrap();
        let s = outcome(&[1, 2], 4);
        assert_eq!(prob_no_postselect(&u, &s, &cfg).unwrap(), 0.0);
        assert!(matches!(
            prob_postselected(&u, &s, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn enumeration_respects_size_ceiling() {
        let cfg = GbsConfig::new(1000, 4, 0.2, 0.9).unwrap();
        let u = DMatrix::identity(2, 2).map(|x: f64| Complex64::new(x, 0.0));
        assert!(matches!(
            enumerate_distribution(&u, &cfg),
            Err(Error::SizeLimit(_))
        ));
    }

    #[test]
    fn distribution_is_continuous_in_eta_near_one() {
        let modes = 4;
        let u = sample_haar_unitary(Seed::new(9), modes).unwrap();
        let ideal = GbsConfig::new(modes, 2, 0.2, 1.0).unwrap();
        let near = GbsConfig::new(modes, 2, 0.2, 0.999).unwrap();
        let a = enumerate_distribution(&u, &ideal).unwrap();
        let b = enumerate_distribution(&u, &near).unwrap();
        let tvd: f64 = a
            .iter()
            .zip(&b)
            .map(|((_, p), (_, q))| (p - q).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tvd < 0.01, "tvd = {tvd}");
    }

    #[test]
    fn relabeled_modes_permute_the_distribution() {
        let modes = 4;
        let cfg = GbsConfig::new(modes, 2, 0.4, 0.85).unwrap();
        let u = sample_haar_unitary(Seed::new(41), modes).unwrap();
        // Swap modes 1 and 2 of the device by swapping rows of U.
        let mut up = u.clone();
        up.swap_rows(0, 1);
        let relabel = |occ: &[usize]| {
            let mut v: Vec<usize> = occ
                .iter()
                .map(|&s| match s {
                    1 => 2,
                    2 => 1,
                    other => other,
                })
                .collect();
            v.sort_unstable();
            v
        };
        for (s, p) in enumerate_distribution(&u, &cfg).unwrap() {
            let sp = Outcome::new(relabel(s.occupied()), modes).unwrap();
            let pp = prob_postselected(&up, &sp, &cfg).unwrap();
            assert_relative_eq!(p, pp, max_relative = 1e-9, epsilon = 1e-13);
        }
    }

    #[test]
    fn yield_table_matches_closed_form_at_unit_transmission() {
        // N=2, M=64, eta=1, sinh^2 r = 1/32: Pr[2] = 32 t^2 / cosh^64 r.
        let cfg = GbsConfig::with_auto_r(64, 2, 1.0).unwrap();
        let t2 = (1.0f64 / 32.0) / (1.0 + 1.0 / 32.0);
        let cosh2: f64 = 1.0 + 1.0 / 32.0;
        let expected = 32.0 * t2 / cosh2.powi(32);
        assert_relative_eq!(
            prob_postselect_n(&cfg).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn yield_table_rows_are_calibrated() {
        let rows = postselect_lower_bound_check(6).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_eq!(row.modes, row.photons.pow(3));
            assert_relative_eq!(
                row.eta * row.modes as f64 * row.r.sinh().powi(2),
                row.photons as f64,
                max_relative = 1e-12
            );
            assert!(row.pr_n > 0.0);
            assert_relative_eq!(
                row.pr_sqrt_n,
                row.pr_n * (row.photons as f64).sqrt(),
                max_relative = 1e-15
            );
        }
    }

    #[test]
    fn envelope_holds_on_calibrated_grid_and_grows_with_loss() {
        let mut values = Vec::new();
        for photons in [2usize, 4, 6] {
            let modes = photons.pow(3);
            let n = photons as f64;
            for loss in [0.0, 0.5 / n.sqrt(), 1.0 / n.sqrt()] {
                let cfg = GbsConfig::with_auto_r(modes, photons, 1.0 - loss).unwrap();
                let check = q_upper_bound_check(&cfg).unwrap();
                assert!(check.in_regime);
                assert!(check.holds, "Q = {} vs bound {}", check.value, check.bound);
                if photons == 2 {
                    values.push(check.value);
                }
            }
        }
        // More loss means a larger Q on the calibrated family.
        assert!(values.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        assert_relative_eq!(values[0], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn q_factor_is_positive_and_bounded_below_by_prefactor(
            seed in 0u64..200,
            modes_half in 1usize..6,
            photons_half in 1usize..3,
            r in 0.05f64..1.0,
            eta in 0.5f64..1.0,
        ) {
            let _ = seed;
            let modes = 2 * modes_half;
            let photons = 2 * photons_half;
            let cfg = GbsConfig::new(modes, photons, r, eta).unwrap();
            if cfg.envelope_ratio() < 1.0 {
                let q = q_factor_adaptive(&cfg, 1e-10).unwrap();
                prop_assert!(q.value.is_finite());
                prop_assert!(q.value > 0.0);
                prop_assert!(q.error_bound >= 0.0);
                // The series starts at 1, so Q is at least the prefactor.
                prop_assert!(q.value >= q_prefactor(&cfg) * (1.0 - 1e-12));
            }
        }
    }
}
