//! Statistical identities and their Monte Carlo verification: the analytic
//! second moment of squared hafnians of Gaussian matrix products, and the
//! distance chain between the lossy and the ideal device (exact TVD, the
//! fidelity bound, and the linear loss bound).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::lossy_fidelity_closed_form;
use crate::hafnian::{haf_fast, ComplexSymMatrix};
use crate::probability::{
    enumerate_distribution, ln_binomial, ln_factorial, GbsConfig,
};
use crate::rng::{sample_ginibre, Seed};

/// Largest photon count for Monte Carlo moment runs; keeps the per-sample
/// hafnian cheap enough for 10^4 draws.
const MAX_MOMENT_PHOTONS: usize = 8;

fn checked_binomial_u128(n: u128, k: u128) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut num = 1u128;
    let mut den = 1u128;
    for i in 0..k {
        num = num.checked_mul(n - i)?;
        den = den.checked_mul(i + 1)?;
    }
    Some(num / den)
}

fn checked_factorial_u128(n: u128) -> Option<u128> {
    let mut acc = 1u128;
    for i in 2..=n {
        acc = acc.checked_mul(i)?;
    }
    Some(acc)
}

/// E |Haf(X X^T)|^2 over N x M Ginibre X with unit-variance entries:
/// C(M/2 + N/2 - 1, N/2) * N!. Exact integer arithmetic when the value
/// fits in 128 bits, log-space otherwise. At N = 2 the value is exactly M.
pub fn haf_second_moment(modes: usize, photons: usize) -> Result<f64> {
    if modes == 0 || !modes.is_multiple_of(2) {
        return Err(Error::invalid("mode count must be even and positive"));
    }
    if !photons.is_multiple_of(2) {
        return Err(Error::invalid("photon count must be even"));
    }
    if photons == 0 {
        return Ok(1.0);
    }
    let n_top = (modes / 2 + photons / 2 - 1) as u128;
    let k = (photons / 2) as u128;
    let exact = checked_binomial_u128(n_top, k)
        .and_then(|c| checked_factorial_u128(photons as u128).and_then(|f| c.checked_mul(f)));
    match exact {
        Some(v) => Ok(v as f64),
        None => Ok((ln_binomial(n_top as u64, k as u64) + ln_factorial(photons as u64)).exp()),
    }
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::invalid("need 0 <= successes <= trials, trials > 0"));
    }
    let z = 1.96f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let spread = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok((
        ((center - spread) / denom).max(0.0),
        ((center + spread) / denom).min(1.0),
    ))
}

/// Monte Carlo versus analytic second moment of |Haf(X X^T)|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentReport {
    pub photons: usize,
    pub modes: usize,
    pub samples: usize,
    pub blocks: usize,
    pub empirical_mean: f64,
    pub standard_error: f64,
    /// (mean - analytic) / standard_error; indicative only, the sample
    /// distribution is heavy-tailed.
    pub z_score: f64,
    /// Median of the `blocks` block means, the robust acceptance statistic.
    pub median_of_means: f64,
    pub analytic: f64,
}

/// Draws `samples` fresh Ginibre matrices and compares the empirical mean
/// of |Haf(X X^T)|^2 with the analytic value. Trials use per-index seed
/// substreams, so the report is independent of scheduling.
pub fn hafnian_moment_mc(
    photons: usize,
    modes: usize,
    samples: usize,
    blocks: usize,
    seed: Seed,
) -> Result<MomentReport> {
    if photons == 0 || !photons.is_multiple_of(2) || photons > MAX_MOMENT_PHOTONS {
        return Err(Error::invalid(format!(
            "photon count must be even in 2..={MAX_MOMENT_PHOTONS}"
        )));
    }
    if samples < 100 {
        return Err(Error::invalid("need at least 100 samples"));
    }
    if blocks == 0 || !samples.is_multiple_of(blocks) {
        return Err(Error::invalid("block count must divide the sample count"));
    }
    let analytic = haf_second_moment(modes, photons)?;
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let x = sample_ginibre(seed.child("moment", i as u64), photons, modes)?;
            let b = ComplexSymMatrix::from_matrix(&(&x * x.transpose()))?;
            Ok(haf_fast(&b)?.norm_sqr())
        })
        .collect::<Result<_>>()?;
    let n = samples as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let standard_error = (var / n).sqrt();
    let block_len = samples / blocks;
    let mut block_means: Vec<f64> = values
        .chunks(block_len)
        .map(|c| c.iter().sum::<f64>() / block_len as f64)
        .collect();
    block_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_of_means = if blocks % 2 == 1 {
        block_means[blocks / 2]
    } else {
        0.5 * (block_means[blocks / 2 - 1] + block_means[blocks / 2])
    };
    Ok(MomentReport {
        photons,
        modes,
        samples,
        blocks,
        empirical_mean: mean,
        standard_error,
        z_score: (mean - analytic) / standard_error,
        median_of_means,
        analytic,
    })
}

/// Total variation distance between the post-selected distributions of two
/// parameter sets sharing the same device size and photon count.
pub fn exact_tvd(
    u: &DMatrix<Complex64>,
    cfg_a: &GbsConfig,
    cfg_b: &GbsConfig,
) -> Result<f64> {
    if cfg_a.modes != cfg_b.modes || cfg_a.photons != cfg_b.photons {
        return Err(Error::invalid(
            "distributions must share mode and photon counts",
        ));
    }
    let da = enumerate_distribution(u, cfg_a)?;
    let db = enumerate_distribution(u, cfg_b)?;
    Ok(da
        .iter()
        .zip(&db)
        .map(|((_, p), (_, q))| (p - q).abs())
        .sum::<f64>()
        / 2.0)
}

/// The three-tier distance chain between the lossy device and its lossless
/// twin at the same squeezing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvdReport {
    pub modes: usize,
    pub photons: usize,
    pub r: f64,
    pub eta: f64,
    /// TVD of the post-selected N-photon distributions, a coarse-graining
    /// of the full-state distance, so it sits below both bounds.
    pub exact_tvd: f64,
    pub fidelity: f64,
    /// sqrt(1 - F), the fidelity tier.
    pub fidelity_bound: f64,
    /// sqrt((1-eta) M sinh^2 r), the linear tier.
    pub lemma_bound: f64,
    pub chain_ok: bool,
}

/// Evaluates the chain exact_tvd <= sqrt(1-F) <= sqrt((1-eta) M sinh^2 r).
/// Requires (1-eta) M sinh^2 r < 1; both configurations share `cfg.r`, the
/// comparison is loss-on versus loss-off for the same input state.
pub fn tvd_bound_report(u: &DMatrix<Complex64>, cfg: &GbsConfig) -> Result<TvdReport> {
    let linear = (1.0 - cfg.eta) * cfg.modes as f64 * cfg.r.sinh().powi(2);
    if linear >= 1.0 {
        return Err(Error::domain(
            "linear bound needs (1-eta) M sinh^2 r < 1",
        ));
    }
    let ideal = GbsConfig::new(cfg.modes, cfg.photons, cfg.r, 1.0)?;
    let tvd = exact_tvd(u, cfg, &ideal)?;
    let fidelity = lossy_fidelity_closed_form(cfg.modes, cfg.r, cfg.eta);
    let fidelity_bound = (1.0 - fidelity).max(0.0).sqrt();
    let lemma_bound = linear.sqrt();
    let chain_ok =
        tvd <= fidelity_bound + 1e-12 && fidelity_bound <= lemma_bound + 1e-12;
    Ok(TvdReport {
        modes: cfg.modes,
        photons: cfg.photons,
        r: cfg.r,
        eta: cfg.eta,
        exact_tvd: tvd,
        fidelity,
        fidelity_bound,
        lemma_bound,
        chain_ok,
    })
}

/// Transmission threshold that keeps the linear TVD budget within
/// (beta0 - beta1)^2: eta >= 1 - (beta0 - beta1)^2 / (M sinh^2 r),
/// clamped to [0, 1].
pub fn theorem3_threshold(beta0: f64, beta1: f64, modes: usize, r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&beta0) || !(0.0..1.0).contains(&beta1) || beta1 > beta0 {
        return Err(Error::invalid("need 0 <= beta1 <= beta0 < 1"));
    }
    if modes == 0 || !r.is_finite() || r <= 0.0 {
        return Err(Error::invalid("need a positive mode count and squeezing"));
    }
    let budget = (beta0 - beta1).powi(2) / (modes as f64 * r.sinh().powi(2));
    Ok((1.0 - budget).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_haar_unitary;
    use approx::assert_relative_eq;

    #[test]
    fn second_moment_is_modes_at_two_photons() {
        for modes in [2usize, 8, 32, 500] {
            assert_eq!(haf_second_moment(modes, 2).unwrap(), modes as f64);
        }
    }

    #[test]
    fn second_moment_integer_and_log_paths_agree() {
        // C(130, 3) * 720 = 357760 * 720.
        let exact = haf_second_moment(256, 6).unwrap();
        assert_eq!(exact, 257_587_200.0);
        let logged = (ln_binomial(130, 3) + ln_factorial(6)).exp();
        assert_relative_eq!(exact, logged, max_relative = 1e-12);
    }

    #[test]
    fn second_moment_guards_arguments() {
        assert!(haf_second_moment(3, 2).is_err());
        assert!(haf_second_moment(4, 3).is_err());
        assert_eq!(haf_second_moment(4, 0).unwrap(), 1.0);
    }

    #[test]
    fn wilson_interval_behaves() {
        let (lo, hi) = wilson_interval(0, 500).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi < 0.01);
        let (_, hi_all) = wilson_interval(500, 500).unwrap();
        assert!(hi_all >= 1.0 - 1e-12);
        let (lo_half, hi_half) = wilson_interval(50, 100).unwrap();
        assert!(lo_half < 0.5 && 0.5 < hi_half);
        assert!(wilson_interval(5, 0).is_err());
    }

    #[test]
    fn moment_mc_agrees_at_two_photons() {
        let report = hafnian_moment_mc(2, 6, 2000, 20, Seed::new(7)).unwrap();
        assert_eq!(report.analytic, 6.0);
        // Median of means on an exponential-ish tail: generous band.
        assert!(
            (report.median_of_means - 6.0).abs() < 1.5,
            "median of means = {}",
            report.median_of_means
        );
        assert!(report.standard_error > 0.0);
    }

    #[test]
    fn moment_mc_is_scheduling_independent() {
        let a = hafnian_moment_mc(2, 4, 200, 10, Seed::new(3)).unwrap();
        let b = hafnian_moment_mc(2, 4, 200, 10, Seed::new(3)).unwrap();
        assert_eq!(a.empirical_mean.to_bits(), b.empirical_mean.to_bits());
        assert_eq!(a.median_of_means.to_bits(), b.median_of_means.to_bits());
    }

    #[test]
    fn submatrix_moment_matches_reduced_formula() {
        // Rows of a 4 x M Ginibre restricted to two indices are a fresh
        // 2 x M Ginibre, so the reduced moment is E = M.
        let modes = 8usize;
        let samples = 2000usize;
        let values: Vec<f64> = (0..samples)
            .map(|i| {
                let x = sample_ginibre(Seed::new(100).child("sub", i as u64), 4, modes).unwrap();
                let b = ComplexSymMatrix::from_matrix(&(&x * x.transpose())).unwrap();
                let sub = crate::hafnian::sub_symmetric(&b, &[0, 1]).unwrap();
                haf_fast(&sub).unwrap().norm_sqr()
            })
            .collect();
        let mut block_means: Vec<f64> = values
            .chunks(100)
            .map(|c| c.iter().sum::<f64>() / 100.0)
            .collect();
        block_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mom = 0.5 * (block_means[9] + block_means[10]);
        assert!((mom - modes as f64).abs() < 2.0, "median of means = {mom}");
    }

    #[test]
    fn moment_mc_guards_arguments() {
        assert!(hafnian_moment_mc(3, 4, 200, 10, Seed::new(0)).is_err());
        assert!(hafnian_moment_mc(10, 4, 200, 10, Seed::new(0)).is_err());
        assert!(hafnian_moment_mc(2, 4, 50, 10, Seed::new(0)).is_err());
        assert!(hafnian_moment_mc(2, 4, 200, 7, Seed::new(0)).is_err());
    }

    #[test]
    fn tvd_is_zero_at_equal_configs_and_symmetric() {
        let modes = 4;
        let u = sample_haar_unitary(Seed::new(17), modes).unwrap();
        let a = GbsConfig::new(modes, 2, 0.3, 0.9).unwrap();
        let b = GbsConfig::new(modes, 2, 0.3, 1.0).unwrap();
        assert_eq!(exact_tvd(&u, &a, &a).unwrap(), 0.0);
        let ab = exact_tvd(&u, &a, &b).unwrap();
        let ba = exact_tvd(&u, &b, &a).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!(ab > 0.0 && ab < 1.0);
    }

    #[test]
    fn tvd_chain_holds_at_a_lossy_point() {
        let modes = 4;
        let u = sample_haar_unitary(Seed::new(29), modes).unwrap();
        let cfg = GbsConfig::new(modes, 2, 0.3, 0.9).unwrap();
        let report = tvd_bound_report(&u, &cfg).unwrap();
        assert!(report.chain_ok);
        assert!(report.exact_tvd <= report.fidelity_bound);
        assert!(report.fidelity_bound <= report.lemma_bound);
        assert!(report.lemma_bound < 1.0);
    }

    #[test]
    fn tvd_chain_collapses_without_loss() {
        let modes = 4;
        let u = sample_haar_unitary(Seed::new(31), modes).unwrap();
        let cfg = GbsConfig::new(modes, 2, 0.3, 1.0).unwrap();
        let report = tvd_bound_report(&u, &cfg).unwrap();
        assert_eq!(report.exact_tvd, 0.0);
        assert!(report.fidelity_bound.abs() < 1e-7);
        assert_eq!(report.lemma_bound, 0.0);
        assert!(report.chain_ok);
    }

    #[test]
    fn tvd_report_rejects_oversized_linear_budget() {
        let modes = 4;
        let u = sample_haar_unitary(Seed::new(2), modes).unwrap();
        // (1-eta) M sinh^2 r = 0.5 * 4 * sinh^2(1.2) > 1.
        let cfg = GbsConfig::new(modes, 2, 1.2, 0.5).unwrap();
        assert!(matches!(
            tvd_bound_report(&u, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn threshold_matches_hand_arithmetic() {
        assert_eq!(theorem3_threshold(0.3, 0.3, 4, 0.5).unwrap(), 1.0);

        // sinh^2 r = 0.01: budget (0.2-0.1)^2 / (100 * 0.01) = 0.01.
        let r = 0.1f64.asinh();
        let eta = theorem3_threshold(0.2, 0.1, 100, r).unwrap();
        assert_relative_eq!(eta, 0.99, max_relative = 1e-12);

        assert_eq!(theorem3_threshold(0.9, 0.0, 2, 0.1).unwrap(), 0.0);
        assert!(theorem3_threshold(0.1, 0.2, 4, 0.5).is_err());
        assert!(theorem3_threshold(0.5, 0.1, 4, 0.0).is_err());
    }

    #[test]
    fn threshold_is_monotone_in_the_gap() {
        let r = 0.4;
        let tight = theorem3_threshold(0.2, 0.1, 8, r).unwrap();
        let loose = theorem3_threshold(0.5, 0.1, 8, r).unwrap();
        assert!(loose <= tight);
    }

    #[test]
    fn threshold_inverts_the_linear_bound() {
        // At eta = 1 - beta^2/(M sinh^2 r) the linear bound equals beta.
        let (beta, modes, r) = (0.1f64, 4usize, 0.4f64);
        let eta = theorem3_threshold(beta, 0.0, modes, r).unwrap();
        let bound = ((1.0 - eta) * modes as f64 * r.sinh().powi(2)).sqrt();
        assert_relative_eq!(bound, beta, max_relative = 1e-10);
    }
}
