//! Detection outcomes: sorted multisets of occupied modes.
//!
//! An outcome lists one entry per detected photon, so a mode that caught two
//! photons appears twice (a collision). Mode labels are 1-based in the public
//! interface, matching how patterns are written on the command line.

use crate::error::{Error, Result};

/// Ceiling on the number of outcomes [`enumerate_outcomes`] will produce.
pub const MAX_ENUMERATION: u128 = 100_000;

/// A detection pattern with a fixed total photon number.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Outcome {
    /// Occupied modes, 1-based, sorted ascending, one entry per photon.
    occupied: Vec<usize>,
    /// Number of modes of the device the pattern lives on.
    total_modes: usize,
}

impl Outcome {
    /// Builds an outcome on an `total_modes`-mode device. `occupied` is sorted
    /// internally; labels must lie in `1..=total_modes`.
    pub fn new(mut occupied: Vec<usize>, total_modes: usize) -> Result<Self> {
        if total_modes == 0 {
            return Err(Error::invalid("device must have at least one mode"));
        }
        for &s in &occupied {
            if s == 0 || s > total_modes {
                return Err(Error::invalid(format!(
                    "mode label {s} outside 1..={total_modes}"
                )));
            }
        }
        occupied.sort_unstable();
        Ok(Outcome {
            occupied,
            total_modes,
        })
    }

    /// Total photon number N.
    pub fn photons(&self) -> usize {
        self.occupied.len()
    }

    pub fn total_modes(&self) -> usize {
        self.total_modes
    }

    /// Sorted 1-based labels, one per photon.
    pub fn occupied(&self) -> &[usize] {
        &self.occupied
    }

    /// 0-based row/column indices into an M x M mode matrix.
    pub fn zero_based(&self) -> Vec<usize> {
        self.occupied.iter().map(|s| s - 1).collect()
    }

    /// (mode, photon count) pairs for occupied modes.
    pub fn multiplicities(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &s in &self.occupied {
            match out.last_mut() {
                Some((mode, count)) if *mode == s => *count += 1,
                _ => out.push((s, 1)),
            }
        }
        out
    }

    /// Product of factorials of the per-mode photon counts.
    pub fn mu(&self) -> f64 {
        self.multiplicities()
            .iter()
            .map(|&(_, c)| factorial_f64(c))
            .product()
    }

    pub fn is_collision_free(&self) -> bool {
        self.occupied.windows(2).all(|w| w[0] != w[1])
    }

    /// Pattern as `"1,1,3"`. The empty pattern renders as `"-"`.
    pub fn label(&self) -> String {
        if self.occupied.is_empty() {
            return "-".to_owned();
        }
        self.occupied
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn factorial_f64(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Number of N-photon patterns on M modes: C(M+N-1, N).
pub fn outcome_count(modes: usize, photons: usize) -> u128 {
    binomial_u128(modes as u128 + photons as u128 - 1, photons as u128)
}

fn binomial_u128(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// All N-photon patterns on M modes, in lexicographic order of their sorted
/// labels. Guarded by [`MAX_ENUMERATION`].
pub fn enumerate_outcomes(modes: usize, photons: usize) -> Result<Vec<Outcome>> {
    if modes == 0 {
        return Err(Error::invalid("device must have at least one mode"));
    }
    let count = outcome_count(modes, photons);
    if count > MAX_ENUMERATION {
        return Err(Error::size(format!(
            "{count} outcomes for M={modes}, N={photons} exceeds ceiling {MAX_ENUMERATION}"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = Vec::with_capacity(photons);
    fill(modes, photons, 1, &mut current, &mut out);
    Ok(out)
}

fn fill(
    modes: usize,
    remaining: usize,
    lowest: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Outcome>,
) {
    if remaining == 0 {
        out.push(Outcome {
            occupied: current.clone(),
            total_modes: modes,
        });
        return;
    }
    for s in lowest..=modes {
        current.push(s);
        fill(modes, remaining - 1, s, current, out);
        current.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplicity_factor() {
        let s = Outcome::new(vec![2, 1, 1], 4).unwrap();
        assert_eq!(s.occupied(), &[1, 1, 2]);
        assert_eq!(s.mu(), 2.0);
        assert!(!s.is_collision_free());
        let s = Outcome::new(vec![1, 1, 2, 2], 4).unwrap();
        assert_eq!(s.mu(), 4.0);
        let s = Outcome::new(vec![3, 1], 4).unwrap();
        assert_eq!(s.mu(), 1.0);
        assert!(s.is_collision_free());
        assert_eq!(Outcome::new(vec![], 2).unwrap().mu(), 1.0);
    }

    #[test]
    fn labels_validate() {
        assert!(Outcome::new(vec![0], 2).is_err());
        assert!(Outcome::new(vec![3], 2).is_err());
        assert!(Outcome::new(vec![2], 2).is_ok());
    }

    #[test]
    fn enumeration_counts_match_binomial() {
        for (m, n) in [(2usize, 2usize), (4, 2), (4, 4), (6, 2), (5, 3)] {
            let all = enumerate_outcomes(m, n).unwrap();
            assert_eq!(all.len() as u128, outcome_count(m, n));
            for s in &all {
                assert_eq!(s.photons(), n);
            }
        }
        assert_eq!(outcome_count(4, 2), 10);
        assert_eq!(outcome_count(4, 4), 35);
    }

    #[test]
    fn enumeration_is_sorted_and_unique() {
        let all = enumerate_outcomes(5, 3).unwrap();
        for w in all.windows(2) {
            assert!(w[0].occupied() < w[1].occupied());
        }
    }

    #[test]
    fn enumeration_guard_trips() {
        assert!(matches!(
            enumerate_outcomes(1000, 6),
            Err(Error::SizeLimit(_))
        ));
    }

    #[test]
    fn zero_photons_has_single_empty_outcome() {
        let all = enumerate_outcomes(3, 0).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].photons(), 0);
        assert_eq!(all[0].label(), "-");
    }
}
