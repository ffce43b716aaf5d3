//! Deterministic randomness: master seeds, named substreams, Ginibre and Haar
//! sampling.
//!
//! Every stochastic routine takes a [`Seed`] and derives an independent
//! substream per (domain label, index) pair. The derivation is pinned so that
//! results reproduce bit for bit on every platform: the master seed is XORed
//! with the FNV-1a hash of the label, passed through SplitMix64, XORed with
//! the index, passed through SplitMix64 again, and the result keys
//! `ChaCha12Rng::seed_from_u64`. Parallel loops hand each trial its own
//! substream, which makes results independent of scheduling and thread count.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Master seed for an experiment. Plain data; copy freely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Seed {
    pub value: u64,
}

impl Seed {
    pub fn new(value: u64) -> Self {
        Seed { value }
    }

    /// Derives the seed of the substream `(label, index)`.
    pub fn child(self, label: &str, index: u64) -> Seed {
        let mixed = splitmix64(self.value ^ fnv1a64(label.as_bytes()));
        Seed {
            value: splitmix64(mixed ^ index),
        }
    }

    /// Generator keyed by this seed alone.
    pub fn rng(self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.value)
    }

    /// Generator for the substream `(label, index)`.
    pub fn stream(self, label: &str, index: u64) -> ChaCha12Rng {
        self.child(label, index).rng()
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed { value }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Samples a `rows x cols` matrix of i.i.d. standard complex Gaussians with
/// `E|x_ij|^2 = 1` (real and imaginary parts each N(0, 1/2)).
///
/// Entries are drawn in row-major order, one (re, im) pair per entry, so the
/// matrix is a pure function of the seed and the shape.
pub fn sample_ginibre(seed: Seed, rows: usize, cols: usize) -> Result<DMatrix<Complex64>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("ginibre matrix must have nonzero shape"));
    }
    let mut rng = seed.rng();
    let mut entries = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        entries.push(Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &entries))
}

/// Ceiling on [`sample_haar_unitary`] dimensions; the unitarity residual is
/// guaranteed below 1e-12 up to this size.
pub const MAX_HAAR_DIM: usize = 64;

/// Samples a Haar-distributed `dim x dim` unitary.
///
/// A Ginibre matrix is QR-factored and the Q columns are rephased by
/// `r_jj / |r_jj|`. The rephasing makes the distribution independent of the
/// QR sign convention, so the output is Haar no matter how the factorization
/// breaks ties.
pub fn sample_haar_unitary(seed: Seed, dim: usize) -> Result<DMatrix<Complex64>> {
    if dim == 0 {
        return Err(Error::invalid("unitary dimension must be positive"));
    }
    if dim > MAX_HAAR_DIM {
        return Err(Error::size(format!(
            "unitary dimension {dim} exceeds ceiling {MAX_HAAR_DIM}"
        )));
    }
    let g = sample_ginibre(seed, dim, dim)?;
    let qr = g.qr();
    let r_diag: Vec<Complex64> = (0..dim).map(|j| qr.r()[(j, j)]).collect();
    let mut u = qr.q();
    for (j, rjj) in r_diag.iter().enumerate() {
        let norm = rjj.norm();
        if norm == 0.0 {
            return Err(Error::numerical("QR produced a zero diagonal entry"));
        }
        let phase = rjj / norm;
        for i in 0..dim {
            u[(i, j)] *= phase;
        }
    }
    Ok(u)
}
