#![forbid(unsafe_code)]
//! Numerical laboratory for lossy Gaussian boson sampling.
//!
//! The crate models M squeezed-vacuum modes sent through an M-mode
//! interferometer with uniform photon loss, post-selected on a total photon
//! count N. It provides:
//!
//! * exact hafnian engines and the lossy block matrices they act on ([`hafnian`]),
//! * covariance-matrix bookkeeping for Gaussian states under loss ([`gaussian`]),
//! * outcome probabilities with and without post-selection, and the
//!   hypergeometric normalization factor Q ([`probability`]),
//! * the loss-series truncation and noisy-extrapolation pipeline ([`extrapolate`]),
//! * Monte Carlo moment checks and distribution-distance reports ([`stats`]).
//!
//! All randomness flows through [`rng::Seed`] substreams, so every experiment
//! is reproducible from a single master seed and invariant to thread count.
//! Logarithms are natural logs throughout the crate.

pub mod error;
pub mod extrapolate;
pub mod gaussian;
pub mod hafnian;
pub mod linalg;
pub mod outcome;
pub mod probability;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
