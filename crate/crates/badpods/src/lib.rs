//! Online Bayesian adaptive experimental design for partially observable
//! state-space models.
//!
//! The library combines three ingredients:
//!
//! - a nested particle filter ([`npf`]) that tracks the joint posterior over
//!   static parameters and latent states online,
//! - nested Monte Carlo estimators of the expected information gain and its
//!   design gradient ([`eig`]),
//! - stochastic gradient ascent over reparameterized design spaces
//!   ([`design`]), with random and static (offline-optimized) baselines.
//!
//! Concrete models live in [`models`]: a two-group stochastic SIR epidemic
//! with Poisson count observations, a moving acoustic source tracked by
//! directional sensors with log-normal intensity observations, and a
//! linear-Gaussian model with closed-form Kalman/information-gain oracles
//! used for verification.
//!
//! [`experiments`] provides the sequential run harness, metrics (total
//! expected information gain, pointing error) and multi-seed aggregation
//! with BCa bootstrap confidence intervals. The `badpods` binary drives all
//! of it from TOML configuration files.

pub mod config;
pub mod design;
pub mod eig;
pub mod error;
pub mod experiments;
pub mod models;
pub mod npf;
pub mod rng;
pub mod ssm;
pub mod stats;

pub use error::Error;

/// Numeric floor for log-densities and mixture terms. Anything below this is
/// treated as a degeneracy signal rather than silently renormalized.
pub const LOG_FLOOR: f64 = -700.0;

/// Compensated (Kahan) summation, used where permutation invariance of
/// weighted reductions matters.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Sum of a slice with compensated accumulation.
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}
