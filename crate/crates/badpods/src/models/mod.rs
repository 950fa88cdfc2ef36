//! Concrete state-space models: the two-group SIR epidemic, the moving
//! source with directional sensors, and a linear-Gaussian model with
//! closed-form oracles used for verification.

mod lin_gauss;
mod sir;
mod source;

pub use lin_gauss::{exact_eig, KalmanFilter, LinGaussConfig, LinGaussModel};
pub use sir::{SirConfig, SirModel};
pub use source::{pointing_error, SourceConfig, SourceModel};

use std::sync::OnceLock;

/// ln(n!) with a table for the small counts that dominate Poisson
/// observations; falls back to ln-gamma beyond the table.
pub(crate) fn ln_factorial(n: f64) -> f64 {
    const TABLE_SIZE: usize = 4096;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = vec![0.0; TABLE_SIZE];
        for i in 2..TABLE_SIZE {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    });
    let k = n as usize;
    if n >= 0.0 && n.fract() == 0.0 && k < TABLE_SIZE {
        table[k]
    } else {
        statrs::function::gamma::ln_gamma(n + 1.0)
    }
}
