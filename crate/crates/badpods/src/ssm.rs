//! Core state-space model types and the model interface.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static model parameters theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

/// Latent system state x_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vec<f64>);

/// Observation y_t. Count-valued observations are stored as reals; the
/// model's sampler is responsible for producing integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl ParamVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl StateVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per-coordinate support bounds of the parameter prior. Infinite bounds are
/// allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSupport {
    pub bounds: Vec<(f64, f64)>,
}

impl ParamSupport {
    pub fn unbounded(dim: usize) -> Self {
        Self { bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); dim] }
    }

    pub fn contains(&self, theta: &ParamVector) -> bool {
        theta.0.len() == self.bounds.len()
            && theta
                .0
                .iter()
                .zip(&self.bounds)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Fold a coordinate back into [lo, hi] by reflection at the boundaries.
    pub fn reflect(&self, coord: usize, mut x: f64) -> f64 {
        let (lo, hi) = self.bounds[coord];
        if !lo.is_finite() && !hi.is_finite() {
            return x;
        }
        if lo.is_finite() && hi.is_finite() {
            let w = hi - lo;
            if w <= 0.0 {
                return lo;
            }
            // Fold into [lo, lo + 2w) then mirror the upper half.
            let mut r = (x - lo).rem_euclid(2.0 * w);
            if r > w {
                r = 2.0 * w - r;
            }
            return lo + r;
        }
        // One-sided supports: a single reflection suffices for the jitter
        // magnitudes used here, but loop for safety.
        for _ in 0..64 {
            if lo.is_finite() && x < lo {
                x = 2.0 * lo - x;
            } else if hi.is_finite() && x > hi {
                x = 2.0 * hi - x;
            } else {
                break;
            }
        }
        x
    }
}

/// Reparameterization connecting the optimizer's unconstrained latent vector
/// to a constrained design value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reparam {
    /// Designs on the probability simplex of the given dimension. The
    /// two-component case uses a single logistic latent; higher dimensions
    /// use a softmax with the first latent pinned to zero.
    SimplexSigmoid { dim: usize },
    /// Angular designs, each component wrapped to [-pi, pi).
    AngleWrap { dim: usize },
    Unconstrained { dim: usize },
}

impl Reparam {
    pub fn value_dim(&self) -> usize {
        match *self {
            Reparam::SimplexSigmoid { dim } => dim,
            Reparam::AngleWrap { dim } => dim,
            Reparam::Unconstrained { dim } => dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match *self {
            Reparam::SimplexSigmoid { dim } => dim - 1,
            Reparam::AngleWrap { dim } => dim,
            Reparam::Unconstrained { dim } => dim,
        }
    }
}

/// Wrap an angle to the principal interval [-pi, pi).
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (x + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    // rem_euclid can return exactly 2*pi - eps -> w == pi after rounding.
    if w >= std::f64::consts::PI { -std::f64::consts::PI } else { w }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// A design point: constrained values together with the unconstrained latent
/// they were produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignVector {
    pub values: Vec<f64>,
    pub latent: Vec<f64>,
    pub reparam: Reparam,
}

/// Map a latent vector through a reparameterization.
pub fn transform_design(latent: &[f64], reparam: Reparam) -> Result<DesignVector> {
    if latent.len() != reparam.latent_dim() {
        return Err(Error::DimensionMismatch {
            context: "transform_design latent",
            expected: reparam.latent_dim(),
            got: latent.len(),
        });
    }
    let values = match reparam {
        Reparam::SimplexSigmoid { dim: 2 } => {
            let p = logistic(latent[0]);
            vec![p, 1.0 - p]
        }
        Reparam::SimplexSigmoid { dim } => {
            // Softmax over [0, z_1, ..., z_{dim-1}].
            let mut z = Vec::with_capacity(dim);
            z.push(0.0);
            z.extend_from_slice(latent);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
        Reparam::AngleWrap { .. } => latent.iter().map(|&z| wrap_angle(z)).collect(),
        Reparam::Unconstrained { .. } => latent.to_vec(),
    };
    Ok(DesignVector { values, latent: latent.to_vec(), reparam })
}

impl DesignVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Chain-rule factor: pull a gradient with respect to the design values
    /// back to the latent coordinates.
    pub fn grad_values_to_latent(&self, grad_values: &[f64]) -> Result<Vec<f64>> {
        if grad_values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                context: "grad_values_to_latent",
                expected: self.values.len(),
                got: grad_values.len(),
            });
        }
        Ok(match self.reparam {
            Reparam::SimplexSigmoid { dim: 2 } => {
                let p = self.values[0];
                vec![(grad_values[0] - grad_values[1]) * p * (1.0 - p)]
            }
            Reparam::SimplexSigmoid { dim } => {
                // d v_i / d z_j = v_i (delta_ij - v_j), z_0 pinned.
                let v = &self.values;
                let dot: f64 = grad_values.iter().zip(v).map(|(g, vi)| g * vi).sum();
                (1..dim).map(|j| v[j] * (grad_values[j] - dot)).collect()
            }
            // Wrapping has unit derivative almost everywhere.
            Reparam::AngleWrap { .. } | Reparam::Unconstrained { .. } => grad_values.to_vec(),
        })
    }

    /// Check the constraint set this design claims to satisfy.
    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        match self.reparam {
            Reparam::SimplexSigmoid { .. } => {
                let sum: f64 = self.values.iter().sum();
                self.values.iter().all(|&v| v > 0.0 && v < 1.0) && (sum - 1.0).abs() <= tol
            }
            Reparam::AngleWrap { .. } => self
                .values
                .iter()
                .all(|&v| (-std::f64::consts::PI..std::f64::consts::PI).contains(&v)),
            Reparam::Unconstrained { .. } => self.values.iter().all(|v| v.is_finite()),
        }
    }
}

/// Experiment history h_t = (xi_{1:t}, y_{1:t}).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct History {
    pub designs: Vec<DesignVector>,
    pub observations: Vec<Observation>,
}

impl History {
    pub fn push(&mut self, design: DesignVector, observation: Observation) {
        self.designs.push(design);
        self.observations.push(observation);
    }

    pub fn len(&self) -> usize {
        debug_assert_eq!(self.designs.len(), self.observations.len());
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A weighted particle handed to [`ModelSpec::make_obs_bank`].
pub struct BankParticle<'a> {
    pub state: &'a StateVector,
    pub theta: &'a ParamVector,
    pub log_weight: f64,
    /// Design-gradient of the transition log-density at this particle given
    /// its ancestor, when the transition depends on the design. `None` means
    /// identically zero.
    pub transition_score: Option<&'a [f64]>,
}

/// A particle bank prepared for repeated observation-density queries at one
/// fixed design. Implementations precompute whatever is reusable across
/// observations so that the per-observation cost is a tight loop.
pub trait ObsBank: Send + Sync {
    /// log sum_p exp(log w_p) g(y | x_p, theta_p, xi), for a prepared
    /// observation (see [`ModelSpec::prepare_y`]). Log-densities are floored
    /// at [`crate::LOG_FLOOR`].
    fn log_mixture(&self, prepared_y: &[f64]) -> f64;

    /// As [`ObsBank::log_mixture`], additionally writing the self-normalized
    /// gradient sum_p u_p(y) [grad_xi log g + grad_xi log f] into `grad`,
    /// where u_p are the posterior-weighted observation weights. This is the
    /// ratio grad(L)/L (resp. grad(Z)/Z) for the bank's particle set.
    fn log_mixture_grad(&self, prepared_y: &[f64], grad: &mut [f64]) -> f64;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The contract every concrete state-space model implements.
///
/// Implementations must be stateless and callable concurrently; all
/// randomness comes in through the `rng` arguments.
pub trait ModelSpec: Send + Sync {
    fn name(&self) -> &'static str;
    fn param_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn reparam(&self) -> Reparam;
    fn param_support(&self) -> ParamSupport;

    fn sample_param_prior(&self, rng: &mut dyn RngCore) -> ParamVector;
    fn sample_state_prior(&self, rng: &mut dyn RngCore) -> StateVector;
    fn sample_transition(
        &self,
        prev: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> StateVector;
    fn log_transition(
        &self,
        next: &StateVector,
        prev: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> f64;
    fn sample_observation(
        &self,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> Observation;
    fn log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<f64>;

    /// Zero vector by default: most transitions do not depend on the design.
    fn grad_xi_log_transition(
        &self,
        _next: &StateVector,
        _prev: &StateVector,
        _theta: &ParamVector,
        _xi: &DesignVector,
    ) -> Vec<f64> {
        vec![0.0; self.reparam().value_dim()]
    }

    fn grad_xi_log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<Vec<f64>>;

    /// Feasibility projection; identity for unconstrained states.
    fn project_state(&self, state: StateVector) -> StateVector {
        state
    }

    /// Validate an observation and cache per-observation terms reused across
    /// many particle queries (log-transformed values, factorial terms, ...).
    fn prepare_y(&self, y: &Observation) -> Result<Vec<f64>>;

    /// Build a prepared particle bank for repeated density queries at `xi`.
    fn make_obs_bank(&self, particles: &[BankParticle<'_>], xi: &DesignVector) -> Box<dyn ObsBank>;

    /// Whether observations take values in a discrete set, enabling
    /// deduplication of repeated pseudo-observations in the estimators.
    fn discrete_observations(&self) -> bool {
        false
    }

    /// Ground-truth parameters used to simulate experiment data, when the
    /// model configuration fixes them; `None` means "draw from the prior".
    fn true_params(&self) -> Option<ParamVector> {
        None
    }

    /// Per-sensor pointing errors (degrees) of a design against the true
    /// state, for models where that metric is meaningful.
    fn pointing_errors(&self, _xi: &DesignVector, _state: &StateVector) -> Option<Vec<f64>> {
        None
    }
}

/// One problem found by [`validate_model`].
#[derive(Debug, Clone)]
pub struct ValidationIssue {
    pub probe: usize,
    pub message: String,
}

/// Report from the model smoke-check.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub probes: usize,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Probe a model with random draws: checks that the observation log-density
/// is finite (positivity of the likelihood after any clamps) and that the
/// design-gradients have the design dimension. Report-only; never fails.
pub fn validate_model(
    model: &dyn ModelSpec,
    probe_budget: usize,
    stream: &crate::rng::RngStream,
) -> ValidationReport {
    let d_xi = model.reparam().value_dim();
    let mut report = ValidationReport { probes: probe_budget, ..Default::default() };
    for probe in 0..probe_budget {
        let s = stream.child_idx(probe as u64);
        let mut rng = s.rng();
        let theta = model.sample_param_prior(&mut rng);
        let x0 = model.sample_state_prior(&mut rng);
        let latent: Vec<f64> = (0..model.reparam().latent_dim())
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let xi = match transform_design(&latent, model.reparam()) {
            Ok(xi) => xi,
            Err(e) => {
                report.issues.push(ValidationIssue {
                    probe,
                    message: format!("transform_design failed: {e}"),
                });
                continue;
            }
        };
        let x1 = model.sample_transition(&x0, &theta, &xi, &mut rng);
        let y = model.sample_observation(&x1, &theta, &xi, &mut rng);

        match model.log_observation(&y, &x1, &theta, &xi) {
            Ok(lg) if lg.is_finite() => {}
            Ok(lg) => report.issues.push(ValidationIssue {
                probe,
                message: format!("log_observation non-finite: {lg}"),
            }),
            Err(e) => report.issues.push(ValidationIssue {
                probe,
                message: format!("log_observation error: {e}"),
            }),
        }
        match model.grad_xi_log_observation(&y, &x1, &theta, &xi) {
            Ok(g) if g.len() == d_xi => {
                if g.iter().any(|v| !v.is_finite()) {
                    report.issues.push(ValidationIssue {
                        probe,
                        message: "grad_xi_log_observation non-finite".into(),
                    });
                }
            }
            Ok(g) => report.issues.push(ValidationIssue {
                probe,
                message: format!(
                    "grad_xi_log_observation dimension {} != design dimension {d_xi}",
                    g.len()
                ),
            }),
            Err(e) => report.issues.push(ValidationIssue {
                probe,
                message: format!("grad_xi_log_observation error: {e}"),
            }),
        }
        let gf = model.grad_xi_log_transition(&x1, &x0, &theta, &xi);
        if gf.len() != d_xi {
            report.issues.push(ValidationIssue {
                probe,
                message: format!("grad_xi_log_transition dimension {} != {d_xi}", gf.len()),
            });
        }
    }
    report
}
