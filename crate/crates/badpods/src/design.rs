//! Stochastic gradient ascent over designs, plus baseline design policies.
//!
//! Optimization runs in the unconstrained latent space of the model's
//! reparameterization; gradients estimated in design-value space are pulled
//! back through the chain rule. Updates use Adam with an ascent sign.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eig::{eig_grad_hat, EigEstimate};
use crate::error::{Error, Result};
use crate::npf::{init_ensemble, npf_step, JitterKernel, NestedEnsemble, ResampleScheme};
use crate::rng::RngStream;
use crate::ssm::{transform_design, DesignVector, ModelSpec, Reparam};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 0.03, beta1: 0.9, beta2: 0.999, epsilon: 1e-6 }
    }
}

/// Adam optimizer state over a latent design vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    iter: u64,
}

impl AdamState {
    pub fn new(dim: usize, cfg: AdamConfig) -> Self {
        Self { cfg, first: vec![0.0; dim], second: vec![0.0; dim], iter: 0 }
    }

    pub fn iterations(&self) -> u64 {
        self.iter
    }

    /// Bias-corrected Adam update for gradient ascent: add the returned
    /// vector to the latent iterate.
    pub fn step(&mut self, gradient: &[f64]) -> Result<Vec<f64>> {
        if gradient.len() != self.first.len() {
            return Err(Error::DimensionMismatch {
                context: "adam gradient",
                expected: self.first.len(),
                got: gradient.len(),
            });
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: "adam gradient", particle: None });
        }
        self.iter += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.iter as i32);
        let bc2 = 1.0 - c.beta2.powi(self.iter as i32);
        let mut update = Vec::with_capacity(gradient.len());
        for i in 0..gradient.len() {
            let g = gradient[i];
            self.first[i] = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
            self.second[i] = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first[i] / bc1;
            let v_hat = self.second[i] / bc2;
            update.push(c.alpha * m_hat / (v_hat.sqrt() + c.epsilon));
        }
        Ok(update)
    }
}

/// A stochastic objective exposing a value and a design-value-space gradient
/// per iteration. The live implementation is the EIG estimator; tests inject
/// analytic surrogates.
pub trait GradObjective {
    fn eval(&mut self, xi: &DesignVector, iteration: usize) -> Result<EigEstimate>;
}

/// The EIG estimator as an optimization objective; each iteration draws
/// fresh streams under `stream`.
pub struct EigObjective<'a> {
    pub ens: &'a NestedEnsemble,
    pub model: &'a dyn ModelSpec,
    pub kernel: &'a JitterKernel,
    pub batch: usize,
    pub stream: RngStream,
}

impl GradObjective for EigObjective<'_> {
    fn eval(&mut self, xi: &DesignVector, iteration: usize) -> Result<EigEstimate> {
        eig_grad_hat(
            self.ens,
            xi,
            self.model,
            self.kernel,
            self.batch,
            &self.stream.child_idx(iteration as u64),
        )
    }
}

/// Design drawn uniformly over the constraint set.
pub fn random_design(reparam: Reparam, rng: &mut impl Rng) -> DesignVector {
    let latent: Vec<f64> = match reparam {
        Reparam::SimplexSigmoid { dim: 2 } => {
            let p: f64 = rng.gen_range(f64::EPSILON..1.0);
            vec![(p / (1.0 - p)).ln()]
        }
        Reparam::SimplexSigmoid { dim } => {
            // Uniform on the simplex via normalized exponentials, mapped back
            // to softmax latents pinned at the first coordinate.
            let e: Vec<f64> = (0..dim).map(|_| -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
            let total: f64 = e.iter().sum();
            (1..dim).map(|i| (e[i] / total).ln() - (e[0] / total).ln()).collect()
        }
        Reparam::AngleWrap { dim } => (0..dim)
            .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect(),
        Reparam::Unconstrained { dim } => {
            (0..dim).map(|_| StandardNormal.sample(rng)).collect()
        }
    };
    transform_design(&latent, reparam).expect("latent dimension matches by construction")
}

/// K iterations of Adam ascent on a gradient objective, starting from a
/// random design. Returns the final design and the per-iteration value
/// trace. On a numeric error the partial trace is carried in the error path
/// by the caller simply not receiving it; errors abort the run.
pub fn optimize_design(
    objective: &mut dyn GradObjective,
    reparam: Reparam,
    iterations: usize,
    adam: AdamConfig,
    stream: &RngStream,
) -> Result<(DesignVector, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::invalid("optimizer needs at least one iteration"));
    }
    let mut xi = random_design(reparam, &mut stream.child("init").rng());
    let mut state = AdamState::new(reparam.latent_dim(), adam);
    let mut trace = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let est = objective.eval(&xi, k)?;
        trace.push(est.value);
        let grad_latent = xi.grad_values_to_latent(&est.gradient)?;
        let update = state.step(&grad_latent)?;
        let latent: Vec<f64> = xi.latent.iter().zip(&update).map(|(z, u)| z + u).collect();
        xi = transform_design(&latent, reparam)?;
        debug_assert!(xi.satisfies_constraints(1e-9));
    }
    Ok((xi, trace))
}

/// Offline joint optimization of a whole design sequence against
/// prior-predictive rollouts (the non-adaptive baseline).
///
/// Each outer iteration simulates one fresh trajectory from the prior,
/// rolls the filter forward on self-generated pseudo-observations at the
/// current designs, estimates the one-step EIG gradient at every horizon
/// position, and applies Adam to the concatenated latent vector.
#[allow(clippy::too_many_arguments)]
pub fn static_optimize(
    model: &dyn ModelSpec,
    horizon: usize,
    iterations: usize,
    n_params: usize,
    n_states: usize,
    batch: usize,
    jitter_scale: f64,
    adam: AdamConfig,
    max_horizon: usize,
    stream: &RngStream,
) -> Result<Vec<DesignVector>> {
    if horizon == 0 || iterations == 0 {
        return Err(Error::invalid("static optimization needs horizon >= 1 and iterations >= 1"));
    }
    if horizon > max_horizon {
        return Err(Error::invalid(format!(
            "static optimization horizon {horizon} exceeds the cost cap {max_horizon}"
        )));
    }
    let reparam = model.reparam();
    let d = reparam.latent_dim();
    let kernel = JitterKernel::new(jitter_scale, n_params, model.param_support())?;

    let mut irng = stream.child("init").rng();
    let mut latents: Vec<Vec<f64>> = (0..horizon)
        .map(|_| random_design(reparam, &mut irng).latent)
        .collect();
    let mut state = AdamState::new(d * horizon, adam);

    for k in 0..iterations {
        let ks = stream.child("iter").child_idx(k as u64);
        let mut ens = init_ensemble(model, n_params, n_states, &ks.child("ensemble"))?;
        let mut srng = ks.child("truth").rng();
        let theta_star = model.sample_param_prior(&mut srng);
        let mut x_star = model.sample_state_prior(&mut srng);
        let mut grad = vec![0.0; d * horizon];
        for t in 0..horizon {
            let xi = transform_design(&latents[t], reparam)?;
            let est = eig_grad_hat(&ens, &xi, model, &kernel, batch, &ks.child("eig").child_idx(t as u64))?;
            let gl = xi.grad_values_to_latent(&est.gradient)?;
            grad[t * d..(t + 1) * d].copy_from_slice(&gl);
            // Advance the rollout on a self-generated pseudo-observation.
            x_star = model.sample_transition(&x_star, &theta_star, &xi, &mut srng);
            let y = model.sample_observation(&x_star, &theta_star, &xi, &mut srng);
            npf_step(&mut ens, &y, &xi, model, &kernel, ResampleScheme::Systematic, &ks.child("filter"))?;
        }
        let update = state.step(&grad)?;
        for t in 0..horizon {
            for i in 0..d {
                latents[t][i] += update[t * d + i];
            }
        }
    }
    latents
        .into_iter()
        .map(|z| transform_design(&z, reparam))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eig::EigDiagnostics;
    use crate::models::{SirConfig, SirModel};
    use approx::assert_abs_diff_eq;

    fn dummy_estimate(value: f64, gradient: Vec<f64>) -> EigEstimate {
        EigEstimate {
            value,
            gradient,
            diagnostics: EigDiagnostics {
                batch: 0,
                n_params: 0,
                n_states: 0,
                log_like_min: 0.0,
                log_like_max: 0.0,
                log_evid_min: 0.0,
                log_evid_max: 0.0,
            },
        }
    }

    /// Concave surrogate with its optimum at first simplex coordinate 0.3.
    struct Quad {
        noise_sd: f64,
        rng: rand_chacha::ChaCha12Rng,
    }

    impl GradObjective for Quad {
        fn eval(&mut self, xi: &DesignVector, _iteration: usize) -> Result<EigEstimate> {
            let v = xi.values[0];
            let mut g = -2.0 * (v - 0.3);
            if self.noise_sd > 0.0 {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                g += self.noise_sd * z;
            }
            Ok(dummy_estimate(-(v - 0.3) * (v - 0.3) + 1.0, vec![g, 0.0]))
        }
    }

    #[test]
    fn first_adam_step_has_unit_rate_magnitude() {
        let cfg = AdamConfig { alpha: 0.03, epsilon: 1e-12, ..Default::default() };
        let mut s = AdamState::new(2, cfg);
        let u = s.step(&[5.0, -0.01]).unwrap();
        assert_abs_diff_eq!(u[0], 0.03, epsilon = 1e-6);
        assert_abs_diff_eq!(u[1], -0.03, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let mut s = AdamState::new(1, AdamConfig::default());
        assert_eq!(s.step(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_gradient_update_approaches_rate() {
        let cfg = AdamConfig { alpha: 0.01, epsilon: 1e-12, ..Default::default() };
        let mut s = AdamState::new(1, cfg);
        let mut u = vec![0.0];
        for _ in 0..5000 {
            u = s.step(&[0.7]).unwrap();
        }
        assert_abs_diff_eq!(u[0], 0.01, epsilon = 1e-4);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = AdamState::new(2, AdamConfig::default());
        let mut b = AdamState::new(2, AdamConfig::default());
        for k in 0..100 {
            let g = [k as f64 * 0.1 - 3.0, (k as f64).sin()];
            assert_eq!(a.step(&g).unwrap(), b.step(&g).unwrap());
        }
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut s = AdamState::new(1, AdamConfig::default());
        assert!(s.step(&[f64::NAN]).is_err());
    }

    #[test]
    fn random_designs_satisfy_constraints_and_moments() {
        let mut rng = RngStream::root(1).rng();
        let mut acc = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let s = random_design(Reparam::SimplexSigmoid { dim: 2 }, &mut rng);
            assert!(s.satisfies_constraints(1e-9));
            acc += s.values[0];
            let a = random_design(Reparam::AngleWrap { dim: 2 }, &mut rng);
            assert!(a.satisfies_constraints(0.0));
        }
        assert!((acc / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn zero_gradient_objective_returns_the_random_init() {
        struct Flat;
        impl GradObjective for Flat {
            fn eval(&mut self, _xi: &DesignVector, _it: usize) -> Result<EigEstimate> {
                Ok(dummy_estimate(0.0, vec![0.0, 0.0]))
            }
        }
        let stream = RngStream::root(2);
        let (xi, trace) =
            optimize_design(&mut Flat, Reparam::SimplexSigmoid { dim: 2 }, 1, AdamConfig::default(), &stream)
                .unwrap();
        let init = random_design(Reparam::SimplexSigmoid { dim: 2 }, &mut stream.child("init").rng());
        assert_eq!(xi.values, init.values);
        assert_eq!(trace, vec![0.0]);
    }

    #[test]
    fn concave_surrogate_converges_to_its_optimum() {
        let mut obj = Quad { noise_sd: 0.0, rng: RngStream::root(3).rng() };
        let (xi, trace) = optimize_design(
            &mut obj,
            Reparam::SimplexSigmoid { dim: 2 },
            200,
            AdamConfig::default(),
            &RngStream::root(4),
        )
        .unwrap();
        assert!((xi.values[0] - 0.3).abs() < 0.05, "{}", xi.values[0]);
        assert_eq!(trace.len(), 200);
    }

    #[test]
    fn noisy_ascent_improves_the_objective_in_most_runs() {
        let mut wins = 0;
        for seed in 0..50 {
            let mut obj = Quad { noise_sd: 0.5, rng: RngStream::root(100 + seed).rng() };
            let (xi, trace) = optimize_design(
                &mut obj,
                Reparam::SimplexSigmoid { dim: 2 },
                150,
                AdamConfig::default(),
                &RngStream::root(200 + seed),
            )
            .unwrap();
            let end = -(xi.values[0] - 0.3) * (xi.values[0] - 0.3) + 1.0;
            if end >= trace[0] {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins}/50");
    }

    #[test]
    fn sir_trace_trends_upward() {
        let m = SirModel::new(SirConfig::default()).unwrap();
        let mut ens = init_ensemble(&m, 30, 30, &RngStream::root(5)).unwrap();
        let kernel = JitterKernel::new(2.0, 30, m.param_support()).unwrap();
        // Let the epidemic grow for a while so one more observation carries
        // measurable information about the first-group rates.
        {
            let stream = RngStream::root(55);
            let mut sim = stream.child("sim").rng();
            let truth = crate::ssm::ParamVector(vec![0.65, 0.15]);
            let xi = random_design(m.reparam(), &mut stream.child("xi").rng());
            let mut x = m.sample_state_prior(&mut sim);
            for _ in 0..15 {
                x = m.sample_transition(&x, &truth, &xi, &mut sim);
                let y = m.sample_observation(&x, &truth, &xi, &mut sim);
                npf_step(&mut ens, &y, &xi, &m, &kernel, ResampleScheme::Systematic, &stream.child("filter"))
                    .unwrap();
            }
        }
        let mut obj = EigObjective {
            ens: &ens,
            model: &m,
            kernel: &kernel,
            batch: 900,
            stream: RngStream::root(6).child("eig"),
        };
        let (_, trace) = optimize_design(
            &mut obj,
            m.reparam(),
            150,
            AdamConfig::default(),
            &RngStream::root(7),
        )
        .unwrap();
        let head: f64 = trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = trace[100..].iter().sum::<f64>() / 50.0;
        assert!(tail >= head, "head {head} tail {tail}");
    }

    #[test]
    fn static_horizon_cap_is_enforced() {
        let m = SirModel::new(SirConfig::default()).unwrap();
        let e = static_optimize(&m, 100, 1, 5, 5, 25, 2.0, AdamConfig::default(), 50, &RngStream::root(8));
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn static_sequence_has_horizon_length_and_valid_designs() {
        let m = SirModel::new(SirConfig::default()).unwrap();
        let seq = static_optimize(&m, 4, 3, 10, 10, 100, 2.0, AdamConfig::default(), 50, &RngStream::root(9))
            .unwrap();
        assert_eq!(seq.len(), 4);
        for xi in &seq {
            assert!(xi.satisfies_constraints(1e-9));
        }
    }
}
