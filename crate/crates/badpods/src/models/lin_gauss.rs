//! Scalar linear-Gaussian model with closed-form oracles.
//!
//! State x_t = a x_{t-1} + w, w ~ N(0, q); observation y = xi (theta + x) + e,
//! e ~ N(0, r), with a Gaussian prior on the offset theta. Conjugacy gives an
//! exact Kalman recursion and an exact expected information gain, used to
//! verify the particle filter and the Monte Carlo estimators.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{
    BankParticle, DesignVector, ModelSpec, ObsBank, Observation, ParamSupport, ParamVector,
    Reparam, StateVector,
};
use crate::{KahanSum, LOG_FLOOR};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinGaussConfig {
    /// State transition coefficient.
    pub a: f64,
    /// Process variance.
    pub q: f64,
    /// Observation variance.
    pub r: f64,
    pub theta_mean: f64,
    pub theta_var: f64,
    pub x0_mean: f64,
    pub x0_var: f64,
}

impl Default for LinGaussConfig {
    fn default() -> Self {
        Self {
            a: 0.9,
            q: 0.25,
            r: 1.0,
            theta_mean: 0.0,
            theta_var: 1.0,
            x0_mean: 0.0,
            x0_var: 0.5,
        }
    }
}

impl LinGaussConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q <= 0.0 || self.r <= 0.0 || self.theta_var <= 0.0 || self.x0_var <= 0.0 {
            return Err(Error::invalid("linear-Gaussian variances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LinGaussModel {
    pub cfg: LinGaussConfig,
}

impl LinGaussModel {
    pub fn new(cfg: LinGaussConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

/// Exact expected information gain about theta from one observation
/// y = xi (theta + x) + e with theta ~ N(., theta_var), x ~ N(., pred_var)
/// independent, e ~ N(0, r):
///
///   I(xi) = 1/2 log(1 + xi^2 theta_var / (xi^2 pred_var + r)).
pub fn exact_eig(theta_var: f64, pred_var: f64, xi: f64, r: f64) -> f64 {
    0.5 * (1.0 + xi * xi * theta_var / (xi * xi * pred_var + r)).ln()
}

/// Scalar Kalman recursion for the state when theta is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanFilter {
    pub mean: f64,
    pub var: f64,
}

impl KalmanFilter {
    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    /// Predict step through x' = a x + w.
    pub fn predict(&mut self, a: f64, q: f64) {
        self.mean = a * self.mean;
        self.var = a * a * self.var + q;
    }

    /// Update with y = xi (theta + x) + e, theta known exactly.
    pub fn update(&mut self, y: f64, xi: f64, theta: f64, r: f64) {
        let innovation = y - xi * (theta + self.mean);
        let s = xi * xi * self.var + r;
        let gain = xi * self.var / s;
        self.mean += gain * innovation;
        self.var *= 1.0 - gain * xi;
    }
}

impl ModelSpec for LinGaussModel {
    fn name(&self) -> &'static str {
        "lin-gauss"
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn reparam(&self) -> Reparam {
        Reparam::Unconstrained { dim: 1 }
    }
    fn param_support(&self) -> ParamSupport {
        ParamSupport::unbounded(1)
    }

    fn sample_param_prior(&self, rng: &mut dyn RngCore) -> ParamVector {
        let z: f64 = StandardNormal.sample(rng);
        ParamVector(vec![self.cfg.theta_mean + self.cfg.theta_var.sqrt() * z])
    }

    fn sample_state_prior(&self, rng: &mut dyn RngCore) -> StateVector {
        let z: f64 = StandardNormal.sample(rng);
        StateVector(vec![self.cfg.x0_mean + self.cfg.x0_var.sqrt() * z])
    }

    fn sample_transition(
        &self,
        prev: &StateVector,
        _theta: &ParamVector,
        _xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> StateVector {
        let z: f64 = StandardNormal.sample(rng);
        StateVector(vec![self.cfg.a * prev.0[0] + self.cfg.q.sqrt() * z])
    }

    fn log_transition(
        &self,
        next: &StateVector,
        prev: &StateVector,
        _theta: &ParamVector,
        _xi: &DesignVector,
    ) -> f64 {
        let d = next.0[0] - self.cfg.a * prev.0[0];
        -0.5 * (LN_2PI + self.cfg.q.ln() + d * d / self.cfg.q)
    }

    fn sample_observation(
        &self,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> Observation {
        let z: f64 = StandardNormal.sample(rng);
        Observation(vec![
            xi.values[0] * (theta.0[0] + state.0[0]) + self.cfg.r.sqrt() * z,
        ])
    }

    fn log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<f64> {
        let py = self.prepare_y(y)?;
        let d = py[0] - xi.values[0] * (theta.0[0] + state.0[0]);
        Ok(-0.5 * (LN_2PI + self.cfg.r.ln() + d * d / self.cfg.r))
    }

    fn grad_xi_log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<Vec<f64>> {
        let py = self.prepare_y(y)?;
        let s = theta.0[0] + state.0[0];
        Ok(vec![(py[0] - xi.values[0] * s) * s / self.cfg.r])
    }

    fn prepare_y(&self, y: &Observation) -> Result<Vec<f64>> {
        if y.0.len() != 1 {
            return Err(Error::DimensionMismatch {
                context: "lin-gauss observation",
                expected: 1,
                got: y.0.len(),
            });
        }
        Ok(vec![y.0[0]])
    }

    fn make_obs_bank(&self, particles: &[BankParticle<'_>], xi: &DesignVector) -> Box<dyn ObsBank> {
        let x = xi.values[0];
        let mut bank = LinGaussObsBank {
            r: self.cfg.r,
            log_norm: -0.5 * (LN_2PI + self.cfg.r.ln()),
            log_w: Vec::with_capacity(particles.len()),
            pred: Vec::with_capacity(particles.len()),
            signal: Vec::with_capacity(particles.len()),
        };
        for p in particles {
            debug_assert!(p.transition_score.is_none());
            let s = p.theta.0[0] + p.state.0[0];
            bank.log_w.push(p.log_weight);
            bank.signal.push(s);
            bank.pred.push(x * s);
        }
        Box::new(bank)
    }
}

struct LinGaussObsBank {
    r: f64,
    log_norm: f64,
    log_w: Vec<f64>,
    /// xi (theta_p + x_p)
    pred: Vec<f64>,
    /// theta_p + x_p
    signal: Vec<f64>,
}

impl ObsBank for LinGaussObsBank {
    fn log_mixture(&self, py: &[f64]) -> f64 {
        let y = py[0];
        let mut max = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.log_w.len());
        for p in 0..self.log_w.len() {
            let d = y - self.pred[p];
            let t = (self.log_w[p] + self.log_norm - d * d / (2.0 * self.r)).max(LOG_FLOOR);
            if t > max {
                max = t;
            }
            terms.push(t);
        }
        let mut acc = KahanSum::new();
        for t in terms {
            acc.add((t - max).exp());
        }
        max + acc.value().ln()
    }

    fn log_mixture_grad(&self, py: &[f64], grad: &mut [f64]) -> f64 {
        let y = py[0];
        let mut max = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.log_w.len());
        for p in 0..self.log_w.len() {
            let d = y - self.pred[p];
            let t = (self.log_w[p] + self.log_norm - d * d / (2.0 * self.r)).max(LOG_FLOOR);
            if t > max {
                max = t;
            }
            terms.push(t);
        }
        let mut total = KahanSum::new();
        let mut gsum = KahanSum::new();
        for p in 0..terms.len() {
            let u = (terms[p] - max).exp();
            total.add(u);
            gsum.add(u * (y - self.pred[p]) * self.signal[p] / self.r);
        }
        grad[0] = gsum.value() / total.value();
        max + total.value().ln()
    }

    fn len(&self) -> usize {
        self.log_w.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::ssm::transform_design;
    use approx::assert_abs_diff_eq;

    fn model() -> LinGaussModel {
        LinGaussModel::new(LinGaussConfig::default()).unwrap()
    }

    fn design(x: f64) -> DesignVector {
        transform_design(&[x], Reparam::Unconstrained { dim: 1 }).unwrap()
    }

    #[test]
    fn zero_gain_has_zero_information() {
        assert_eq!(exact_eig(1.0, 0.5, 0.0, 1.0), 0.0);
    }

    #[test]
    fn unit_case_gives_half_log_two() {
        assert_abs_diff_eq!(exact_eig(1.0, 0.0, 1.0, 1.0), 0.5 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(exact_eig(1.0, 0.0, 1.0, 1.0), 0.34657359027997264, epsilon = 1e-12);
    }

    #[test]
    fn information_decreases_in_noise() {
        let a = exact_eig(1.0, 0.3, 0.8, 1.0);
        let b = exact_eig(1.0, 0.3, 0.8, 2.0);
        assert!(b < a);
    }

    #[test]
    fn exact_eig_matches_brute_force_nmc() {
        // Nested Monte Carlo estimate of I(xi) in the pure prior posture.
        let (tv, pv, xi, r): (f64, f64, f64, f64) = (1.0, 0.5, 0.8, 1.0);
        let mut rng = RngStream::root(100).rng();
        let n_outer = 20_000;
        let n_inner = 1_000;
        // Pre-draw an inner cloud reused across outer samples (common random
        // numbers are fine for a consistency check).
        let cloud: Vec<f64> = (0..n_inner)
            .map(|_| {
                let th: f64 = rand_distr::Distribution::sample(&StandardNormal, &mut rng);
                let x: f64 = rand_distr::Distribution::sample(&StandardNormal, &mut rng);
                xi * (th * tv.sqrt() + x * pv.sqrt())
            })
            .collect();
        let mut acc = 0.0;
        for _ in 0..n_outer {
            let th: f64 = rand_distr::Distribution::sample(&StandardNormal, &mut rng);
            let th = th * tv.sqrt();
            let x: f64 = rand_distr::Distribution::sample(&StandardNormal, &mut rng);
            let x = x * pv.sqrt();
            let e: f64 = rand_distr::Distribution::sample(&StandardNormal, &mut rng);
            let y = xi * (th + x) + e * r.sqrt();
            // log p(y | theta): marginalize x only.
            let vl = xi * xi * pv + r;
            let dl = y - xi * th;
            let log_l = -0.5 * (LN_2PI + vl.ln() + dl * dl / vl);
            // log p(y): mixture over the cloud (theta and x both random).
            let terms: Vec<f64> = cloud
                .iter()
                .map(|&m| {
                    let d = y - m;
                    -0.5 * (LN_2PI + r.ln() + d * d / r)
                })
                .collect();
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z =
                mx + (terms.iter().map(|t| (t - mx).exp()).sum::<f64>() / n_inner as f64).ln();
            acc += log_l - log_z;
        }
        let est = acc / n_outer as f64;
        let truth = exact_eig(tv, pv, xi, r);
        assert!(
            (est - truth).abs() < 0.02,
            "nmc {est} vs exact {truth}"
        );
    }

    #[test]
    fn kalman_contracts_variance_and_is_exact_on_noiseless_data() {
        let mut kf = KalmanFilter::new(0.0, 1.0);
        kf.predict(0.9, 0.25);
        assert_abs_diff_eq!(kf.var, 0.9 * 0.9 + 0.25, epsilon = 1e-15);
        let before = kf.var;
        kf.update(1.7, 1.0, 0.5, 1.0);
        assert!(kf.var < before);
        // With r -> 0 the posterior mean solves y = xi (theta + m).
        let mut kf = KalmanFilter::new(0.0, 1.0);
        kf.update(2.0, 2.0, 0.25, 1e-12);
        assert_abs_diff_eq!(kf.mean, 0.75, epsilon = 1e-6);
    }

    #[test]
    fn grad_matches_finite_differences() {
        use rand::Rng;
        let m = model();
        let mut rng = RngStream::root(5).rng();
        for _ in 0..1000 {
            let theta = ParamVector(vec![rng.gen_range(-2.0..2.0)]);
            let state = StateVector(vec![rng.gen_range(-2.0..2.0)]);
            let xi = design(rng.gen_range(-2.0..2.0));
            let y = Observation(vec![rng.gen_range(-3.0..3.0)]);
            let g = m.grad_xi_log_observation(&y, &state, &theta, &xi).unwrap()[0];
            let h = 1e-5;
            let mut vp = xi.clone();
            let mut vm = xi.clone();
            vp.values[0] += h;
            vm.values[0] -= h;
            let fd = (m.log_observation(&y, &state, &theta, &vp).unwrap()
                - m.log_observation(&y, &state, &theta, &vm).unwrap())
                / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-6, "{g} vs {fd}");
        }
    }

    #[test]
    fn bank_matches_direct_evaluation() {
        use rand::Rng;
        let m = model();
        let xi = design(0.7);
        let mut rng = RngStream::root(6).rng();
        let pairs: Vec<(ParamVector, StateVector)> = (0..40)
            .map(|_| {
                (
                    ParamVector(vec![rng.gen_range(-2.0..2.0)]),
                    StateVector(vec![rng.gen_range(-2.0..2.0)]),
                )
            })
            .collect();
        let lw = -(40.0f64).ln();
        let particles: Vec<BankParticle<'_>> = pairs
            .iter()
            .map(|(t, s)| BankParticle { state: s, theta: t, log_weight: lw, transition_score: None })
            .collect();
        let bank = m.make_obs_bank(&particles, &xi);
        let y = Observation(vec![0.9]);
        let direct = {
            let terms: Vec<f64> = pairs
                .iter()
                .map(|(t, s)| lw + m.log_observation(&y, s, t, &xi).unwrap())
                .collect();
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
        };
        assert_abs_diff_eq!(bank.log_mixture(&[0.9]), direct, epsilon = 1e-12);
        let mut grad = [0.0];
        let v = bank.log_mixture_grad(&[0.9], &mut grad);
        assert_abs_diff_eq!(v, direct, epsilon = 1e-12);
        let h = 1e-6;
        let mut vp = xi.clone();
        let mut vm = xi.clone();
        vp.values[0] += h;
        vm.values[0] -= h;
        let fd = (m.make_obs_bank(&particles, &vp).log_mixture(&[0.9])
            - m.make_obs_bank(&particles, &vm).log_mixture(&[0.9]))
            / (2.0 * h);
        assert_abs_diff_eq!(grad[0], fd, epsilon = 1e-6);
    }
}
