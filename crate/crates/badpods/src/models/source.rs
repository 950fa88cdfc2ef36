//! Moving source tracked by fixed directional sensors.
//!
//! The latent state is (p_x, p_y, phi): a planar position and a heading. The
//! source drifts with unknown per-axis speeds (v_x, v_y) while the heading
//! rotates at a known rate. Each sensor points in a chosen orientation and
//! reports a log-normally perturbed intensity shaped by a cardioid
//! directivity pattern around the bearing to the source.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{
    wrap_angle, BankParticle, DesignVector, ModelSpec, ObsBank, Observation, ParamSupport,
    ParamVector, Reparam, StateVector,
};
use crate::{KahanSum, LOG_FLOOR};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    /// Fixed sensor positions.
    pub sensors: Vec<[f64; 2]>,
    /// Per-sensor source strength seen at zero range.
    pub strengths: Vec<f64>,
    /// Background intensity floor.
    pub background: f64,
    /// Range saturation constant in the inverse-square law.
    pub saturation: f64,
    /// Cardioid shape (d, k): D(delta) = ((1 + d cos delta)/(1 + d))^k.
    pub dir_d: f64,
    pub dir_k: f64,
    /// Log-intensity noise variance.
    pub noise_var: f64,
    pub dt: f64,
    /// Diagonal process covariance over (p_x, p_y, phi).
    pub process_var: [f64; 3],
    /// Known heading rate.
    pub v_phi: f64,
    /// Uniform prior bounds shared by (v_x, v_y).
    pub prior: (f64, f64),
    pub true_velocity: [f64; 2],
    pub initial_state: [f64; 3],
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            sensors: vec![[3.0, 0.0], [0.0, 3.0]],
            strengths: vec![5.0, 5.0],
            background: 0.1,
            saturation: 0.1,
            dir_d: 1.0,
            dir_k: 4.0,
            noise_var: 0.1,
            dt: 0.1,
            process_var: [0.2, 0.2, 1e-2],
            v_phi: 0.3,
            prior: (0.5, 1.5),
            true_velocity: [1.0, 1.0],
            initial_state: [0.0, 0.0, 0.0],
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() || self.sensors.len() != self.strengths.len() {
            return Err(Error::invalid("sensor and strength lists must match and be nonempty"));
        }
        if self.background <= 0.0 || self.saturation <= 0.0 || self.noise_var <= 0.0 {
            return Err(Error::invalid("background, saturation and noise variance must be positive"));
        }
        if self.strengths.iter().any(|&a| a < 0.0) {
            return Err(Error::invalid("sensor strengths must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.dir_d) || self.dir_k <= 0.0 {
            return Err(Error::invalid("directivity shape requires d in [0,1], k > 0"));
        }
        if self.dt <= 0.0 || self.process_var.iter().any(|&q| q <= 0.0) {
            return Err(Error::invalid("dt and process variances must be positive"));
        }
        if self.prior.0 >= self.prior.1 {
            return Err(Error::invalid("source prior bounds must satisfy lo < hi"));
        }
        Ok(())
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }
}

#[derive(Debug, Clone)]
pub struct SourceModel {
    pub cfg: SourceConfig,
}

impl SourceModel {
    pub fn new(cfg: SourceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Cardioid directivity D(delta).
    pub fn directivity(&self, delta: f64) -> f64 {
        let c = &self.cfg;
        ((1.0 + c.dir_d * delta.cos()) / (1.0 + c.dir_d)).powf(c.dir_k)
    }

    /// Derivative of the directivity in its angular argument.
    pub fn directivity_deriv(&self, delta: f64) -> f64 {
        let c = &self.cfg;
        let base = (1.0 + c.dir_d * delta.cos()) / (1.0 + c.dir_d);
        c.dir_k * base.powf(c.dir_k - 1.0) * (-c.dir_d * delta.sin()) / (1.0 + c.dir_d)
    }

    /// Bearing from sensor j to the source; `None` if they coincide.
    pub fn bearing(&self, state: &[f64], j: usize) -> Option<f64> {
        let dx = state[0] - self.cfg.sensors[j][0];
        let dy = state[1] - self.cfg.sensors[j][1];
        if dx == 0.0 && dy == 0.0 {
            None
        } else {
            Some(dy.atan2(dx))
        }
    }

    /// Expected intensities mu_j at a design, together with the per-sensor
    /// logarithmic design-sensitivities d log(mu_j)/d xi_j.
    pub fn mu_and_sens(&self, state: &[f64], xi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = &self.cfg;
        let j_n = c.n_sensors();
        let mut mu = Vec::with_capacity(j_n);
        let mut sens = Vec::with_capacity(j_n);
        for j in 0..j_n {
            let dx = state[0] - c.sensors[j][0];
            let dy = state[1] - c.sensors[j][1];
            let r2 = dx * dx + dy * dy;
            // A coincident source has no bearing; the cardioid argument is
            // taken as zero there (the intensity is dominated by saturation).
            let psi = if r2 == 0.0 { 0.0 } else { dy.atan2(dx) };
            let delta = wrap_angle(xi[j] - psi);
            let gain = c.strengths[j] / (c.saturation + r2);
            let m = c.background + gain * self.directivity(delta);
            mu.push(m);
            sens.push(gain * self.directivity_deriv(delta) / m);
        }
        (mu, sens)
    }

    /// One propagation step with explicit standard-normal noise; the
    /// zero-noise hook used by deterministic-drift tests.
    pub fn step_with_noise(&self, state: &[f64], theta: &ParamVector, z: &[f64; 3]) -> [f64; 3] {
        let c = &self.cfg;
        let (vx, vy) = (theta.0[0], theta.0[1]);
        let phi = state[2];
        [
            state[0] + c.dt * vx * phi.cos() + c.process_var[0].sqrt() * z[0],
            state[1] + c.dt * vy * phi.sin() + c.process_var[1].sqrt() * z[1],
            wrap_angle(phi + c.dt * c.v_phi + c.process_var[2].sqrt() * z[2]),
        ]
    }
}

/// Per-sensor absolute angular deviation, in degrees, between each chosen
/// orientation and the true bearing to the source. `Err` when the source
/// coincides with a sensor (the bearing is undefined).
pub fn pointing_error(xi: &DesignVector, state: &StateVector, model: &SourceModel) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(model.cfg.n_sensors());
    for j in 0..model.cfg.n_sensors() {
        let psi = model.bearing(&state.0, j).ok_or_else(|| {
            Error::invalid(format!("source coincides with sensor {j}; bearing undefined"))
        })?;
        out.push(wrap_angle(xi.values[j] - psi).abs().to_degrees());
    }
    Ok(out)
}

impl ModelSpec for SourceModel {
    fn name(&self) -> &'static str {
        "source"
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn obs_dim(&self) -> usize {
        self.cfg.n_sensors()
    }
    fn reparam(&self) -> Reparam {
        Reparam::AngleWrap { dim: self.cfg.n_sensors() }
    }
    fn param_support(&self) -> ParamSupport {
        ParamSupport { bounds: vec![self.cfg.prior; 2] }
    }

    fn sample_param_prior(&self, rng: &mut dyn RngCore) -> ParamVector {
        use rand::Rng;
        let (lo, hi) = self.cfg.prior;
        ParamVector(vec![rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
    }

    fn sample_state_prior(&self, _rng: &mut dyn RngCore) -> StateVector {
        StateVector(self.cfg.initial_state.to_vec())
    }

    fn sample_transition(
        &self,
        prev: &StateVector,
        theta: &ParamVector,
        _xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> StateVector {
        let mut z = [0.0; 3];
        for v in &mut z {
            *v = StandardNormal.sample(rng);
        }
        StateVector(self.step_with_noise(&prev.0, theta, &z).to_vec())
    }

    fn log_transition(
        &self,
        next: &StateVector,
        prev: &StateVector,
        theta: &ParamVector,
        _xi: &DesignVector,
    ) -> f64 {
        let c = &self.cfg;
        let drift = self.step_with_noise(&prev.0, theta, &[0.0; 3]);
        let mut lp = 0.0;
        for i in 0..3 {
            let d = if i == 2 {
                wrap_angle(next.0[2] - drift[2])
            } else {
                next.0[i] - drift[i]
            };
            lp += -0.5 * (LN_2PI + c.process_var[i].ln() + d * d / c.process_var[i]);
        }
        lp
    }

    fn sample_observation(
        &self,
        state: &StateVector,
        _theta: &ParamVector,
        xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> Observation {
        let (mu, _) = self.mu_and_sens(&state.0, &xi.values);
        let sd = self.cfg.noise_var.sqrt();
        Observation(
            mu.iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    (m.ln() + sd * z).exp()
                })
                .collect(),
        )
    }

    fn log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        _theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<f64> {
        let py = self.prepare_y(y)?;
        let (mu, _) = self.mu_and_sens(&state.0, &xi.values);
        let s2 = self.cfg.noise_var;
        let j_n = self.cfg.n_sensors();
        let mut lp = py[j_n];
        for j in 0..j_n {
            let d = py[j] - mu[j].ln();
            lp -= d * d / (2.0 * s2);
        }
        Ok(lp)
    }

    fn grad_xi_log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        _theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<Vec<f64>> {
        let py = self.prepare_y(y)?;
        let (mu, sens) = self.mu_and_sens(&state.0, &xi.values);
        let s2 = self.cfg.noise_var;
        Ok((0..self.cfg.n_sensors())
            .map(|j| (py[j] - mu[j].ln()) / s2 * sens[j])
            .collect())
    }

    fn prepare_y(&self, y: &Observation) -> Result<Vec<f64>> {
        let j_n = self.cfg.n_sensors();
        if y.0.len() != j_n {
            return Err(Error::DimensionMismatch {
                context: "source observation",
                expected: j_n,
                got: y.0.len(),
            });
        }
        let mut out = Vec::with_capacity(j_n + 1);
        let mut c0 = -(j_n as f64) * 0.5 * (LN_2PI + self.cfg.noise_var.ln());
        for &v in &y.0 {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("source intensities must be positive, got {v}")));
            }
            let lv = v.ln();
            out.push(lv);
            c0 -= lv;
        }
        out.push(c0);
        Ok(out)
    }

    fn true_params(&self) -> Option<ParamVector> {
        Some(ParamVector(self.cfg.true_velocity.to_vec()))
    }

    fn pointing_errors(&self, xi: &DesignVector, state: &StateVector) -> Option<Vec<f64>> {
        pointing_error(xi, state, self).ok()
    }

    fn make_obs_bank(&self, particles: &[BankParticle<'_>], xi: &DesignVector) -> Box<dyn ObsBank> {
        let j_n = self.cfg.n_sensors();
        let mut bank = SourceObsBank {
            n_sensors: j_n,
            inv_2s2: 1.0 / (2.0 * self.cfg.noise_var),
            inv_s2: 1.0 / self.cfg.noise_var,
            log_w: Vec::with_capacity(particles.len()),
            ln_mu: Vec::with_capacity(particles.len() * j_n),
            sens: Vec::with_capacity(particles.len() * j_n),
        };
        for p in particles {
            debug_assert!(p.transition_score.is_none(), "source transition is design-free");
            let (mu, sens) = self.mu_and_sens(&p.state.0, &xi.values);
            bank.log_w.push(p.log_weight);
            bank.ln_mu.extend(mu.iter().map(|m| m.ln()));
            bank.sens.extend_from_slice(&sens);
        }
        Box::new(bank)
    }
}

/// Prepared particle bank for the log-normal intensity observations.
struct SourceObsBank {
    n_sensors: usize,
    inv_2s2: f64,
    inv_s2: f64,
    log_w: Vec<f64>,
    /// Row-major [particle][sensor] caches.
    ln_mu: Vec<f64>,
    sens: Vec<f64>,
}

impl SourceObsBank {
    #[inline]
    fn terms(&self, py: &[f64], buf: &mut Vec<f64>) -> f64 {
        let j_n = self.n_sensors;
        let c0 = py[j_n];
        buf.clear();
        let mut max = f64::NEG_INFINITY;
        for p in 0..self.log_w.len() {
            let base = p * j_n;
            let mut q = 0.0;
            for j in 0..j_n {
                let d = py[j] - self.ln_mu[base + j];
                q += d * d;
            }
            let t = (self.log_w[p] + c0 - q * self.inv_2s2).max(LOG_FLOOR);
            if t > max {
                max = t;
            }
            buf.push(t);
        }
        max
    }
}

impl ObsBank for SourceObsBank {
    fn log_mixture(&self, py: &[f64]) -> f64 {
        let mut buf = Vec::new();
        let max = self.terms(py, &mut buf);
        let mut acc = KahanSum::new();
        for &t in &buf {
            acc.add((t - max).exp());
        }
        max + acc.value().ln()
    }

    fn log_mixture_grad(&self, py: &[f64], grad: &mut [f64]) -> f64 {
        let j_n = self.n_sensors;
        let mut buf = Vec::new();
        let max = self.terms(py, &mut buf);
        let mut total = KahanSum::new();
        let mut gacc: Vec<KahanSum> = vec![KahanSum::new(); j_n];
        for p in 0..buf.len() {
            let u = (buf[p] - max).exp();
            total.add(u);
            let base = p * j_n;
            for j in 0..j_n {
                let d = py[j] - self.ln_mu[base + j];
                gacc[j].add(u * d * self.inv_s2 * self.sens[base + j]);
            }
        }
        let inv_total = 1.0 / total.value();
        for j in 0..j_n {
            grad[j] = gacc[j].value() * inv_total;
        }
        max + total.value().ln()
    }

    fn len(&self) -> usize {
        self.log_w.len()
    }
}
