//! Two-group stochastic SIR epidemic with design-weighted Poisson counts.
//!
//! Latent state (S1, I1, S2, I2) follows an Euler-Maruyama discretization of
//! the SIR diffusion; the design splits a fixed sampling effort across the
//! two groups and enters only the observation model.

use rand::RngCore;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ln_factorial;
use crate::error::{Error, Result};
use crate::ssm::{
    BankParticle, DesignVector, ModelSpec, ObsBank, Observation, ParamSupport, ParamVector,
    Reparam, StateVector,
};
use crate::{KahanSum, LOG_FLOOR};

/// Floor on the Poisson observation rate so that an empty compartment or a
/// zero design weight cannot produce a zero likelihood.
pub const LAMBDA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SirConfig {
    /// Group population sizes (N1, N2).
    pub population: [f64; 2],
    /// Initial infected per group.
    pub initial_infected: [f64; 2],
    /// Detection scales (rho1, rho2).
    pub detection: [f64; 2],
    /// Total sampling effort kappa split by the design.
    pub effort: f64,
    /// Cross-group mixing matrix, rows summing to one.
    pub mixing: [[f64; 2]; 2],
    /// Euler-Maruyama step.
    pub dtau: f64,
    /// Fixed, known second-group rates.
    pub beta2: f64,
    pub gamma2: f64,
    /// Uniform prior bounds shared by (beta1, gamma1).
    pub prior: (f64, f64),
    /// Ground-truth first-group rates used to simulate data.
    pub true_beta1: f64,
    pub true_gamma1: f64,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            population: [200.0, 200.0],
            initial_infected: [5.0, 5.0],
            detection: [0.95, 0.5],
            effort: 100.0,
            mixing: [[0.9, 0.1], [0.1, 0.9]],
            dtau: 0.1,
            beta2: 0.55,
            gamma2: 0.15,
            prior: (0.1, 1.0),
            true_beta1: 0.65,
            true_gamma1: 0.15,
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population.iter().any(|&n| n <= 0.0) {
            return Err(Error::invalid("SIR populations must be positive"));
        }
        if self.detection.iter().any(|&r| r <= 0.0) || self.effort <= 0.0 || self.dtau <= 0.0 {
            return Err(Error::invalid("SIR detection/effort/dtau must be positive"));
        }
        for row in &self.mixing {
            if (row[0] + row[1] - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("SIR mixing rows must sum to 1"));
            }
        }
        if self.prior.0 >= self.prior.1 {
            return Err(Error::invalid("SIR prior bounds must satisfy lo < hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SirModel {
    pub cfg: SirConfig,
}

impl SirModel {
    pub fn new(cfg: SirConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Per-group infection and recovery rates (lambda1, r1, lambda2, r2).
    pub fn rates(&self, state: &[f64; 4], beta: [f64; 2], gamma: [f64; 2]) -> [f64; 4] {
        let c = &self.cfg;
        let i_frac = [state[1] / c.population[0], state[3] / c.population[1]];
        let mut out = [0.0; 4];
        for g in 0..2 {
            let s = state[2 * g];
            let i = state[2 * g + 1];
            let force: f64 = c.mixing[g][0] * i_frac[0] + c.mixing[g][1] * i_frac[1];
            out[2 * g] = (beta[g] * s * force).max(0.0);
            out[2 * g + 1] = (gamma[g] * i).max(0.0);
        }
        out
    }

    fn group_rates(&self, theta: &ParamVector) -> ([f64; 2], [f64; 2]) {
        ([theta.0[0], self.cfg.beta2], [theta.0[1], self.cfg.gamma2])
    }

    /// One Euler-Maruyama step with explicit Wiener increments; the
    /// zero-noise hook used by deterministic-drift tests.
    pub fn em_step_with_noise(
        &self,
        state: &[f64; 4],
        theta: &ParamVector,
        dw: &[f64; 4],
    ) -> [f64; 4] {
        let (beta, gamma) = self.group_rates(theta);
        let a = self.rates(state, beta, gamma);
        let dt = self.cfg.dtau;
        let mut next = *state;
        for g in 0..2 {
            let (lam, rec) = (a[2 * g], a[2 * g + 1]);
            let (dwl, dwr) = (dw[2 * g], dw[2 * g + 1]);
            // Stoichiometry: infection moves S->I, recovery moves I->R.
            next[2 * g] += -lam * dt - lam.sqrt() * dwl;
            next[2 * g + 1] += (lam - rec) * dt + lam.sqrt() * dwl - rec.sqrt() * dwr;
        }
        self.project4(next)
    }

    fn project4(&self, mut x: [f64; 4]) -> [f64; 4] {
        for g in 0..2 {
            let n = self.cfg.population[g];
            x[2 * g] = x[2 * g].clamp(0.0, n);
            x[2 * g + 1] = x[2 * g + 1].clamp(0.0, n - x[2 * g]);
        }
        x
    }

    /// Poisson observation rates after the positivity clamp, together with
    /// the pre-design factors kappa * rho_g * I_g / N_g.
    pub fn obs_rates(&self, state: &[f64; 4], xi: &DesignVector) -> ([f64; 2], [f64; 2]) {
        let c = &self.cfg;
        let mut lam = [0.0; 2];
        let mut fac = [0.0; 2];
        for g in 0..2 {
            fac[g] = c.effort * c.detection[g] * state[2 * g + 1] / c.population[g];
            lam[g] = (xi.values[g] * fac[g]).max(LAMBDA_FLOOR);
        }
        (lam, fac)
    }

    fn as4(state: &StateVector) -> [f64; 4] {
        [state.0[0], state.0[1], state.0[2], state.0[3]]
    }
}

impl ModelSpec for SirModel {
    fn name(&self) -> &'static str {
        "sir2"
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn reparam(&self) -> Reparam {
        Reparam::SimplexSigmoid { dim: 2 }
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
        let c = &self.cfg;
        StateVector(vec![
            c.population[0] - c.initial_infected[0],
            c.initial_infected[0],
            c.population[1] - c.initial_infected[1],
            c.initial_infected[1],
        ])
    }

    fn sample_transition(
        &self,
        prev: &StateVector,
        theta: &ParamVector,
        _xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> StateVector {
        let sd = self.cfg.dtau.sqrt();
        let mut dw = [0.0; 4];
        for w in &mut dw {
            let z: f64 = StandardNormal.sample(rng);
            *w = sd * z;
        }
        StateVector(self.em_step_with_noise(&Self::as4(prev), theta, &dw).to_vec())
    }

    fn log_transition(
        &self,
        next: &StateVector,
        prev: &StateVector,
        theta: &ParamVector,
        _xi: &DesignVector,
    ) -> f64 {
        // Gaussian Euler-Maruyama density per compartment, ignoring the
        // boundary projection. Not used by the estimators (the transition is
        // design-independent); provided for completeness.
        let (beta, gamma) = self.group_rates(theta);
        let a = self.rates(&Self::as4(prev), beta, gamma);
        let dt = self.cfg.dtau;
        let mut lp = 0.0;
        for g in 0..2 {
            let (lam, rec) = (a[2 * g], a[2 * g + 1]);
            let mean_s = prev.0[2 * g] - lam * dt;
            let mean_i = prev.0[2 * g + 1] + (lam - rec) * dt;
            let var_s = (lam * dt).max(1e-12);
            let var_i = ((lam + rec) * dt).max(1e-12);
            let ds = next.0[2 * g] - mean_s;
            let di = next.0[2 * g + 1] - mean_i;
            lp += -0.5 * ((2.0 * std::f64::consts::PI * var_s).ln() + ds * ds / var_s);
            lp += -0.5 * ((2.0 * std::f64::consts::PI * var_i).ln() + di * di / var_i);
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
        let (lam, _) = self.obs_rates(&Self::as4(state), xi);
        Observation(
            lam.iter()
                .map(|&l| Poisson::new(l).expect("positive rate").sample(rng))
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
        let (lam, _) = self.obs_rates(&Self::as4(state), xi);
        Ok(py[0] * lam[0].ln() + py[1] * lam[1].ln() - lam[0] - lam[1] - py[2])
    }

    fn grad_xi_log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        _theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<Vec<f64>> {
        let py = self.prepare_y(y)?;
        let (lam, fac) = self.obs_rates(&Self::as4(state), xi);
        let mut g = vec![0.0; 2];
        for j in 0..2 {
            // Inside the clamp region the rate is constant in xi.
            if xi.values[j] * fac[j] > LAMBDA_FLOOR {
                g[j] = (py[j] / lam[j] - 1.0) * fac[j];
            }
        }
        Ok(g)
    }

    fn project_state(&self, state: StateVector) -> StateVector {
        StateVector(self.project4(Self::as4(&state)).to_vec())
    }

    fn prepare_y(&self, y: &Observation) -> Result<Vec<f64>> {
        if y.0.len() != 2 {
            return Err(Error::DimensionMismatch {
                context: "sir observation",
                expected: 2,
                got: y.0.len(),
            });
        }
        for &v in &y.0 {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::invalid(format!("sir counts must be nonnegative integers, got {v}")));
            }
        }
        Ok(vec![y.0[0], y.0[1], ln_factorial(y.0[0]) + ln_factorial(y.0[1])])
    }

    fn make_obs_bank(&self, particles: &[BankParticle<'_>], xi: &DesignVector) -> Box<dyn ObsBank> {
        let n = particles.len();
        let mut bank = SirObsBank {
            inv_xi: [1.0 / xi.values[0], 1.0 / xi.values[1]],
            log_w: Vec::with_capacity(n),
            ln_lam: Vec::with_capacity(n),
            lam_sum: Vec::with_capacity(n),
            active: Vec::with_capacity(n),
            fac: Vec::with_capacity(n),
        };
        for p in particles {
            debug_assert!(p.transition_score.is_none(), "sir transition is design-free");
            let (lam, fac) = self.obs_rates(&SirModel::as4(p.state), xi);
            bank.log_w.push(p.log_weight);
            bank.ln_lam.push([lam[0].ln(), lam[1].ln()]);
            bank.lam_sum.push(lam[0] + lam[1]);
            let act = [
                (xi.values[0] * fac[0] > LAMBDA_FLOOR) as u8 as f64,
                (xi.values[1] * fac[1] > LAMBDA_FLOOR) as u8 as f64,
            ];
            bank.fac.push([fac[0] * act[0], fac[1] * act[1]]);
            bank.active.push(act);
        }
        Box::new(bank)
    }

    fn discrete_observations(&self) -> bool {
        true
    }

    fn true_params(&self) -> Option<ParamVector> {
        Some(ParamVector(vec![self.cfg.true_beta1, self.cfg.true_gamma1]))
    }
}

/// Prepared particle bank for the SIR observation model.
struct SirObsBank {
    inv_xi: [f64; 2],
    log_w: Vec<f64>,
    ln_lam: Vec<[f64; 2]>,
    lam_sum: Vec<f64>,
    /// 1.0 where the rate is not clamped (so the design-gradient is live).
    active: Vec<[f64; 2]>,
    /// Pre-design factor, zeroed where clamped.
    fac: Vec<[f64; 2]>,
}

impl SirObsBank {
    #[inline]
    fn terms(&self, py: &[f64], buf: &mut Vec<f64>) -> f64 {
        let (y0, y1, lnfact) = (py[0], py[1], py[2]);
        buf.clear();
        let mut max = f64::NEG_INFINITY;
        for p in 0..self.log_w.len() {
            let t = self.log_w[p] + y0 * self.ln_lam[p][0] + y1 * self.ln_lam[p][1]
                - self.lam_sum[p]
                - lnfact;
            let t = t.max(LOG_FLOOR);
            if t > max {
                max = t;
            }
            buf.push(t);
        }
        max
    }
}

impl ObsBank for SirObsBank {
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
        let mut buf = Vec::new();
        let max = self.terms(py, &mut buf);
        let mut total = KahanSum::new();
        let mut act = [KahanSum::new(), KahanSum::new()];
        let mut fac = [KahanSum::new(), KahanSum::new()];
        for p in 0..buf.len() {
            let u = (buf[p] - max).exp();
            total.add(u);
            act[0].add(u * self.active[p][0]);
            act[1].add(u * self.active[p][1]);
            fac[0].add(u * self.fac[p][0]);
            fac[1].add(u * self.fac[p][1]);
        }
        let inv_total = 1.0 / total.value();
        for j in 0..2 {
            grad[j] = py[j] * self.inv_xi[j] * act[j].value() * inv_total
                - fac[j].value() * inv_total;
        }
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

    fn model() -> SirModel {
        SirModel::new(SirConfig::default()).unwrap()
    }

    fn design(xi1: f64) -> DesignVector {
        let latent = (xi1 / (1.0 - xi1)).ln();
        transform_design(&[latent], Reparam::SimplexSigmoid { dim: 2 }).unwrap()
    }

    #[test]
    fn infection_rate_matches_hand_arithmetic() {
        let m = model();
        let state = [195.0, 5.0, 195.0, 5.0];
        let a = m.rates(&state, [0.65, 0.55], [0.15, 0.15]);
        // 0.65 * 195 * (0.9*0.025 + 0.1*0.025) = 3.169 to 4 s.f.
        assert_abs_diff_eq!(a[0], 3.16875, epsilon = 1e-10);
        assert_abs_diff_eq!(a[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn disease_free_state_has_zero_rates_and_is_absorbing() {
        let m = model();
        let state = [200.0, 0.0, 200.0, 0.0];
        let a = m.rates(&state, [0.65, 0.55], [0.15, 0.15]);
        assert_eq!(a, [0.0; 4]);
        let theta = ParamVector(vec![0.65, 0.15]);
        let next = m.em_step_with_noise(&state, &theta, &[0.3, -0.2, 0.1, 0.4]);
        assert_eq!(next, state);
    }

    #[test]
    fn zero_noise_drift_matches_rates() {
        let m = model();
        let theta = ParamVector(vec![0.65, 0.15]);
        let state = [195.0, 5.0, 195.0, 5.0];
        let next = m.em_step_with_noise(&state, &theta, &[0.0; 4]);
        assert_abs_diff_eq!(next[0] - state[0], -0.316875, epsilon = 1e-10);
        assert_abs_diff_eq!(next[1] - state[1], 0.241875, epsilon = 1e-10);
    }

    #[test]
    fn projection_clamps_to_population() {
        let m = model();
        let x = m.project_state(StateVector(vec![210.0, 30.0, -5.0, 250.0]));
        assert_eq!(x.0, vec![200.0, 0.0, 0.0, 200.0]);
    }

    #[test]
    fn observation_rate_matches_hand_arithmetic() {
        let m = model();
        let xi = design(0.5);
        let (lam, _) = m.obs_rates(&[195.0, 5.0, 195.0, 5.0], &xi);
        // 100 * 0.5 * 0.95 * (5/200) = 1.1875
        assert_abs_diff_eq!(lam[0], 1.1875, epsilon = 1e-12);
    }

    #[test]
    fn zero_counts_log_density_is_minus_rate_sum() {
        let m = model();
        let xi = design(0.4);
        let state = StateVector(vec![180.0, 20.0, 190.0, 10.0]);
        let (lam, _) = m.obs_rates(&[180.0, 20.0, 190.0, 10.0], &xi);
        let lp = m
            .log_observation(&Observation(vec![0.0, 0.0]), &state, &ParamVector(vec![0.5, 0.2]), &xi)
            .unwrap();
        assert_abs_diff_eq!(lp, -lam[0] - lam[1], epsilon = 1e-12);
    }

    #[test]
    fn poisson_score_root_at_rate() {
        // y equal to the first rate zeroes the first (pre-chain-rule)
        // gradient component.
        let m = model();
        let xi = design(0.5);
        let state = StateVector(vec![180.0, 20.0, 190.0, 10.0]);
        let theta = ParamVector(vec![0.5, 0.2]);
        let (lam, _) = m.obs_rates(&[180.0, 20.0, 190.0, 10.0], &xi);
        // Fabricate an integer y equal to the rate by scaling the state so
        // that lam[0] is an integer: with I=20, rate = 100*0.5*0.95*0.1 = 4.75;
        // use xi1 such that lam0 = 4: xi1 = 4 / (100*0.95*0.1).
        let xi = design(4.0 / (100.0 * 0.95 * 0.1));
        let (lam2, _) = m.obs_rates(&[180.0, 20.0, 190.0, 10.0], &xi);
        assert_abs_diff_eq!(lam2[0], 4.0, epsilon = 1e-12);
        let g = m
            .grad_xi_log_observation(&Observation(vec![4.0, 3.0]), &state, &theta, &xi)
            .unwrap();
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-12);
        let _ = lam;
    }

    #[test]
    fn invalid_counts_are_rejected(){
        let m = model();
        let xi = design(0.5);
        let state = StateVector(vec![180.0, 20.0, 190.0, 10.0]);
        let theta = ParamVector(vec![0.5, 0.2]);
        assert!(m.log_observation(&Observation(vec![-1.0, 0.0]), &state, &theta, &xi).is_err());
        assert!(m.log_observation(&Observation(vec![1.5, 0.0]), &state, &theta, &xi).is_err());
    }

    #[test]
    fn grad_matches_finite_differences() {
        use rand::Rng;
        let m = model();
        let mut rng = RngStream::root(42).rng();
        for trial in 0..1000 {
            let i1: f64 = rng.gen_range(1.0..120.0);
            let i2: f64 = rng.gen_range(1.0..120.0);
            let state = StateVector(vec![200.0 - i1, i1.floor(), 200.0 - i2, i2.floor()]);
            let theta = ParamVector(vec![rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)]);
            let xi1: f64 = rng.gen_range(0.05..0.95);
            let xi = design(xi1);
            let y = Observation(vec![
                rng.gen_range(0..30) as f64,
                rng.gen_range(0..30) as f64,
            ]);
            let analytic = m.grad_xi_log_observation(&y, &state, &theta, &xi).unwrap();
            let h = 1e-5;
            for j in 0..2 {
                let mut vp = xi.clone();
                let mut vm = xi.clone();
                vp.values[j] += h;
                vm.values[j] -= h;
                let fp = m.log_observation(&y, &state, &theta, &vp).unwrap();
                let fm = m.log_observation(&y, &state, &theta, &vm).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (analytic[j] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-6, "trial {trial} coord {j}: {} vs {fd}", analytic[j]);
            }
        }
    }

    #[test]
    fn bank_matches_direct_evaluation() {
        use rand::Rng;
        let m = model();
        let xi = design(0.37);
        let mut rng = RngStream::root(9).rng();
        let states: Vec<StateVector> = (0..50)
            .map(|_| {
                let i1: f64 = rng.gen_range(0.0..50.0);
                let i2: f64 = rng.gen_range(0.0..50.0);
                StateVector(vec![200.0 - i1, i1, 200.0 - i2, i2])
            })
            .collect();
        let theta = ParamVector(vec![0.6, 0.2]);
        let log_w = (-(50.0f64).ln()).to_owned();
        let particles: Vec<BankParticle<'_>> = states
            .iter()
            .map(|s| BankParticle { state: s, theta: &theta, log_weight: log_w, transition_score: None })
            .collect();
        let bank = m.make_obs_bank(&particles, &xi);
        let y = Observation(vec![3.0, 1.0]);
        let py = m.prepare_y(&y).unwrap();
        let direct = {
            let terms: Vec<f64> = states
                .iter()
                .map(|s| log_w + m.log_observation(&y, s, &theta, &xi).unwrap())
                .collect();
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
        };
        assert_abs_diff_eq!(bank.log_mixture(&py), direct, epsilon = 1e-12);

        // Gradient of the mixture vs finite differences of the mixture.
        let mut grad = [0.0; 2];
        let v = bank.log_mixture_grad(&py, &mut grad);
        assert_abs_diff_eq!(v, direct, epsilon = 1e-12);
        let h = 1e-6;
        for j in 0..2 {
            let mut vp = xi.clone();
            let mut vm = xi.clone();
            vp.values[j] += h;
            vm.values[j] -= h;
            let bp = m.make_obs_bank(&particles, &vp);
            let bm = m.make_obs_bank(&particles, &vm);
            let fd = (bp.log_mixture(&py) - bm.log_mixture(&py)) / (2.0 * h);
            assert_abs_diff_eq!(grad[j], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn feasibility_preserved_over_random_steps() {
        let m = model();
        let theta = ParamVector(vec![0.9, 0.11]);
        let xi = design(0.5);
        let mut rng = RngStream::root(3).rng();
        let mut x = m.sample_state_prior(&mut rng);
        for _ in 0..100_000 {
            x = m.sample_transition(&x, &theta, &xi, &mut rng);
            for g in 0..2 {
                let n = m.cfg.population[g];
                let (s, i) = (x.0[2 * g], x.0[2 * g + 1]);
                assert!(s >= 0.0 && s <= n);
                assert!(i >= 0.0 && i <= n - s);
            }
        }
    }
}
