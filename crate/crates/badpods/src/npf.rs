//! Nested particle filter over static parameters and latent states.
//!
//! The ensemble holds M parameter particles, each carrying a bank of N state
//! particles. One step per observation: jitter the parameters, propagate all
//! states, reweight by the observation density, resample states within each
//! bank, reweight the parameter particles by their banks' average
//! likelihood, and resample the parameter particles carrying their banks.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, WeightLevel};
use crate::rng::RngStream;
use crate::ssm::{DesignVector, ModelSpec, Observation, ParamSupport, ParamVector, StateVector};
use crate::{kahan_sum, KahanSum, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleScheme {
    Systematic,
    Multinomial,
}

impl Default for ResampleScheme {
    fn default() -> Self {
        ResampleScheme::Systematic
    }
}

/// Gaussian parameter-jittering kernel with the M-dependent variance scaling
/// c / M^{3/2}, reflected at the prior support boundaries.
#[derive(Debug, Clone)]
pub struct JitterKernel {
    pub scale: f64,
    pub variance: f64,
    pub support: ParamSupport,
}

impl JitterKernel {
    pub fn new(scale: f64, n_params: usize, support: ParamSupport) -> Result<Self> {
        if scale < 0.0 {
            return Err(Error::invalid("jitter scale must be nonnegative"));
        }
        if n_params == 0 {
            return Err(Error::invalid("jitter kernel needs at least one particle"));
        }
        let variance = scale / (n_params as f64).powf(1.5);
        Ok(Self { scale, variance, support })
    }

    /// Perturb one parameter particle in place.
    pub fn jitter(&self, theta: &mut ParamVector, rng: &mut dyn RngCore) {
        let sd = self.variance.sqrt();
        for (i, v) in theta.0.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v = self.support.reflect(i, *v + sd * z);
        }
    }
}

/// The two-layer particle approximation of the joint posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedEnsemble {
    pub params: Vec<ParamVector>,
    pub param_weights: Vec<f64>,
    /// `states[m][n]` is the n-th state particle of bank m.
    pub states: Vec<Vec<StateVector>>,
    pub state_weights: Vec<Vec<f64>>,
    pub t: usize,
}

impl NestedEnsemble {
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_states(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Check the weight-normalization invariants.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let sum: f64 = kahan_sum(self.param_weights.iter().copied());
        if (sum - 1.0).abs() > tol || self.param_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid(format!("parameter weights sum to {sum}")));
        }
        for (m, row) in self.state_weights.iter().enumerate() {
            let s: f64 = kahan_sum(row.iter().copied());
            if (s - 1.0).abs() > tol || row.iter().any(|&w| w < 0.0) {
                return Err(Error::invalid(format!("state weights of bank {m} sum to {s}")));
            }
        }
        Ok(())
    }
}

/// Draw the initial ensemble from the model priors with uniform weights.
pub fn init_ensemble(
    model: &dyn ModelSpec,
    n_params: usize,
    n_states: usize,
    stream: &RngStream,
) -> Result<NestedEnsemble> {
    if n_params == 0 || n_states == 0 {
        return Err(Error::invalid("ensemble sizes must be positive"));
    }
    let mut prng = stream.child("init-params").rng();
    let mut srng = stream.child("init-states").rng();
    let params: Vec<ParamVector> = (0..n_params).map(|_| model.sample_param_prior(&mut prng)).collect();
    let states: Vec<Vec<StateVector>> = (0..n_params)
        .map(|_| (0..n_states).map(|_| model.sample_state_prior(&mut srng)).collect())
        .collect();
    Ok(NestedEnsemble {
        params,
        param_weights: vec![1.0 / n_params as f64; n_params],
        states,
        state_weights: vec![vec![1.0 / n_states as f64; n_states]; n_params],
        t: 0,
    })
}

/// Draw `count` ancestor indices proportional to `weights`.
pub fn resample(
    weights: &[f64],
    count: usize,
    scheme: ResampleScheme,
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot resample an empty weight vector"));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::NonFinite { context: "resampling weights", particle: None });
    }
    let total: f64 = kahan_sum(weights.iter().copied());
    if total <= 0.0 {
        return Err(Error::DegenerateWeights {
            level: WeightLevel::State,
            max_log_weight: f64::NEG_INFINITY,
        });
    }
    let mut out = Vec::with_capacity(count);
    match scheme {
        ResampleScheme::Systematic => {
            let step = total / count as f64;
            let mut pos = rng.gen::<f64>() * step;
            let mut acc = weights[0];
            let mut i = 0usize;
            for _ in 0..count {
                while pos > acc && i + 1 < weights.len() {
                    i += 1;
                    acc += weights[i];
                }
                out.push(i);
                pos += step;
            }
        }
        ResampleScheme::Multinomial => {
            let mut cum = Vec::with_capacity(weights.len());
            let mut acc = KahanSum::new();
            for &w in weights {
                acc.add(w);
                cum.push(acc.value());
            }
            for _ in 0..count {
                let u = rng.gen::<f64>() * total;
                let i = cum.partition_point(|&c| c < u).min(weights.len() - 1);
                out.push(i);
            }
        }
    }
    Ok(out)
}

/// One assimilation step: jitter, propagate, weight, resample at both layers.
///
/// RNG paths are derived from `stream` and the current timestep, so a rerun
/// from the same seed is bit-identical.
pub fn npf_step(
    ens: &mut NestedEnsemble,
    y: &Observation,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    kernel: &JitterKernel,
    scheme: ResampleScheme,
    stream: &RngStream,
) -> Result<()> {
    let (m_n, n_n) = (ens.n_params(), ens.n_states());
    let s = stream.child_idx(ens.t as u64);
    // Validate the observation once up front.
    model.prepare_y(y)?;

    // Jitter every parameter particle.
    let js = s.child("jitter");
    for (m, theta) in ens.params.iter_mut().enumerate() {
        kernel.jitter(theta, &mut js.child_idx(m as u64).rng());
    }

    // Propagate and weight each bank; record the banks' unnormalized
    // likelihood sums (in log space) for the parameter-weight update.
    let ps = s.child("propagate");
    let mut bank_log_lik = vec![0.0; m_n];
    for m in 0..m_n {
        let mut rng = ps.child_idx(m as u64).rng();
        let theta = &ens.params[m];
        let mut log_w = Vec::with_capacity(n_n);
        let mut max = f64::NEG_INFINITY;
        for n in 0..n_n {
            let next = model.sample_transition(&ens.states[m][n], theta, xi, &mut rng);
            let lg = model.log_observation(y, &next, theta, xi)?;
            if lg.is_nan() || lg == f64::INFINITY {
                return Err(Error::NonFinite { context: "observation log-density", particle: Some(n) });
            }
            let lw = ens.state_weights[m][n].ln() + lg;
            if lw > max {
                max = lw;
            }
            log_w.push(lw);
            ens.states[m][n] = next;
        }
        if max < LOG_FLOOR {
            return Err(Error::DegenerateWeights { level: WeightLevel::State, max_log_weight: max });
        }
        let mut acc = KahanSum::new();
        for lw in &log_w {
            acc.add((lw - max).exp());
        }
        let total = acc.value();
        for (n, lw) in log_w.iter().enumerate() {
            ens.state_weights[m][n] = (lw - max).exp() / total;
        }
        bank_log_lik[m] = max + total.ln();
    }

    // Resample states within each bank.
    let rs = s.child("resample-states");
    for m in 0..m_n {
        let mut rng = rs.child_idx(m as u64).rng();
        let idx = resample(&ens.state_weights[m], n_n, scheme, &mut rng)?;
        ens.states[m] = idx.iter().map(|&i| ens.states[m][i].clone()).collect();
        ens.state_weights[m] = vec![1.0 / n_n as f64; n_n];
    }

    // Parameter weights from the banks' pre-normalization likelihood sums.
    let mut max = f64::NEG_INFINITY;
    let mut log_pw = Vec::with_capacity(m_n);
    for m in 0..m_n {
        let lw = ens.param_weights[m].ln() + bank_log_lik[m];
        if lw > max {
            max = lw;
        }
        log_pw.push(lw);
    }
    if max < LOG_FLOOR {
        return Err(Error::DegenerateWeights { level: WeightLevel::Param, max_log_weight: max });
    }
    let mut acc = KahanSum::new();
    for lw in &log_pw {
        acc.add((lw - max).exp());
    }
    let total = acc.value();
    for (m, lw) in log_pw.iter().enumerate() {
        ens.param_weights[m] = (lw - max).exp() / total;
    }

    // Resample parameter particles, each carrying its full bank.
    let mut rng = s.child("resample-params").rng();
    let idx = resample(&ens.param_weights, m_n, scheme, &mut rng)?;
    ens.params = idx.iter().map(|&i| ens.params[i].clone()).collect();
    ens.states = idx.iter().map(|&i| ens.states[i].clone()).collect();
    ens.param_weights = vec![1.0 / m_n as f64; m_n];

    ens.t += 1;
    Ok(())
}

/// Weighted posterior moments of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub param_mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub param_cov: Vec<Vec<f64>>,
    /// State marginal mean under the joint weights w_theta * w_x.
    pub state_mean: Vec<f64>,
}

pub fn posterior_summary(ens: &NestedEnsemble) -> PosteriorSummary {
    let d = ens.params.first().map_or(0, ParamVector::dim);
    let ds = ens
        .states
        .first()
        .and_then(|b| b.first())
        .map_or(0, StateVector::dim);

    let mut mean = vec![KahanSum::new(); d];
    for (m, theta) in ens.params.iter().enumerate() {
        let w = ens.param_weights[m];
        for i in 0..d {
            mean[i].add(w * theta.0[i]);
        }
    }
    let param_mean: Vec<f64> = mean.iter().map(KahanSum::value).collect();

    let mut cov = vec![vec![KahanSum::new(); d]; d];
    for (m, theta) in ens.params.iter().enumerate() {
        let w = ens.param_weights[m];
        for i in 0..d {
            let di = theta.0[i] - param_mean[i];
            for j in 0..d {
                cov[i][j].add(w * di * (theta.0[j] - param_mean[j]));
            }
        }
    }

    let mut smean = vec![KahanSum::new(); ds];
    for m in 0..ens.n_params() {
        let wp = ens.param_weights[m];
        for n in 0..ens.n_states() {
            let w = wp * ens.state_weights[m][n];
            for i in 0..ds {
                smean[i].add(w * ens.states[m][n].0[i]);
            }
        }
    }

    PosteriorSummary {
        param_mean,
        param_cov: cov
            .iter()
            .map(|row| row.iter().map(KahanSum::value).collect())
            .collect(),
        state_mean: smean.iter().map(KahanSum::value).collect(),
    }
}

/// Adapter pinning a model's parameter prior to a point mass. Used to reduce
/// the nested filter to a plain bootstrap filter at a known parameter.
pub struct PinnedParam<M: ModelSpec> {
    pub inner: M,
    pub theta: ParamVector,
}

impl<M: ModelSpec> ModelSpec for PinnedParam<M> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
    fn reparam(&self) -> crate::ssm::Reparam {
        self.inner.reparam()
    }
    fn param_support(&self) -> ParamSupport {
        ParamSupport {
            bounds: self.theta.0.iter().map(|&v| (v, v)).collect(),
        }
    }
    fn sample_param_prior(&self, _rng: &mut dyn RngCore) -> ParamVector {
        self.theta.clone()
    }
    fn sample_state_prior(&self, rng: &mut dyn RngCore) -> StateVector {
        self.inner.sample_state_prior(rng)
    }
    fn sample_transition(
        &self,
        prev: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> StateVector {
        self.inner.sample_transition(prev, theta, xi, rng)
    }
    fn log_transition(
        &self,
        next: &StateVector,
        prev: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> f64 {
        self.inner.log_transition(next, prev, theta, xi)
    }
    fn sample_observation(
        &self,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
        rng: &mut dyn RngCore,
    ) -> Observation {
        self.inner.sample_observation(state, theta, xi, rng)
    }
    fn log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<f64> {
        self.inner.log_observation(y, state, theta, xi)
    }
    fn grad_xi_log_transition(
        &self,
        next: &StateVector,
        prev: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Vec<f64> {
        self.inner.grad_xi_log_transition(next, prev, theta, xi)
    }
    fn grad_xi_log_observation(
        &self,
        y: &Observation,
        state: &StateVector,
        theta: &ParamVector,
        xi: &DesignVector,
    ) -> Result<Vec<f64>> {
        self.inner.grad_xi_log_observation(y, state, theta, xi)
    }
    fn project_state(&self, state: StateVector) -> StateVector {
        self.inner.project_state(state)
    }
    fn prepare_y(&self, y: &Observation) -> Result<Vec<f64>> {
        self.inner.prepare_y(y)
    }
    fn make_obs_bank(
        &self,
        particles: &[crate::ssm::BankParticle<'_>],
        xi: &DesignVector,
    ) -> Box<dyn crate::ssm::ObsBank> {
        self.inner.make_obs_bank(particles, xi)
    }
    fn discrete_observations(&self) -> bool {
        self.inner.discrete_observations()
    }
}
