//! Nested Monte Carlo estimators of the expected information gain (EIG) and
//! its design gradient.
//!
//! All estimators consume the current posterior ensemble. Per evaluation:
//!
//! - a batch of predictive samples (theta, x_{t-1}, x-tilde, y-tilde) is
//!   drawn at the candidate design, weighted by the joint posterior weights;
//! - the conditional likelihood L(y | theta) is estimated by a fresh
//!   one-step-propagated bank per outer particle;
//! - the evidence Z(y) is estimated by a jittered-and-propagated bank over
//!   all outer particles;
//! - the EIG is the weighted average of log L - log Z over the batch, and
//!   its gradient adds the likelihood-ratio score term.
//!
//! Likelihood and evidence particle sets are drawn once per evaluation and
//! shared across the whole batch; the two sets share propagation noise so
//! that a single-parameter ensemble with a zero-variance jitter gives
//! exactly L = Z and a zero EIG.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npf::{resample, JitterKernel, NestedEnsemble, ResampleScheme};
use crate::rng::RngStream;
use crate::ssm::{BankParticle, DesignVector, ModelSpec, ObsBank, Observation, ParamVector, StateVector};
use crate::{KahanSum, LOG_FLOOR};

/// One draw from the one-step predictive distribution at a candidate design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaSample {
    /// Index of the outer particle this sample descends from.
    pub m_index: usize,
    pub theta: ParamVector,
    pub prev_state: StateVector,
    pub pred_state: StateVector,
    pub pseudo_obs: Observation,
    pub weight: f64,
}

/// Batch of predictive samples. With `batch == M * N` every (m, n) pair is
/// used once with its joint posterior weight; smaller batches resample pairs
/// proportionally to the joint weights and carry uniform weights.
pub fn sample_gamma(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    batch: usize,
    stream: &RngStream,
) -> Result<Vec<GammaSample>> {
    let (m_n, n_n) = (ens.n_params(), ens.n_states());
    let full = m_n * n_n;
    if batch == 0 || batch > full {
        return Err(Error::invalid(format!(
            "predictive batch must be in 1..={full}, got {batch}"
        )));
    }
    let mut rng = stream.child("draw").rng();
    let pairs: Vec<(usize, usize, f64)> = if batch == full {
        (0..m_n)
            .flat_map(|m| {
                (0..n_n).map(move |n| (m, n, 0.0))
            })
            .map(|(m, n, _)| (m, n, ens.param_weights[m] * ens.state_weights[m][n]))
            .collect()
    } else {
        let joint: Vec<f64> = (0..m_n)
            .flat_map(|m| (0..n_n).map(move |n| (m, n)))
            .map(|(m, n)| ens.param_weights[m] * ens.state_weights[m][n])
            .collect();
        let mut srng = stream.child("subsample").rng();
        let idx = resample(&joint, batch, ResampleScheme::Multinomial, &mut srng)?;
        idx.into_iter()
            .map(|i| (i / n_n, i % n_n, 1.0 / batch as f64))
            .collect()
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (m, n, w) in pairs {
        let theta = ens.params[m].clone();
        let prev = ens.states[m][n].clone();
        let pred = model.sample_transition(&prev, &theta, xi, &mut rng);
        let y = model.sample_observation(&pred, &theta, xi, &mut rng);
        out.push(GammaSample {
            m_index: m,
            theta,
            prev_state: prev,
            pred_state: pred,
            pseudo_obs: y,
            weight: w,
        });
    }
    Ok(out)
}

/// Raw particle draws shared by the likelihood and evidence estimators.
struct RawParticles {
    /// Jittered parameters for the evidence bank.
    jittered: Vec<ParamVector>,
    /// Fresh propagated states per outer particle, at the original theta.
    like_pred: Vec<Vec<StateVector>>,
    /// Fresh propagated states per outer particle, at the jittered theta,
    /// using the same propagation noise as `like_pred`.
    evid_pred: Vec<Vec<StateVector>>,
}

fn draw_raw_particles(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    kernel: &JitterKernel,
    stream: &RngStream,
) -> RawParticles {
    let (m_n, n_n) = (ens.n_params(), ens.n_states());
    let js = stream.child("jitter");
    let jittered: Vec<ParamVector> = (0..m_n)
        .map(|i| {
            let mut theta = ens.params[i].clone();
            kernel.jitter(&mut theta, &mut js.child_idx(i as u64).rng());
            theta
        })
        .collect();
    let ps = stream.child("prop");
    let mut like_pred = Vec::with_capacity(m_n);
    let mut evid_pred = Vec::with_capacity(m_n);
    for m in 0..m_n {
        let s = ps.child_idx(m as u64);
        // Two generators over the same key: identical noise for the two
        // banks, so they coincide exactly when theta-dot equals theta.
        let mut rng_like = s.rng();
        let mut rng_evid = s.rng();
        let mut lp = Vec::with_capacity(n_n);
        let mut ep = Vec::with_capacity(n_n);
        for n in 0..n_n {
            lp.push(model.sample_transition(&ens.states[m][n], &ens.params[m], xi, &mut rng_like));
            ep.push(model.sample_transition(&ens.states[m][n], &jittered[m], xi, &mut rng_evid));
        }
        like_pred.push(lp);
        evid_pred.push(ep);
    }
    RawParticles { jittered, like_pred, evid_pred }
}

/// Prepared likelihood and evidence banks for one estimator evaluation.
pub struct EigParticles {
    like_banks: Vec<Box<dyn ObsBank>>,
    evid_bank: Box<dyn ObsBank>,
    n_states: usize,
}

/// Draw and prepare the shared particle sets for one evaluation at `xi`.
pub fn draw_eig_particles(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    kernel: &JitterKernel,
    stream: &RngStream,
) -> EigParticles {
    let raw = draw_raw_particles(ens, xi, model, kernel, stream);
    build_banks(ens, xi, model, &raw)
}

fn build_banks(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    raw: &RawParticles,
) -> EigParticles {
    let (m_n, n_n) = (ens.n_params(), ens.n_states());
    let like_banks: Vec<Box<dyn ObsBank>> = (0..m_n)
        .map(|m| {
            let particles: Vec<BankParticle<'_>> = (0..n_n)
                .map(|n| BankParticle {
                    state: &raw.like_pred[m][n],
                    theta: &ens.params[m],
                    log_weight: ens.state_weights[m][n].ln(),
                    transition_score: None,
                })
                .collect();
            model.make_obs_bank(&particles, xi)
        })
        .collect();
    let evid_particles: Vec<BankParticle<'_>> = (0..m_n)
        .flat_map(|i| {
            let raw = &raw;
            let ens = &*ens;
            (0..n_n).map(move |j| BankParticle {
                state: &raw.evid_pred[i][j],
                theta: &raw.jittered[i],
                log_weight: (ens.param_weights[i] * ens.state_weights[i][j]).ln(),
                transition_score: None,
            })
        })
        .collect();
    let evid_bank = model.make_obs_bank(&evid_particles, xi);
    EigParticles { like_banks, evid_bank, n_states: n_n }
}

impl EigParticles {
    pub fn n_params(&self) -> usize {
        self.like_banks.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// log of the estimated conditional likelihood L(y | theta^(m)).
    pub fn log_likelihood_hat(&self, m: usize, prepared_y: &[f64]) -> f64 {
        self.like_banks[m].log_mixture(prepared_y)
    }

    /// As [`EigParticles::log_likelihood_hat`], also writing grad(L)/L.
    pub fn log_likelihood_grad(&self, m: usize, prepared_y: &[f64], grad: &mut [f64]) -> f64 {
        self.like_banks[m].log_mixture_grad(prepared_y, grad)
    }

    /// log of the estimated evidence Z(y).
    pub fn log_evidence_hat(&self, prepared_y: &[f64]) -> f64 {
        self.evid_bank.log_mixture(prepared_y)
    }

    /// As [`EigParticles::log_evidence_hat`], also writing grad(Z)/Z.
    pub fn log_evidence_grad(&self, prepared_y: &[f64], grad: &mut [f64]) -> f64 {
        self.evid_bank.log_mixture_grad(prepared_y, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigDiagnostics {
    pub batch: usize,
    pub n_params: usize,
    pub n_states: usize,
    pub log_like_min: f64,
    pub log_like_max: f64,
    pub log_evid_min: f64,
    pub log_evid_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    pub value: f64,
    /// Gradient with respect to the design values (not the latent).
    pub gradient: Vec<f64>,
    pub diagnostics: EigDiagnostics,
}

/// Estimated EIG at `xi`.
pub fn eig_hat(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    kernel: &JitterKernel,
    batch: usize,
    stream: &RngStream,
) -> Result<f64> {
    Ok(eig_core(ens, xi, model, kernel, batch, stream, false)?.value)
}

/// Estimated EIG and design-gradient at `xi`, from the same draws as
/// [`eig_hat`]: the value field is bit-identical for identical streams.
pub fn eig_grad_hat(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    kernel: &JitterKernel,
    batch: usize,
    stream: &RngStream,
) -> Result<EigEstimate> {
    eig_core(ens, xi, model, kernel, batch, stream, true)
}

fn obs_key(y: &Observation) -> Vec<u64> {
    y.0.iter().map(|v| v.to_bits()).collect()
}

fn eig_core(
    ens: &NestedEnsemble,
    xi: &DesignVector,
    model: &dyn ModelSpec,
    kernel: &JitterKernel,
    batch: usize,
    stream: &RngStream,
    with_grad: bool,
) -> Result<EigEstimate> {
    let d = xi.dim();
    let raw = draw_raw_particles(ens, xi, model, kernel, stream);
    let particles = build_banks(ens, xi, model, &raw);
    let gamma = sample_gamma(ens, xi, model, batch, &stream.child("gamma"))?;

    let dedup = model.discrete_observations();
    // Caches for repeated pseudo-observations (integer-valued models draw
    // many identical counts).
    let mut evid_cache: HashMap<Vec<u64>, (f64, Vec<f64>)> = HashMap::new();
    let mut like_cache: HashMap<(usize, Vec<u64>), (f64, Vec<f64>)> = HashMap::new();

    let mut value = KahanSum::new();
    let mut grad_acc = vec![KahanSum::new(); d];
    let mut diag = EigDiagnostics {
        batch: gamma.len(),
        n_params: ens.n_params(),
        n_states: ens.n_states(),
        log_like_min: f64::INFINITY,
        log_like_max: f64::NEG_INFINITY,
        log_evid_min: f64::INFINITY,
        log_evid_max: f64::NEG_INFINITY,
    };

    let mut scratch = vec![0.0; d];
    for (l, gs) in gamma.iter().enumerate() {
        let py = model.prepare_y(&gs.pseudo_obs)?;

        let (log_l, grad_l) = if dedup {
            let key = (gs.m_index, obs_key(&gs.pseudo_obs));
            like_cache
                .entry(key)
                .or_insert_with(|| {
                    if with_grad {
                        let v = particles.log_likelihood_grad(gs.m_index, &py, &mut scratch);
                        (v, scratch.clone())
                    } else {
                        (particles.log_likelihood_hat(gs.m_index, &py), Vec::new())
                    }
                })
                .clone()
        } else if with_grad {
            let v = particles.log_likelihood_grad(gs.m_index, &py, &mut scratch);
            (v, scratch.clone())
        } else {
            (particles.log_likelihood_hat(gs.m_index, &py), Vec::new())
        };

        let (log_z, grad_z) = if dedup {
            let key = obs_key(&gs.pseudo_obs);
            evid_cache
                .entry(key)
                .or_insert_with(|| {
                    if with_grad {
                        let v = particles.log_evidence_grad(&py, &mut scratch);
                        (v, scratch.clone())
                    } else {
                        (particles.log_evidence_hat(&py), Vec::new())
                    }
                })
                .clone()
        } else if with_grad {
            let v = particles.log_evidence_grad(&py, &mut scratch);
            (v, scratch.clone())
        } else {
            (particles.log_evidence_hat(&py), Vec::new())
        };

        if !log_l.is_finite() || !log_z.is_finite() {
            return Err(Error::NonFinite { context: "eig sub-estimator", particle: Some(l) });
        }
        diag.log_like_min = diag.log_like_min.min(log_l);
        diag.log_like_max = diag.log_like_max.max(log_l);
        diag.log_evid_min = diag.log_evid_min.min(log_z);
        diag.log_evid_max = diag.log_evid_max.max(log_z);

        let ratio = log_l - log_z;
        value.add(gs.weight * ratio);

        if with_grad {
            if grad_l.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "eig likelihood term", particle: Some(l) });
            }
            if grad_z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "eig evidence term", particle: Some(l) });
            }
            let mut score = model.grad_xi_log_transition(&gs.pred_state, &gs.prev_state, &gs.theta, xi);
            let gobs = model.grad_xi_log_observation(&gs.pseudo_obs, &gs.pred_state, &gs.theta, xi)?;
            for (s, g) in score.iter_mut().zip(&gobs) {
                *s += g;
            }
            if score.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "eig score term", particle: Some(l) });
            }
            for j in 0..d {
                grad_acc[j].add(gs.weight * (grad_l[j] - grad_z[j] + ratio * score[j]));
            }
        }
    }

    let estimate = EigEstimate {
        value: value.value(),
        gradient: grad_acc.iter().map(KahanSum::value).collect(),
        diagnostics: diag,
    };
    if !estimate.value.is_finite() {
        return Err(Error::NonFinite { context: "eig value", particle: None });
    }
    Ok(estimate)
}

/// Test-and-verification objective: the EIG estimator with every random draw
/// frozen at a base design, made differentiable in the design by importance
/// reweighting.
///
/// Sampled predictive states and pseudo-observations keep their base-design
/// values; moving the design reweights each frozen draw by the density ratio
/// of the transition and observation models between the probe design and the
/// base design. The exact gradient of this objective at the base design
/// equals the analytic gradient estimator on the same draws, so central
/// finite differences of [`FrozenEig::value`] provide an independent oracle
/// for [`eig_grad_hat`].
pub struct FrozenEig<'a> {
    model: &'a dyn ModelSpec,
    base: DesignVector,
    gamma: Vec<GammaSample>,
    /// log f + log g of each predictive draw at the base design.
    base_gamma_log: Vec<f64>,
    like: Vec<FrozenSet>,
    evid: FrozenSet,
}

struct FrozenSet {
    thetas: Vec<ParamVector>,
    prev: Vec<StateVector>,
    pred: Vec<StateVector>,
    log_w: Vec<f64>,
    base_log_f: Vec<f64>,
}

impl FrozenSet {
    fn log_mixture(&self, model: &dyn ModelSpec, y: &Observation, xi: &DesignVector) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.log_w.len());
        let mut max = f64::NEG_INFINITY;
        for p in 0..self.log_w.len() {
            let lf = model.log_transition(&self.pred[p], &self.prev[p], &self.thetas[p], xi);
            let lg = model.log_observation(y, &self.pred[p], &self.thetas[p], xi)?;
            let t = (self.log_w[p] + (lf - self.base_log_f[p]) + lg).max(LOG_FLOOR);
            if t > max {
                max = t;
            }
            terms.push(t);
        }
        let mut acc = KahanSum::new();
        for t in terms {
            acc.add((t - max).exp());
        }
        Ok(max + acc.value().ln())
    }
}

impl<'a> FrozenEig<'a> {
    /// Freeze all draws of one estimator evaluation at `xi`. Uses the same
    /// stream layout as [`eig_hat`], so for identical streams the frozen
    /// draws are the ones the live estimator consumed.
    pub fn freeze(
        ens: &NestedEnsemble,
        xi: &DesignVector,
        model: &'a dyn ModelSpec,
        kernel: &JitterKernel,
        batch: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        let raw = draw_raw_particles(ens, xi, model, kernel, stream);
        let gamma = sample_gamma(ens, xi, model, batch, &stream.child("gamma"))?;
        let (m_n, n_n) = (ens.n_params(), ens.n_states());

        let like: Vec<FrozenSet> = (0..m_n)
            .map(|m| FrozenSet {
                thetas: vec![ens.params[m].clone(); n_n],
                prev: ens.states[m].clone(),
                pred: raw.like_pred[m].clone(),
                log_w: ens.state_weights[m].iter().map(|w| w.ln()).collect(),
                base_log_f: (0..n_n)
                    .map(|n| {
                        model.log_transition(&raw.like_pred[m][n], &ens.states[m][n], &ens.params[m], xi)
                    })
                    .collect(),
            })
            .collect();

        let mut evid = FrozenSet {
            thetas: Vec::new(),
            prev: Vec::new(),
            pred: Vec::new(),
            log_w: Vec::new(),
            base_log_f: Vec::new(),
        };
        for i in 0..m_n {
            for j in 0..n_n {
                evid.thetas.push(raw.jittered[i].clone());
                evid.prev.push(ens.states[i][j].clone());
                evid.pred.push(raw.evid_pred[i][j].clone());
                evid.log_w.push((ens.param_weights[i] * ens.state_weights[i][j]).ln());
                evid.base_log_f.push(model.log_transition(
                    &raw.evid_pred[i][j],
                    &ens.states[i][j],
                    &raw.jittered[i],
                    xi,
                ));
            }
        }

        let base_gamma_log: Vec<f64> = gamma
            .iter()
            .map(|gs| {
                Ok(model.log_transition(&gs.pred_state, &gs.prev_state, &gs.theta, xi)
                    + model.log_observation(&gs.pseudo_obs, &gs.pred_state, &gs.theta, xi)?)
            })
            .collect::<Result<_>>()?;

        Ok(Self { model, base: xi.clone(), gamma, base_gamma_log, like, evid })
    }

    pub fn base(&self) -> &DesignVector {
        &self.base
    }

    /// The reweighted frozen objective at a probe design.
    pub fn value(&self, xi: &DesignVector) -> Result<f64> {
        let mut acc = KahanSum::new();
        for (l, gs) in self.gamma.iter().enumerate() {
            let log_num = self.model.log_transition(&gs.pred_state, &gs.prev_state, &gs.theta, xi)
                + self
                    .model
                    .log_observation(&gs.pseudo_obs, &gs.pred_state, &gs.theta, xi)?;
            let r = (log_num - self.base_gamma_log[l]).exp();
            let log_l = self.like[gs.m_index].log_mixture(self.model, &gs.pseudo_obs, xi)?;
            let log_z = self.evid.log_mixture(self.model, &gs.pseudo_obs, xi)?;
            acc.add(gs.weight * r * (log_l - log_z));
        }
        Ok(acc.value())
    }
}
