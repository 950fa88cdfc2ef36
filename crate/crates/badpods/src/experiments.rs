//! Sequential experiment harness: run a design policy against a simulated
//! ground truth, record per-step metrics, and aggregate across seeds.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{optimize_design, random_design, AdamConfig, EigObjective};
use crate::eig::eig_hat;
use crate::error::{Error, Result};
use crate::npf::{
    init_ensemble, npf_step, posterior_summary, JitterKernel, ResampleScheme,
};
use crate::rng::RngStream;
use crate::ssm::{DesignVector, ModelSpec, StateVector};
use crate::stats::{bootstrap_bca_ci, percentile, DEFAULT_BOOTSTRAP_RESAMPLES};

/// How the design for each timestep is chosen.
#[derive(Debug, Clone)]
pub enum DesignPolicy {
    /// Stochastic-gradient maximization of the estimated EIG at every step.
    Adaptive,
    /// A fresh uniform draw from the constraint set at every step.
    Random,
    /// A precomputed, offline-optimized design sequence.
    Static { designs: Vec<DesignVector> },
}

impl DesignPolicy {
    pub fn tag(&self) -> &'static str {
        match self {
            DesignPolicy::Adaptive => "adaptive",
            DesignPolicy::Random => "random",
            DesignPolicy::Static { .. } => "static",
        }
    }
}

/// Sampling and optimization budgets shared by every policy in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Parameter particles (outer layer).
    pub n_params: usize,
    /// State particles per parameter (inner layer).
    pub n_states: usize,
    /// Pseudo-observation batch per optimizer gradient evaluation.
    pub batch: usize,
    /// Optimizer iterations per timestep.
    pub opt_iterations: usize,
    /// Pseudo-observation batch for the fixed-budget EIG evaluation that
    /// enters the record; identical across policies by construction.
    pub eval_batch: usize,
    /// Jitter kernel constant.
    pub jitter_scale: f64,
    pub adam: AdamConfig,
    pub scheme: ResampleScheme,
}

/// One timestep of a sequential run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Chosen design in value space.
    pub design: Vec<f64>,
    /// The same design in latent space.
    pub latent: Vec<f64>,
    pub observation: Vec<f64>,
    /// EIG of the chosen design under the fixed evaluation budget.
    pub eig_value: f64,
    /// Cumulative EIG through this step.
    pub teig: f64,
    pub post_mean: Vec<f64>,
    /// Diagonal of the posterior parameter covariance.
    pub post_var: Vec<f64>,
    /// Per-sensor pointing errors in degrees, for models that define them.
    pub pointing_errors: Option<Vec<f64>>,
    /// Seconds spent on this step (excluded from the CSV so reruns are
    /// byte-identical).
    pub wall_time: f64,
}

/// A complete sequential run under one seed and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub policy: String,
    pub model: String,
    /// Hash of the shared experiment configuration; aggregation refuses to
    /// mix records with different hashes.
    pub config_hash: String,
    /// Hash of the ground-truth state path; matched seeds across policies
    /// must agree.
    pub trajectory_hash: String,
    pub true_params: Vec<f64>,
    pub budgets: Budgets,
    pub horizon: usize,
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    /// Cumulative EIG after the first `t` steps (`t = 0` gives 0).
    pub fn teig_at(&self, t: usize) -> Result<f64> {
        if t > self.steps.len() {
            return Err(Error::invalid(format!(
                "checkpoint {t} beyond horizon {}",
                self.steps.len()
            )));
        }
        Ok(if t == 0 { 0.0 } else { self.steps[t - 1].teig })
    }
}

/// A failed run carrying everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: RunRecord,
    pub source: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "seed {} ({}) failed after {} steps: {}",
            self.partial.seed,
            self.partial.policy,
            self.partial.steps.len(),
            self.source
        )
    }
}

fn hash_state(hasher: &mut Sha256, state: &StateVector) {
    for v in &state.0 {
        hasher.update(v.to_le_bits());
    }
}

trait ToLeBits {
    fn to_le_bits(&self) -> [u8; 8];
}

impl ToLeBits for f64 {
    fn to_le_bits(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

/// Run one policy for `horizon` steps against a simulated ground truth.
///
/// The ground-truth state path is drawn from a stream that depends only on
/// the seed, so policies compared under the same seed face the same
/// trajectory; observations depend on the chosen designs. Per-step EIG is
/// re-evaluated once at the fixed `eval_batch` budget with a fresh stream,
/// so the recorded values are comparable across policies.
pub fn run_sequential(
    model: &dyn ModelSpec,
    policy: &DesignPolicy,
    horizon: usize,
    budgets: &Budgets,
    seed: u64,
    config_hash: &str,
) -> std::result::Result<RunRecord, Box<RunFailure>> {
    let root = RngStream::root(seed);
    let theta_star = model
        .true_params()
        .unwrap_or_else(|| model.sample_param_prior(&mut root.child("truth").rng()));

    let mut record = RunRecord {
        seed,
        policy: policy.tag().to_string(),
        model: model.name().to_string(),
        config_hash: config_hash.to_string(),
        trajectory_hash: String::new(),
        true_params: theta_star.0.clone(),
        budgets: budgets.clone(),
        horizon,
        steps: Vec::with_capacity(horizon),
    };
    let fail = |record: RunRecord, source: Error| {
        Box::new(RunFailure { partial: record, source })
    };

    if let DesignPolicy::Static { designs } = policy {
        if designs.len() < horizon {
            return Err(fail(
                record,
                Error::invalid(format!(
                    "static design sequence has {} entries for horizon {horizon}",
                    designs.len()
                )),
            ));
        }
    }

    let mut traj_rng = root.child("trajectory").rng();
    let mut traj_hash = Sha256::new();
    let mut state = model.sample_state_prior(&mut traj_rng);
    hash_state(&mut traj_hash, &state);

    let mut ens = match init_ensemble(model, budgets.n_params, budgets.n_states, &root.child("filter-init")) {
        Ok(e) => e,
        Err(e) => return Err(fail(record, e)),
    };
    let kernel = match JitterKernel::new(budgets.jitter_scale, budgets.n_params, model.param_support())
    {
        Ok(k) => k,
        Err(e) => return Err(fail(record, e)),
    };

    let mut teig = 0.0;
    for t in 0..horizon {
        let started = Instant::now();
        let opt_stream = root.child("opt").child_idx(t as u64);
        let xi = match policy {
            DesignPolicy::Adaptive => {
                let mut objective = EigObjective {
                    ens: &ens,
                    model,
                    kernel: &kernel,
                    batch: budgets.batch,
                    stream: opt_stream.child("eig"),
                };
                match optimize_design(
                    &mut objective,
                    model.reparam(),
                    budgets.opt_iterations,
                    budgets.adam,
                    &opt_stream,
                ) {
                    Ok((xi, _trace)) => xi,
                    Err(e) => return Err(fail(record, e)),
                }
            }
            DesignPolicy::Random => random_design(model.reparam(), &mut opt_stream.rng()),
            DesignPolicy::Static { designs } => designs[t].clone(),
        };

        // Common-yardstick EIG evaluation at the fixed budget.
        let eig_value = match eig_hat(
            &ens,
            &xi,
            model,
            &kernel,
            budgets.eval_batch,
            &root.child("eval").child_idx(t as u64),
        ) {
            Ok(v) => v,
            Err(e) => return Err(fail(record, e)),
        };

        // Advance the ground truth and collect the real observation.
        state = model.sample_transition(&state, &theta_star, &xi, &mut traj_rng);
        hash_state(&mut traj_hash, &state);
        let y = model.sample_observation(
            &state,
            &theta_star,
            &xi,
            &mut root.child("obs").child_idx(t as u64).rng(),
        );

        if let Err(e) = npf_step(
            &mut ens,
            &y,
            &xi,
            model,
            &kernel,
            budgets.scheme,
            &root.child("filter"),
        ) {
            return Err(fail(record, e));
        }

        teig += eig_value;
        let summary = posterior_summary(&ens);
        let post_var: Vec<f64> = (0..summary.param_mean.len())
            .map(|i| summary.param_cov[i][i])
            .collect();
        record.steps.push(StepRecord {
            t,
            design: xi.values.clone(),
            latent: xi.latent.clone(),
            observation: y.0.clone(),
            eig_value,
            teig,
            post_mean: summary.param_mean,
            post_var,
            pointing_errors: model.pointing_errors(&xi, &state),
            wall_time: started.elapsed().as_secs_f64(),
        });
    }

    record.trajectory_hash = hex(&traj_hash.finalize());
    Ok(record)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cumulative-EIG difference between two runs at checkpoint `t`.
pub fn delta_teig(run_a: &RunRecord, run_b: &RunRecord, t: usize) -> Result<f64> {
    if run_a.steps.len() != run_b.steps.len() {
        return Err(Error::invalid(format!(
            "horizons differ: {} vs {}",
            run_a.steps.len(),
            run_b.steps.len()
        )));
    }
    if run_a.config_hash != run_b.config_hash {
        return Err(Error::invalid("cannot compare runs with different configurations"));
    }
    Ok(run_a.teig_at(t)? - run_b.teig_at(t)?)
}

/// Quartiles of a pooled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointCi {
    pub t: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub n_seeds: usize,
    pub teig: Vec<CheckpointCi>,
    /// Pointing-error quartiles pooled over seeds and sensors, per
    /// checkpoint; `None` for models without the metric.
    pub pointing: Vec<Option<Quartiles>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDelta {
    pub t: usize,
    /// One entry per matched seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub policy_a: String,
    pub policy_b: String,
    pub teig: Vec<CheckpointDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config_hash: String,
    pub checkpoints: Vec<usize>,
    pub policies: Vec<PolicySummary>,
    /// Matched-seed differences for every ordered policy pair (a − b with
    /// a before b in `policies`).
    pub deltas: Vec<DeltaSummary>,
}

/// Summarize runs by policy at the requested checkpoints.
///
/// All records must share a configuration hash (the fairness guarantee that
/// recorded EIG values used the same evaluation budget), and matched-seed
/// differences additionally require identical ground-truth trajectories.
pub fn aggregate(
    records: &[RunRecord],
    checkpoints: &[usize],
    stream: &RngStream,
) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::invalid("no run records to aggregate"));
    }
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints requested"));
    }
    let config_hash = records[0].config_hash.clone();
    let horizon = records[0].steps.len();
    for r in records {
        if r.config_hash != config_hash {
            return Err(Error::invalid(format!(
                "seed {} ({}) has a different configuration hash",
                r.seed, r.policy
            )));
        }
        if r.steps.len() != horizon {
            return Err(Error::invalid(format!(
                "seed {} ({}) has horizon {} instead of {horizon}",
                r.seed,
                r.policy,
                r.steps.len()
            )));
        }
    }
    for &t in checkpoints {
        if t == 0 || t > horizon {
            return Err(Error::invalid(format!(
                "checkpoint {t} outside the horizon 1..={horizon}"
            )));
        }
    }

    let mut by_policy: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_policy.entry(r.policy.clone()).or_default().push(r);
    }

    let mut policies = Vec::new();
    for (policy, runs) in &by_policy {
        let mut teig = Vec::new();
        let mut pointing = Vec::new();
        for (ci, &t) in checkpoints.iter().enumerate() {
            let samples: Vec<f64> = runs
                .iter()
                .map(|r| r.teig_at(t))
                .collect::<Result<_>>()?;
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let (lo, hi) = if samples.len() < 2 {
                (mean, mean)
            } else {
                bootstrap_bca_ci(
                    &samples,
                    0.95,
                    DEFAULT_BOOTSTRAP_RESAMPLES,
                    &mut stream
                        .child("bca")
                        .child(policy)
                        .child_idx(ci as u64)
                        .rng(),
                )?
            };
            teig.push(CheckpointCi { t, mean, lo, hi });

            let pooled: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.steps[t - 1].pointing_errors.as_ref())
                .flatten()
                .copied()
                .collect();
            pointing.push(if pooled.is_empty() {
                None
            } else {
                Some(Quartiles {
                    q1: percentile(&pooled, 0.25)?,
                    median: percentile(&pooled, 0.5)?,
                    q3: percentile(&pooled, 0.75)?,
                })
            });
        }
        policies.push(PolicySummary {
            policy: policy.clone(),
            n_seeds: runs.len(),
            teig,
            pointing,
        });
    }

    let names: Vec<&String> = by_policy.keys().collect();
    let mut deltas = Vec::new();
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            let runs_a = &by_policy[names[i]];
            let runs_b = &by_policy[names[j]];
            let mut seeds_a: BTreeMap<u64, &RunRecord> = BTreeMap::new();
            for r in runs_a {
                seeds_a.insert(r.seed, r);
            }
            let mut teig = Vec::new();
            for &t in checkpoints {
                let mut per_seed = Vec::new();
                for b in runs_b {
                    let Some(a) = seeds_a.get(&b.seed) else {
                        return Err(Error::invalid(format!(
                            "seed {} present for {} but not {}",
                            b.seed, names[j], names[i]
                        )));
                    };
                    if a.trajectory_hash != b.trajectory_hash {
                        return Err(Error::invalid(format!(
                            "seed {} trajectories differ between {} and {}",
                            b.seed, names[i], names[j]
                        )));
                    }
                    per_seed.push(delta_teig(a, b, t)?);
                }
                let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
                teig.push(CheckpointDelta { t, per_seed, mean });
            }
            deltas.push(DeltaSummary {
                policy_a: names[i].clone(),
                policy_b: names[j].clone(),
                teig,
            });
        }
    }

    Ok(AggregateReport {
        config_hash,
        checkpoints: checkpoints.to_vec(),
        policies,
        deltas,
    })
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// CSV body of a run: one row per timestep, stable column order, no wall
/// times (so reruns are byte-identical). Vector-valued columns are
/// semicolon-joined.
pub fn run_csv_string(record: &RunRecord) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "t",
        "design",
        "latent",
        "observation",
        "eig_value",
        "teig",
        "post_mean",
        "post_var",
        "pointing_errors",
    ])
    .map_err(|e| Error::Serialization(e.to_string()))?;
    for s in &record.steps {
        wtr.write_record([
            s.t.to_string(),
            join_floats(&s.design),
            join_floats(&s.latent),
            join_floats(&s.observation),
            format!("{:?}", s.eig_value),
            format!("{:?}", s.teig),
            join_floats(&s.post_mean),
            join_floats(&s.post_var),
            s.pointing_errors.as_deref().map(join_floats).unwrap_or_default(),
        ])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

/// Write the CSV and a JSON sidecar holding the full record (including wall
/// times) next to it.
pub fn write_run(record: &RunRecord, csv_path: &Path) -> Result<()> {
    let csv = run_csv_string(record)?;
    std::fs::write(csv_path, csv)?;
    let json_path = csv_path.with_extension("json");
    let mut f = std::fs::File::create(&json_path)?;
    serde_json::to_writer_pretty(&mut f, record).map_err(|e| Error::Serialization(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Read a run back from its JSON sidecar.
pub fn read_run(json_path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(json_path)?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinGaussModel;
    use crate::ssm::{
        BankParticle, ObsBank, Observation, ParamSupport, ParamVector, Reparam, StateVector,
    };
    use rand::RngCore;
    use rand_distr::{Distribution, StandardNormal};

    fn small_budgets() -> Budgets {
        Budgets {
            n_params: 8,
            n_states: 8,
            batch: 16,
            opt_iterations: 3,
            eval_batch: 16,
            jitter_scale: 0.05,
            adam: AdamConfig::default(),
            scheme: ResampleScheme::Systematic,
        }
    }

    /// A model whose observations ignore the design entirely: y = θ + x + ε.
    struct XiFreeModel;

    struct XiFreeBank {
        log_w: Vec<f64>,
        signal: Vec<f64>,
    }

    impl ObsBank for XiFreeBank {
        fn log_mixture(&self, prepared_y: &[f64]) -> f64 {
            let y = prepared_y[0];
            let terms: Vec<f64> = self
                .signal
                .iter()
                .zip(&self.log_w)
                .map(|(s, lw)| lw - 0.5 * (y - s).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln())
                .collect();
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        }

        fn log_mixture_grad(&self, prepared_y: &[f64], grad: &mut [f64]) -> f64 {
            grad.fill(0.0);
            self.log_mixture(prepared_y)
        }

        fn len(&self) -> usize {
            self.signal.len()
        }
    }

    impl ModelSpec for XiFreeModel {
        fn name(&self) -> &'static str {
            "xi-free"
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
            ParamVector(vec![StandardNormal.sample(rng)])
        }
        fn sample_state_prior(&self, rng: &mut dyn RngCore) -> StateVector {
            StateVector(vec![StandardNormal.sample(rng)])
        }
        fn sample_transition(
            &self,
            prev: &StateVector,
            _theta: &ParamVector,
            _xi: &DesignVector,
            rng: &mut dyn RngCore,
        ) -> StateVector {
            let z: f64 = StandardNormal.sample(rng);
            StateVector(vec![0.9 * prev.0[0] + 0.5 * z])
        }
        fn log_transition(
            &self,
            next: &StateVector,
            prev: &StateVector,
            _theta: &ParamVector,
            _xi: &DesignVector,
        ) -> f64 {
            let d = next.0[0] - 0.9 * prev.0[0];
            -0.5 * (d / 0.5).powi(2)
        }
        fn sample_observation(
            &self,
            state: &StateVector,
            theta: &ParamVector,
            _xi: &DesignVector,
            rng: &mut dyn RngCore,
        ) -> Observation {
            let z: f64 = StandardNormal.sample(rng);
            Observation(vec![theta.0[0] + state.0[0] + z])
        }
        fn log_observation(
            &self,
            y: &Observation,
            state: &StateVector,
            theta: &ParamVector,
            _xi: &DesignVector,
        ) -> crate::error::Result<f64> {
            let d = y.0[0] - theta.0[0] - state.0[0];
            Ok(-0.5 * d * d - 0.5 * (2.0 * std::f64::consts::PI).ln())
        }
        fn grad_xi_log_observation(
            &self,
            _y: &Observation,
            _state: &StateVector,
            _theta: &ParamVector,
            _xi: &DesignVector,
        ) -> crate::error::Result<Vec<f64>> {
            Ok(vec![0.0])
        }
        fn prepare_y(&self, y: &Observation) -> crate::error::Result<Vec<f64>> {
            Ok(vec![y.0[0]])
        }
        fn make_obs_bank(
            &self,
            particles: &[BankParticle<'_>],
            _xi: &DesignVector,
        ) -> Box<dyn ObsBank> {
            Box::new(XiFreeBank {
                log_w: particles.iter().map(|p| p.log_weight).collect(),
                signal: particles
                    .iter()
                    .map(|p| p.theta.0[0] + p.state.0[0])
                    .collect(),
            })
        }
    }

    fn strip_wall(mut r: RunRecord) -> RunRecord {
        for s in &mut r.steps {
            s.wall_time = 0.0;
        }
        r
    }

    fn synthetic_record(
        seed: u64,
        policy: &str,
        per_step: &[f64],
        config_hash: &str,
        trajectory_hash: &str,
    ) -> RunRecord {
        let mut teig = 0.0;
        let steps = per_step
            .iter()
            .enumerate()
            .map(|(t, &v)| {
                teig += v;
                StepRecord {
                    t,
                    design: vec![0.5],
                    latent: vec![0.0],
                    observation: vec![0.0],
                    eig_value: v,
                    teig,
                    post_mean: vec![0.0],
                    post_var: vec![1.0],
                    pointing_errors: None,
                    wall_time: 0.0,
                }
            })
            .collect();
        RunRecord {
            seed,
            policy: policy.to_string(),
            model: "synthetic".to_string(),
            config_hash: config_hash.to_string(),
            trajectory_hash: trajectory_hash.to_string(),
            true_params: vec![0.0],
            budgets: small_budgets(),
            horizon: per_step.len(),
            steps,
        }
    }

    #[test]
    fn zero_horizon_yields_an_empty_record() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let rec =
            run_sequential(&model, &DesignPolicy::Random, 0, &small_budgets(), 1, "cfg").unwrap();
        assert!(rec.steps.is_empty());
        assert_eq!(rec.teig_at(0).unwrap(), 0.0);
    }

    #[test]
    fn identical_seeds_give_bit_identical_records() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let a = run_sequential(&model, &DesignPolicy::Adaptive, 4, &small_budgets(), 7, "cfg")
            .unwrap();
        let b = run_sequential(&model, &DesignPolicy::Adaptive, 4, &small_budgets(), 7, "cfg")
            .unwrap();
        assert_eq!(strip_wall(a), strip_wall(b));
    }

    #[test]
    fn design_irrelevant_model_gives_identical_teig_across_policies() {
        let model = XiFreeModel;
        let a = run_sequential(&model, &DesignPolicy::Adaptive, 3, &small_budgets(), 3, "cfg")
            .unwrap();
        let b = run_sequential(&model, &DesignPolicy::Random, 3, &small_budgets(), 3, "cfg")
            .unwrap();
        assert_eq!(a.trajectory_hash, b.trajectory_hash);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.eig_value, sb.eig_value);
        }
        assert_eq!(a.steps.last().unwrap().teig, b.steps.last().unwrap().teig);
    }

    #[test]
    fn matched_seeds_share_the_ground_truth_trajectory() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let a = run_sequential(&model, &DesignPolicy::Adaptive, 5, &small_budgets(), 11, "cfg")
            .unwrap();
        let b = run_sequential(&model, &DesignPolicy::Random, 5, &small_budgets(), 11, "cfg")
            .unwrap();
        assert_eq!(a.trajectory_hash, b.trajectory_hash);
        let c = run_sequential(&model, &DesignPolicy::Random, 5, &small_budgets(), 12, "cfg")
            .unwrap();
        assert_ne!(a.trajectory_hash, c.trajectory_hash);
    }

    #[test]
    fn teig_is_additive_over_steps() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let rec = run_sequential(&model, &DesignPolicy::Random, 8, &small_budgets(), 5, "cfg")
            .unwrap();
        let mut acc = 0.0;
        for s in &rec.steps {
            acc += s.eig_value;
            assert!((s.teig - acc).abs() <= 1e-12, "t={}: {} vs {acc}", s.t, s.teig);
        }
    }

    #[test]
    fn static_policy_needs_enough_designs() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let err = run_sequential(
            &model,
            &DesignPolicy::Static { designs: vec![] },
            3,
            &small_budgets(),
            1,
            "cfg",
        )
        .unwrap_err();
        assert!(err.to_string().contains("static design sequence"));
    }

    #[test]
    fn delta_against_itself_is_zero() {
        let r = synthetic_record(1, "adaptive", &[0.2, 0.3, 0.1], "cfg", "traj");
        for t in 0..=3 {
            assert_eq!(delta_teig(&r, &r, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn delta_matches_hand_arithmetic() {
        let a = synthetic_record(1, "adaptive", &[0.1; 10], "cfg", "traj");
        let b = synthetic_record(1, "random", &[0.05; 10], "cfg", "traj");
        let d = delta_teig(&a, &b, 10).unwrap();
        assert!((d - 0.5).abs() < 1e-12, "{d}");
    }

    #[test]
    fn delta_rejects_mismatched_configs() {
        let a = synthetic_record(1, "adaptive", &[0.1; 5], "cfg-a", "traj");
        let b = synthetic_record(1, "random", &[0.1; 5], "cfg-b", "traj");
        assert!(delta_teig(&a, &b, 5).is_err());
        let c = synthetic_record(1, "random", &[0.1; 4], "cfg-a", "traj");
        assert!(delta_teig(&a, &c, 4).is_err());
    }

    #[test]
    fn aggregate_produces_per_policy_and_pairwise_summaries() {
        let mut records = Vec::new();
        for seed in 0..3u64 {
            let traj = format!("traj-{seed}");
            records.push(synthetic_record(seed, "adaptive", &[0.2; 10], "cfg", &traj));
            records.push(synthetic_record(seed, "random", &[0.1; 10], "cfg", &traj));
        }
        let stream = RngStream::root(0).child("report");
        let rep = aggregate(&records, &[5, 10], &stream).unwrap();
        assert_eq!(rep.policies.len(), 2);
        assert_eq!(rep.deltas.len(), 1);
        let d = &rep.deltas[0];
        assert_eq!(d.policy_a, "adaptive");
        assert_eq!(d.policy_b, "random");
        assert_eq!(d.teig[1].per_seed.len(), 3);
        assert!((d.teig[1].mean - 1.0).abs() < 1e-12);
        for p in &rep.policies {
            for c in &p.teig {
                assert!(c.lo <= c.mean + 1e-12 && c.mean <= c.hi + 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_with_one_seed_degenerates_the_interval() {
        let records = vec![synthetic_record(1, "adaptive", &[0.2; 4], "cfg", "traj")];
        let stream = RngStream::root(0).child("report");
        let rep = aggregate(&records, &[4], &stream).unwrap();
        let c = &rep.policies[0].teig[0];
        assert_eq!((c.lo, c.hi), (c.mean, c.mean));
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        let stream = RngStream::root(0).child("report");
        assert!(aggregate(&[], &[1], &stream).is_err());
        let a = synthetic_record(1, "adaptive", &[0.2; 4], "cfg", "traj");
        assert!(aggregate(std::slice::from_ref(&a), &[5], &stream).is_err());
        let b = synthetic_record(1, "random", &[0.2; 4], "other", "traj");
        assert!(aggregate(&[a.clone(), b], &[4], &stream).is_err());
        let c = synthetic_record(1, "random", &[0.2; 4], "cfg", "other-traj");
        assert!(aggregate(&[a, c], &[4], &stream).is_err());
    }

    #[test]
    fn csv_header_is_stable_and_reruns_are_byte_identical() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let a = run_sequential(&model, &DesignPolicy::Random, 3, &small_budgets(), 2, "cfg")
            .unwrap();
        let b = run_sequential(&model, &DesignPolicy::Random, 3, &small_budgets(), 2, "cfg")
            .unwrap();
        let csv_a = run_csv_string(&a).unwrap();
        let csv_b = run_csv_string(&b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(csv_a.starts_with(
            "t,design,latent,observation,eig_value,teig,post_mean,post_var,pointing_errors\n"
        ));
        assert_eq!(csv_a.lines().count(), 4);
    }

    #[test]
    fn run_round_trips_through_the_json_sidecar() {
        let model = LinGaussModel::new(Default::default()).unwrap();
        let rec = run_sequential(&model, &DesignPolicy::Random, 3, &small_budgets(), 2, "cfg")
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("run.csv");
        write_run(&rec, &csv_path).unwrap();
        let back = read_run(&dir.path().join("run.json")).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn pointing_errors_are_recorded_for_the_source_model() {
        let model = crate::models::SourceModel::new(Default::default()).unwrap();
        let rec = run_sequential(&model, &DesignPolicy::Random, 2, &small_budgets(), 4, "cfg")
            .unwrap();
        for s in &rec.steps {
            let errs = s.pointing_errors.as_ref().expect("pointing errors recorded");
            assert_eq!(errs.len(), 2);
            for e in errs {
                assert!((0.0..=180.0).contains(e), "{e}");
            }
        }
    }
}
