//! Command-line driver: configure, run, and aggregate sequential design
//! experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use badpods::config::ExperimentConfig;
use badpods::design::static_optimize;
use badpods::error::{Error, Result};
use badpods::experiments::{
    aggregate, read_run, run_sequential, write_run, AggregateReport, DesignPolicy, RunRecord,
};
use badpods::rng::RngStream;
use badpods::ssm::{validate_model, DesignVector};

/// Longest horizon accepted by the offline design optimizer; guards against
/// runaway memory from optimizing all horizons jointly.
const MAX_STATIC_HORIZON: usize = 512;

#[derive(Parser)]
#[command(name = "badpods", version, about = "Sequential Bayesian experimental design with nested particle filters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured policy for every seed, one record per seed.
    Run(RunArgs),
    /// Optimize an offline design sequence for the static policy.
    Static(StaticArgs),
    /// Aggregate run records into per-policy and pairwise summaries.
    Report(ReportArgs),
    /// Probe a model configuration with random draws and report problems.
    ValidateModel {
        #[arg(long)]
        config: PathBuf,
        /// Number of random probes.
        #[arg(long, default_value_t = 200)]
        probes: usize,
    },
    /// Run quick internal consistency checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seeds (comma-separated).
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads; outputs are identical for any job count.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured policy.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct StaticArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output file for the design sequence (default: <out_dir>/static-designs.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the offline optimization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON run records to aggregate.
    records: Vec<PathBuf>,
    /// Output directory for aggregate.json and aggregate.csv.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoints (comma-separated timesteps); defaults to the quarter
    /// points of the horizon.
    #[arg(long)]
    checkpoints: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Static(args) => cmd_static(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::ValidateModel { config, probes } => cmd_validate_model(&config, probes),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Serialize)]
struct FailureEntry {
    seed: u64,
    policy: String,
    steps_completed: usize,
    error: String,
}

fn build_policy(cfg: &ExperimentConfig) -> Result<DesignPolicy> {
    Ok(match cfg.policy.as_str() {
        "adaptive" => DesignPolicy::Adaptive,
        "random" => DesignPolicy::Random,
        "static" => {
            let path = cfg
                .static_designs
                .as_ref()
                .ok_or_else(|| Error::Config("static policy needs static_designs".to_string()))?;
            let text = std::fs::read_to_string(path)?;
            let designs: Vec<DesignVector> = serde_json::from_str(&text)
                .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
            DesignPolicy::Static { designs }
        }
        other => return Err(Error::Config(format!("unknown policy \"{other}\""))),
    })
}

fn parse_u64_list(text: &str, what: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("invalid {what} entry \"{s}\"")))
        })
        .collect()
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(policy) = args.policy {
        cfg.policy = policy;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = badpods::config::Seeds::List(parse_u64_list(seeds, "seed")?);
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    cfg.validate()?;

    let policy = build_policy(&cfg)?;
    let config_hash = cfg.config_hash()?;
    let budgets = cfg.budgets();
    let seeds = cfg.seeds.expand();
    let jobs = args.jobs.max(1).min(seeds.len().max(1));
    std::fs::create_dir_all(&cfg.out_dir)?;

    // Round-robin the seeds over the workers; per-seed RNG streams make the
    // outputs independent of the partitioning.
    let mut outcomes: Vec<(u64, std::result::Result<RunRecord, String>)> =
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for worker in 0..jobs {
                let seeds = &seeds;
                let cfg = &cfg;
                let policy = &policy;
                let budgets = &budgets;
                let config_hash = &config_hash;
                handles.push(scope.spawn(move || {
                    let mut results = Vec::new();
                    let model = match cfg.model.build() {
                        Ok(m) => m,
                        Err(e) => {
                            for &seed in seeds.iter().skip(worker).step_by(jobs) {
                                results.push((seed, Err(e.to_string())));
                            }
                            return results;
                        }
                    };
                    for &seed in seeds.iter().skip(worker).step_by(jobs) {
                        let outcome = run_sequential(
                            model.as_ref(),
                            policy,
                            cfg.horizon,
                            budgets,
                            seed,
                            config_hash,
                        )
                        .map_err(|f| f.to_string());
                        results.push((seed, outcome));
                    }
                    results
                }));
            }
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
    outcomes.sort_by_key(|(seed, _)| *seed);

    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(record) => {
                let name = format!("run-{}-seed{seed:04}.csv", record.policy);
                write_run(&record, &cfg.out_dir.join(name))?;
                println!("seed {seed}: ok");
            }
            Err(message) => {
                eprintln!("seed {seed}: FAILED: {message}");
                failures.push(FailureEntry {
                    seed,
                    policy: cfg.policy.clone(),
                    steps_completed: 0,
                    error: message,
                });
            }
        }
    }
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        let manifest = serde_json::to_string_pretty(&failures)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(cfg.out_dir.join("failures.json"), manifest)?;
        eprintln!("{} of {} seeds failed", failures.len(), seeds.len());
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_static(args: StaticArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let model = cfg.model.build()?;
    let stream = RngStream::root(args.seed).child("static");
    let designs = static_optimize(
        model.as_ref(),
        cfg.horizon,
        cfg.opt_iterations,
        cfg.n_params,
        cfg.n_states,
        cfg.batch,
        cfg.jitter_scale,
        cfg.adam,
        MAX_STATIC_HORIZON,
        &stream,
    )?;
    let out = args.out.unwrap_or_else(|| cfg.out_dir.join("static-designs.json"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(&designs)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&out, text)?;
    println!("wrote {} designs to {}", designs.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn default_checkpoints(horizon: usize) -> Vec<usize> {
    let mut cps: Vec<usize> = (1..=4).map(|q| q * horizon / 4).filter(|&t| t >= 1).collect();
    cps.dedup();
    if cps.is_empty() {
        cps.push(horizon.max(1));
    }
    cps
}

fn report_csv(report: &AggregateReport) -> String {
    let mut out = String::from(
        "kind,policy_a,policy_b,t,mean,lo,hi,pointing_q1,pointing_median,pointing_q3\n",
    );
    for p in &report.policies {
        for (ci, c) in p.teig.iter().enumerate() {
            let pointing = match &p.pointing[ci] {
                Some(q) => format!("{:?},{:?},{:?}", q.q1, q.median, q.q3),
                None => ",,".to_string(),
            };
            out.push_str(&format!(
                "teig,{},,{},{:?},{:?},{:?},{pointing}\n",
                p.policy, c.t, c.mean, c.lo, c.hi
            ));
        }
    }
    for d in &report.deltas {
        for c in &d.teig {
            let lo = c.per_seed.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = c.per_seed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!(
                "delta_teig,{},{},{},{:?},{:?},{:?},,,\n",
                d.policy_a, d.policy_b, c.t, c.mean, lo, hi
            ));
        }
    }
    out
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    if args.records.is_empty() {
        return Err(Error::invalid("no record files given"));
    }
    let mut records = Vec::new();
    for path in &args.records {
        let record = read_run(path)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        records.push((path, record));
    }
    let reference = &records[0].1.config_hash;
    let offending: Vec<String> = records
        .iter()
        .filter(|(_, r)| &r.config_hash != reference)
        .map(|(p, _)| p.display().to_string())
        .collect();
    if !offending.is_empty() {
        return Err(Error::invalid(format!(
            "records have incompatible configurations: {}",
            offending.join(", ")
        )));
    }

    let horizon = records[0].1.steps.len();
    let checkpoints = match &args.checkpoints {
        Some(text) => parse_u64_list(text, "checkpoint")?
            .into_iter()
            .map(|t| t as usize)
            .collect(),
        None => default_checkpoints(horizon),
    };
    let runs: Vec<RunRecord> = records.into_iter().map(|(_, r)| r).collect();
    let report = aggregate(&runs, &checkpoints, &RngStream::root(0).child("report"))?;

    std::fs::create_dir_all(&args.out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(args.out.join("aggregate.json"), json)?;
    std::fs::write(args.out.join("aggregate.csv"), report_csv(&report))?;
    println!(
        "aggregated {} records ({} policies) at checkpoints {:?}",
        runs.len(),
        report.policies.len(),
        report.checkpoints
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate_model(config: &Path, probes: usize) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(config)?;
    let model = cfg.model.build()?;
    let report = validate_model(model.as_ref(), probes, &RngStream::root(0).child("validate"));
    if report.is_clean() {
        println!("{}: {} probes, no issues", model.name(), report.probes);
        Ok(ExitCode::SUCCESS)
    } else {
        for issue in &report.issues {
            eprintln!("probe {}: {}", issue.probe, issue.message);
        }
        eprintln!("{} issues in {} probes", report.issues.len(), report.probes);
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_selftest() -> Result<ExitCode> {
    use badpods::eig::eig_hat;
    use badpods::models::{exact_eig, LinGaussConfig, LinGaussModel};
    use badpods::npf::{init_ensemble, JitterKernel};
    use badpods::ssm::{transform_design, Reparam};
    use badpods::stats::bootstrap_bca_ci;

    let mut failed = 0usize;
    let mut check = |name: &str, outcome: std::result::Result<(), String>| match outcome {
        Ok(()) => println!("ok   {name}"),
        Err(msg) => {
            println!("FAIL {name}: {msg}");
            failed += 1;
        }
    };

    check("eig estimator tracks the closed-form value", {
        (|| {
            let lg = LinGaussConfig::default();
            let model = LinGaussModel::new(lg.clone()).map_err(|e| e.to_string())?;
            let stream = RngStream::root(17).child("selftest-eig");
            let ens = init_ensemble(&model, 100, 100, &stream.child("ens"))
                .map_err(|e| e.to_string())?;
            let kernel = JitterKernel::new(0.0, 100, badpods::ssm::ParamSupport::unbounded(1))
                .map_err(|e| e.to_string())?;
            let xi = transform_design(&[1.0], Reparam::Unconstrained { dim: 1 })
                .map_err(|e| e.to_string())?;
            let est = eig_hat(&ens, &xi, &model, &kernel, 2000, &stream.child("est"))
                .map_err(|e| e.to_string())?;
            // One-step predictive state variance: a^2 x0_var + q.
            let exact = exact_eig(lg.theta_var, lg.a * lg.a * lg.x0_var + lg.q, 1.0, lg.r);
            let rel = (est - exact).abs() / exact;
            if rel <= 0.15 {
                Ok(())
            } else {
                Err(format!("relative error {rel:.3} (estimate {est:.4}, exact {exact:.4})"))
            }
        })()
    });

    check("runs are deterministic", {
        (|| {
            let cfg = selftest_config();
            let model = cfg.model.build().map_err(|e| e.to_string())?;
            let hash = cfg.config_hash().map_err(|e| e.to_string())?;
            let run = |_: usize| {
                run_sequential(
                    model.as_ref(),
                    &DesignPolicy::Adaptive,
                    3,
                    &cfg.budgets(),
                    5,
                    &hash,
                )
                .map_err(|f| f.to_string())
            };
            let a = run(0)?;
            let b = run(1)?;
            let same = a.trajectory_hash == b.trajectory_hash
                && a.steps.iter().zip(&b.steps).all(|(x, y)| {
                    x.design == y.design && x.eig_value == y.eig_value && x.teig == y.teig
                });
            if same { Ok(()) } else { Err("reruns differ".to_string()) }
        })()
    });

    check("posterior weights stay normalized over a run", {
        (|| {
            let cfg = selftest_config();
            let model = cfg.model.build().map_err(|e| e.to_string())?;
            let hash = cfg.config_hash().map_err(|e| e.to_string())?;
            run_sequential(model.as_ref(), &DesignPolicy::Random, 10, &cfg.budgets(), 3, &hash)
                .map(|_| ())
                .map_err(|f| f.to_string())
        })()
    });

    check("bootstrap interval brackets the mean", {
        (|| {
            let samples: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let (lo, hi) =
                bootstrap_bca_ci(&samples, 0.95, 500, &mut RngStream::root(3).rng())
                    .map_err(|e| e.to_string())?;
            if lo <= mean && mean <= hi {
                Ok(())
            } else {
                Err(format!("({lo}, {hi}) does not bracket {mean}"))
            }
        })()
    });

    if failed == 0 {
        println!("selftest: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("selftest: {failed} checks failed");
        Ok(ExitCode::FAILURE)
    }
}

fn selftest_config() -> ExperimentConfig {
    ExperimentConfig {
        model: badpods::config::ModelConfig::Sir(Default::default()),
        policy: "adaptive".to_string(),
        horizon: 10,
        n_params: 16,
        n_states: 16,
        batch: 64,
        opt_iterations: 5,
        eval_batch: 64,
        jitter_scale: 2.0,
        adam: Default::default(),
        scheme: Default::default(),
        seeds: badpods::config::Seeds::List(vec![0]),
        static_designs: None,
        out_dir: PathBuf::from("out"),
    }
}
