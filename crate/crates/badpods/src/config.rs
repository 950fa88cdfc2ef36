//! Experiment configuration: TOML schema, validation, and the configuration
//! hash that guards cross-policy comparisons.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::AdamConfig;
use crate::error::{Error, Result};
use crate::experiments::Budgets;
use crate::models::{LinGaussConfig, LinGaussModel, SirConfig, SirModel, SourceConfig, SourceModel};
use crate::npf::ResampleScheme;
use crate::ssm::ModelSpec;

/// Model selector plus its full parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ModelConfig {
    LinGauss(LinGaussConfig),
    Sir(SirConfig),
    Source(SourceConfig),
}

impl ModelConfig {
    pub fn build(&self) -> Result<Box<dyn ModelSpec>> {
        Ok(match self {
            ModelConfig::LinGauss(c) => Box::new(LinGaussModel::new(c.clone())?),
            ModelConfig::Sir(c) => Box::new(SirModel::new(c.clone())?),
            ModelConfig::Source(c) => Box::new(SourceModel::new(c.clone())?),
        })
    }
}

/// Seeds as an explicit list or a contiguous range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl Seeds {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { start, count } => (*start..start + count).collect(),
        }
    }
}

/// The full experiment configuration as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// "adaptive", "random", or "static".
    pub policy: String,
    pub horizon: usize,
    /// Parameter particles (outer layer).
    pub n_params: usize,
    /// State particles per parameter (inner layer).
    pub n_states: usize,
    /// Pseudo-observation batch per optimizer gradient evaluation.
    pub batch: usize,
    /// Optimizer iterations per timestep.
    pub opt_iterations: usize,
    /// Pseudo-observation batch for the recorded EIG evaluation.
    pub eval_batch: usize,
    /// Jitter kernel constant.
    pub jitter_scale: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub scheme: ResampleScheme,
    pub seeds: Seeds,
    /// File holding an offline-optimized design sequence; required by the
    /// static policy.
    #[serde(default)]
    pub static_designs: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 6] = [
            ("horizon", self.horizon),
            ("n_params", self.n_params),
            ("n_states", self.n_states),
            ("batch", self.batch),
            ("opt_iterations", self.opt_iterations),
            ("eval_batch", self.eval_batch),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{field} must be at least 1")));
            }
        }
        if self.batch > self.n_params * self.n_states {
            return Err(Error::Config(
                "batch cannot exceed n_params * n_states".to_string(),
            ));
        }
        if self.eval_batch > self.n_params * self.n_states {
            return Err(Error::Config(
                "eval_batch cannot exceed n_params * n_states".to_string(),
            ));
        }
        if !self.jitter_scale.is_finite() || self.jitter_scale < 0.0 {
            return Err(Error::Config("jitter_scale must be nonnegative".to_string()));
        }
        if self.seeds.expand().is_empty() {
            return Err(Error::Config("seeds must be non-empty".to_string()));
        }
        match self.policy.as_str() {
            "adaptive" | "random" => {}
            "static" => {
                if self.static_designs.is_none() {
                    return Err(Error::Config(
                        "static_designs is required when policy = \"static\"".to_string(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "policy must be adaptive, random, or static (got \"{other}\")"
                )));
            }
        }
        // Delegate model-block validation by attempting construction.
        self.model.build()?;
        Ok(())
    }

    pub fn budgets(&self) -> Budgets {
        Budgets {
            n_params: self.n_params,
            n_states: self.n_states,
            batch: self.batch,
            opt_iterations: self.opt_iterations,
            eval_batch: self.eval_batch,
            jitter_scale: self.jitter_scale,
            adam: self.adam,
            scheme: self.scheme,
        }
    }

    /// Hash over everything that must match for runs to be comparable:
    /// model, horizon, and budgets. The policy, seeds, and output paths are
    /// deliberately excluded so records from different policies share a hash.
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct HashInput<'a> {
            model: &'a ModelConfig,
            horizon: usize,
            budgets: Budgets,
        }
        let input = HashInput {
            model: &self.model,
            horizon: self.horizon,
            budgets: self.budgets(),
        };
        let canonical =
            serde_json::to_string(&input).map_err(|e| Error::Serialization(e.to_string()))?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig::Sir(SirConfig::default()),
            policy: "adaptive".to_string(),
            horizon: 50,
            n_params: 50,
            n_states: 50,
            batch: 2500,
            opt_iterations: 100,
            eval_batch: 2500,
            jitter_scale: 2.0,
            adam: AdamConfig::default(),
            scheme: ResampleScheme::Systematic,
            seeds: Seeds::Range { start: 0, count: 10 },
            static_designs: None,
            out_dir: PathBuf::from("out"),
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = sample_config();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn zero_budget_is_rejected_naming_the_field() {
        let mut cfg = sample_config();
        cfg.n_params = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("n_params"), "{err}");
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut cfg = sample_config();
        cfg.batch = cfg.n_params * cfg.n_states + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let mut cfg = sample_config();
        cfg.seeds = Seeds::List(vec![]);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("seeds"), "{err}");
    }

    #[test]
    fn unknown_policy_is_rejected() {
        let mut cfg = sample_config();
        cfg.policy = "greedy".to_string();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("policy"), "{err}");
    }

    #[test]
    fn static_policy_requires_a_design_file() {
        let mut cfg = sample_config();
        cfg.policy = "static".to_string();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("static_designs"), "{err}");
    }

    #[test]
    fn seed_range_expands_inclusively_from_start() {
        let seeds = Seeds::Range { start: 3, count: 4 };
        assert_eq!(seeds.expand(), vec![3, 4, 5, 6]);
    }

    #[test]
    fn hash_ignores_policy_and_seeds_but_not_budgets() {
        let base = sample_config();
        let h = base.config_hash().unwrap();

        let mut other_policy = base.clone();
        other_policy.policy = "random".to_string();
        other_policy.seeds = Seeds::List(vec![99]);
        assert_eq!(h, other_policy.config_hash().unwrap());

        let mut other_budget = base.clone();
        other_budget.eval_batch = 100;
        assert_ne!(h, other_budget.config_hash().unwrap());

        let mut other_model = base;
        other_model.model = ModelConfig::Source(SourceConfig::default());
        assert_ne!(h, other_model.config_hash().unwrap());
    }

    #[test]
    fn model_block_errors_surface_through_validation() {
        let mut cfg = sample_config();
        let mut sir = SirConfig::default();
        sir.dtau = -1.0;
        cfg.model = ModelConfig::Sir(sir);
        assert!(cfg.validate().is_err());
    }
}
