//! Experiment configuration: one TOML document with a section per module.
//!
//! Every key may be written either in a `[section]` table or as a flat dotted
//! key (`trainer.epochs = 700`); both parse to the same value. Unknown keys are
//! rejected.

use std::path::Path;

use bmd_core::diffusion::{DdimSpacing, DiffusionConfig, SamplerConfig};
use bmd_core::discovery::DiscoveryConfig;
use bmd_core::evalkit::EvalConfig;
use bmd_core::rlft::{PpoConfig, ResidualConfig};
use bmd_core::steering::SteeringConfig;
use bmd_core::toyenv::{EnvConfig, Landscape};
use bmd_core::trainer::{Components, DppoConfig, Method, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Demonstration collection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Number of goals the expert visits: 1 uses goal 0, 2 uses goals 0 and 2,
    /// 4 uses all of them.
    pub modes: usize,
    pub episodes: usize,
    pub noise_std: f64,
    /// Demo episodes start uniformly in a disc of this radius.
    pub start_radius: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            modes: 4,
            episodes: 200,
            noise_std: 0.01,
            start_radius: 0.3,
        }
    }
}

impl DemoConfig {
    pub fn allowed_modes(&self, num_goals: usize) -> Result<Vec<usize>, CliError> {
        match self.modes {
            1 => Ok(vec![0]),
            2 if num_goals >= 3 => Ok(vec![0, 2]),
            m if m == num_goals => Ok((0..m).collect()),
            m => Err(CliError::Config(format!(
                "demos.modes = {m} is not 1, 2 or the number of goals ({num_goals})"
            ))),
        }
    }
}

/// Sampler of the frozen pre-trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenSamplerConfig {
    pub ddim_steps: usize,
    pub ddim_spacing: DdimSpacing,
}

impl Default for FrozenSamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 2,
            ddim_spacing: DdimSpacing::Leading,
        }
    }
}

/// Settings of the `mi-probe` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub dataset_modes: Vec<usize>,
    /// Episodes of the rollout batch the MI estimate is taken on.
    pub episodes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            dataset_modes: vec![1, 2, 4],
            episodes: 256,
        }
    }
}

/// Settings of the `ablate` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub lambdas: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub landscape: Landscape,
    pub env: EnvConfig,
    pub demos: DemoConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: FrozenSamplerConfig,
    pub steering: SteeringConfig,
    pub discovery: DiscoveryConfig,
    pub residual: ResidualConfig,
    pub ppo: PpoConfig,
    pub dppo: DppoConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: "RES[BMD]".parse().expect("valid method"),
            landscape: Landscape::G1,
            env: EnvConfig::default(),
            demos: DemoConfig::default(),
            diffusion: DiffusionConfig::default(),
            sampler: FrozenSamplerConfig::default(),
            steering: SteeringConfig::default(),
            discovery: DiscoveryConfig::default(),
            residual: ResidualConfig::default(),
            ppo: PpoConfig::default(),
            dppo: DppoConfig::default(),
            trainer: TrainConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Single-core settings: narrower networks, a faster diffusion learning
    /// rate, `lambda = 1` and 500 fine-tuning epochs.
    pub fn desk() -> Self {
        let small = vec![64, 64, 64];
        let mut cfg = Self::default();
        cfg.diffusion.hidden = vec![128, 128, 128];
        cfg.diffusion.learning_rate = 1e-3;
        cfg.steering.hidden = small.clone();
        cfg.discovery.hidden = small.clone();
        cfg.discovery.lambda = 1.0;
        cfg.residual.hidden = small.clone();
        cfg.ppo.critic_hidden = small;
        cfg.ppo.diffusion_learning_rate = 1e-3;
        cfg.trainer.epochs = 700;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Reads `path` (or starts from the defaults), applies `key = value`
    /// overrides in order, then the seed.
    pub fn load_with_overrides(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let patch = toml::from_str::<toml::Table>(o)
                .map_err(|e| CliError::Config(format!("override {o:?}: {e}")))?;
            merge(&mut table, patch);
        }
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: String| CliError::Config(e);
        self.env.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.diffusion.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.frozen_sampler()
            .validate(self.diffusion.k_diff)
            .map_err(|e| cfg_err(e.to_string()))?;
        self.ppo.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.residual.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.trainer.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.demos.allowed_modes(self.env.layout.num_modes())?;
        if self.demos.episodes == 0 || self.eval.episodes == 0 || self.probe.episodes == 0 {
            return Err(cfg_err("episode counts must be >= 1".into()));
        }
        if self.steering.k_z == 0 {
            return Err(cfg_err("steering.k_z must be >= 1".into()));
        }
        if !(self.discovery.lambda >= 0.0) {
            return Err(cfg_err("discovery.lambda must be >= 0".into()));
        }
        Ok(())
    }

    pub fn frozen_sampler(&self) -> SamplerConfig {
        SamplerConfig::ddim(self.sampler.ddim_steps, 0.0).with_spacing(self.sampler.ddim_spacing)
    }

    pub fn components(&self) -> Components {
        Components {
            steering: self.steering.clone(),
            residual: self.residual.clone(),
            discovery: self.discovery.clone(),
            ppo: self.ppo.clone(),
            dppo: self.dppo.clone(),
        }
    }

    /// Environment of the fine-tuning landscape.
    pub fn finetune_env(&self) -> EnvConfig {
        self.env.with_landscape(self.landscape)
    }

    /// Evaluation settings; episode streams are keyed by the run seed plus
    /// `eval.seed`.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed.wrapping_add(self.eval.seed),
            ..self.eval.clone()
        }
    }

    /// Hex SHA-256 prefix of the config with the seed cleared, so runs that
    /// differ only in seed share a hash.
    pub fn hash(&self) -> String {
        let canonical = Self { seed: 0, ..self.clone() }.to_toml();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
