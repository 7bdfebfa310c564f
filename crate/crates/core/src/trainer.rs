//! Two-phase training: mode discovery with a growing rollout horizon, then
//! reward-augmented fine-tuning with one of the adapters, plus the ablation
//! switches and behavior-cloning pre-training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{pretrain, DiffusionConfig, DiffusionError, DiffusionPolicy, SamplerConfig};
use crate::discovery::{Discriminator, DiscoveryConfig, DiscoveryError};
use crate::evalkit::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::rlft::{
    ActOptions, DiagnosticsRow, Learner, PolicyStack, PpoConfig, ResidualConfig, ResidualPolicy,
    RewardSpec, RlftError,
};
use crate::seeding::{stream, Purpose};
use crate::steering::{LatentPrior, SteeringConfig, SteeringError, SteeringPolicy};
use crate::toyenv::{DemoDataset, EnvConfig, CHUNK_DIM, STATE_DIM};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(
        "discriminator diverged at epoch {epoch}: NLL {nll:.4} above ln K_z + margin for {streak} epochs"
    )]
    Divergence { epoch: usize, nll: f64, streak: usize },
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Rlft(#[from] RlftError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub initial: usize,
    pub step: usize,
    /// Epochs at the initial horizon before growth starts.
    pub warmup: usize,
    /// Epochs between growth steps.
    pub interval: usize,
    pub max: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            initial: 10,
            step: 10,
            warmup: 100,
            interval: 20,
            max: 50,
        }
    }
}

impl CurriculumSchedule {
    /// Rollout horizon at 1-based epoch `e`.
    pub fn horizon(&self, e: usize, no_curriculum: bool) -> usize {
        if no_curriculum {
            return self.max;
        }
        if e <= self.warmup {
            return self.initial.min(self.max);
        }
        let growth = (e - self.warmup) / self.interval.max(1);
        self.initial
            .saturating_add(self.step.saturating_mul(growth))
            .min(self.max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Skip the discovery phase.
    pub no_pretrain_discovery: bool,
    /// Freeze the discriminator and steering policy during fine-tuning.
    pub no_finetune_discovery: bool,
    /// Run discovery at the full horizon.
    pub no_curriculum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes: usize,
    pub warmup_epochs: usize,
    pub curriculum: CurriculumSchedule,
    pub flags: AblationFlags,
    /// Discriminator NLL margin above `ln K_z` that counts towards divergence.
    pub divergence_margin: f64,
    pub divergence_patience: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            episodes: 64,
            warmup_epochs: 200,
            curriculum: CurriculumSchedule::default(),
            flags: AblationFlags::default(),
            divergence_margin: 0.5,
            divergence_patience: 50,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::InvalidConfig("warmup_epochs must be <= epochs".into()));
        }
        if self.episodes == 0 {
            return Err(TrainError::InvalidConfig("episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Settings of the DPPO adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DppoConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    /// Lower bound on every denoise transition's std.
    pub min_std: f64,
    /// Trainable final transitions of the full DDPM chain.
    pub ddpm_last: usize,
}

impl Default for DppoConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 2,
            eta: 1.0,
            min_std: 0.1,
            ddpm_last: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Adapter {
    Steering,
    Residual,
    Dppo,
    Dppo10,
}

/// An adapter, optionally regularized with mode discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub adapter: Adapter,
    pub bmd: bool,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.adapter {
            Adapter::Steering => "DSRL",
            Adapter::Residual => "RES",
            Adapter::Dppo => "DPPO",
            Adapter::Dppo10 => "DPPO[10]",
        };
        if self.bmd {
            write!(f, "{base}[BMD]")
        } else {
            write!(f, "{base}")
        }
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        let (base, bmd) = match upper.strip_suffix("[BMD]") {
            Some(b) => (b, true),
            None => (upper.as_str(), false),
        };
        let adapter = match base {
            "DSRL" => Adapter::Steering,
            "RES" => Adapter::Residual,
            "DPPO" => Adapter::Dppo,
            "DPPO[10]" => Adapter::Dppo10,
            _ => return Err(TrainError::InvalidConfig(format!("unknown method {s:?}"))),
        };
        Ok(Self { adapter, bmd })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-component settings a trainer is built from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Components {
    pub steering: SteeringConfig,
    pub residual: ResidualConfig,
    pub discovery: DiscoveryConfig,
    pub ppo: PpoConfig,
    pub dppo: DppoConfig,
}

impl Components {
    fn dppo_sampler(&self, adapter: Adapter) -> Option<(SamplerConfig, usize)> {
        match adapter {
            Adapter::Dppo => Some((
                SamplerConfig::ddim(self.dppo.ddim_steps, self.dppo.eta).with_min_std(self.dppo.min_std),
                self.dppo.ddim_steps,
            )),
            Adapter::Dppo10 => Some((
                SamplerConfig::ddpm().with_min_std(self.dppo.min_std),
                self.dppo.ddpm_last,
            )),
            _ => None,
        }
    }
}

/// Sampler used at evaluation time for a method: DDIM with η = 0 on the
/// same timesteps, or the plain DDPM chain for the DDPM variant.
pub fn eval_sampler(method: Method, comps: &Components, frozen: &SamplerConfig) -> SamplerConfig {
    match method.adapter {
        Adapter::Dppo => SamplerConfig::ddim(comps.dppo.ddim_steps, 0.0).with_spacing(frozen.spacing),
        Adapter::Dppo10 => SamplerConfig::ddpm(),
        _ => *frozen,
    }
}

/// Training state across both phases.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub method: Method,
    pub cfg: TrainConfig,
    pub comps: Components,
    /// Environment of the fine-tuning phase (its landscape).
    pub env: EnvConfig,
    pub seed: u64,
    pub learner: Learner,
    pub disc: Option<Discriminator>,
    pub diagnostics: Vec<DiagnosticsRow>,
    /// Completed epochs.
    pub epoch: usize,
    pub finetune_started: bool,
    /// Consecutive epochs with discriminator NLL above the divergence bound.
    pub high_nll_streak: usize,
}

impl Trainer {
    /// `frozen` is the sampler of the pre-trained policy (DDIM, η = 0).
    pub fn new(
        diffusion: DiffusionPolicy,
        method: Method,
        cfg: TrainConfig,
        comps: Components,
        env: EnvConfig,
        frozen: SamplerConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        env.validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let mut rng = stream(seed, Purpose::Init, &[]);
        let steering = if method.bmd {
            Some(SteeringPolicy::new(&comps.steering, &mut rng)?)
        } else if method.adapter == Adapter::Steering {
            let single = SteeringConfig {
                k_z: 1,
                ..comps.steering.clone()
            };
            Some(SteeringPolicy::new(&single, &mut rng)?)
        } else {
            None
        };
        let disc = if method.bmd {
            let width = if comps.discovery.state_action {
                STATE_DIM + CHUNK_DIM
            } else {
                STATE_DIM
            };
            let prior = LatentPrior::new(comps.steering.k_z)?;
            Some(Discriminator::new(width, prior, &comps.discovery, &mut rng)?)
        } else {
            None
        };
        let stack = PolicyStack {
            diffusion,
            steering,
            residual: None,
        };
        let mut learner = Learner::new(stack, comps.ppo.clone(), frozen, 0, &mut rng)?;
        if method.adapter == Adapter::Residual {
            learner.attach_residual(ResidualPolicy::new(&comps.residual, &mut rng)?);
            // the residual joins at the phase switch when discovery runs first
            if method.bmd && !cfg.flags.no_pretrain_discovery {
                learner.train_residual = false;
            }
        }
        let mut t = Self {
            method,
            cfg,
            comps,
            env,
            seed,
            learner,
            disc,
            diagnostics: Vec::new(),
            epoch: 0,
            finetune_started: false,
            high_nll_streak: 0,
        };
        if !t.has_discovery() {
            t.epoch = t.cfg.warmup_epochs;
        }
        Ok(t)
    }

    pub fn has_discovery(&self) -> bool {
        self.method.bmd && !self.cfg.flags.no_pretrain_discovery
    }

    pub fn in_discovery(&self) -> bool {
        self.has_discovery() && self.epoch < self.cfg.warmup_epochs
    }

    /// Options for evaluating the current stack.
    pub fn eval_options(&self, frozen: &SamplerConfig) -> ActOptions {
        ActOptions::new(eval_sampler(self.method, &self.comps, frozen))
    }

    /// The residual is held back (identity) during discovery.
    fn stack_for_discovery(&mut self) -> Option<ResidualPolicy> {
        self.learner.stack.residual.take()
    }

    /// Switches to fine-tuning: unfreezes the adapters of the method and lowers
    /// the discriminator learning rate. Idempotent.
    pub fn start_finetune(&mut self) -> Result<(), TrainError> {
        if self.finetune_started {
            return Ok(());
        }
        self.finetune_started = true;
        if self.method.adapter == Adapter::Residual {
            self.learner.train_residual = true;
        }
        if let Some((sampler, last)) = self.comps.dppo_sampler(self.method.adapter) {
            self.learner.enable_dppo(sampler, last)?;
        }
        let freeze = self.method.bmd && self.cfg.flags.no_finetune_discovery;
        if self.learner.stack.steering.is_some() {
            self.learner.train_steering = !freeze;
        }
        if let Some(d) = &mut self.disc {
            let lr = self.comps.discovery.learning_rate * self.comps.discovery.finetune_lr_scale;
            d.adam.set_learning_rate(lr);
        }
        Ok(())
    }

    /// Runs one epoch of whichever phase is current.
    pub fn step_epoch(&mut self) -> Result<&DiagnosticsRow, TrainError> {
        let e = self.epoch + 1;
        let discovery = self.in_discovery();
        if !discovery {
            self.start_finetune()?;
        }
        let horizon = if discovery {
            self.cfg
                .curriculum
                .horizon(e, self.cfg.flags.no_curriculum)
                .min(self.env.max_steps)
        } else {
            self.env.max_steps
        };
        let reward = RewardSpec {
            use_env: !discovery,
            lambda: if self.method.bmd { self.comps.discovery.lambda } else { 0.0 },
            gamma: self.comps.ppo.gamma,
            state_action: self.comps.discovery.state_action,
        };
        let held = if discovery { self.stack_for_discovery() } else { None };
        let result = self.learner.train_epoch(
            &self.env,
            horizon,
            self.cfg.episodes,
            e as u64,
            self.seed,
            self.disc.as_ref(),
            &reward,
        );
        if let Some(r) = held {
            self.learner.stack.residual = Some(r);
        }
        let (batch, stats) = result?;

        let n = batch.decisions.len().max(1) as f64;
        let mean_env = batch.decisions.iter().map(|d| d.env_reward).sum::<f64>() / n;
        let mean_int = batch.decisions.iter().map(|d| d.intrinsic).sum::<f64>() / n;
        let (mut nll, mut mi) = (f64::NAN, f64::NAN);
        if let Some(disc) = &mut self.disc {
            let log_p = disc.prior.log_prob();
            let mean_lq = batch.decisions.iter().map(|d| d.log_q).sum::<f64>() / n;
            nll = -mean_lq;
            mi = mean_lq - log_p;
            let train_disc = discovery || !self.cfg.flags.no_finetune_discovery;
            if train_disc && !batch.decisions.is_empty() {
                let (x, zs) = batch.discriminator_inputs(self.comps.discovery.state_action);
                let mut rng = stream(self.seed, Purpose::Discriminator, &[e as u64]);
                let mut idx: Vec<usize> = (0..zs.len()).collect();
                let bs = self.comps.discovery.batch_size.max(1);
                let mut pos = idx.len();
                for _ in 0..self.comps.discovery.updates_per_epoch {
                    if pos + bs > idx.len() {
                        idx.shuffle(&mut rng);
                        pos = 0;
                    }
                    let take = &idx[pos..(pos + bs).min(idx.len())];
                    pos += bs;
                    let xb = x.select(ndarray::Axis(0), take);
                    let zb: Vec<usize> = take.iter().map(|&i| zs[i]).collect();
                    disc.train_step(xb.view(), &zb, &mut rng)?;
                }
            }
            if nll > (disc.k_z() as f64).ln() + self.cfg.divergence_margin {
                self.high_nll_streak += 1;
            } else {
                self.high_nll_streak = 0;
            }
        }
        self.epoch = e;
        self.diagnostics.push(DiagnosticsRow {
            epoch: e,
            phase: if discovery { "discovery" } else { "finetune" }.into(),
            mean_env_reward: mean_env,
            mean_intrinsic: mean_int,
            actor_loss: stats.actor_loss,
            value_loss: stats.value_loss,
            nll,
            mi_estimate: mi,
            horizon,
        });
        if self.high_nll_streak >= self.cfg.divergence_patience {
            return Err(TrainError::Divergence {
                epoch: e,
                nll,
                streak: self.high_nll_streak,
            });
        }
        Ok(self.diagnostics.last().expect("just pushed"))
    }

    /// Discovery epochs up to `warmup_epochs`.
    pub fn run_discovery<F>(&mut self, hook: &mut F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer, &str) -> Result<(), String>,
    {
        if !self.has_discovery() {
            return Ok(());
        }
        while self.in_discovery() {
            self.step_epoch()?;
            self.maybe_periodic_checkpoint(hook)?;
        }
        hook(self, "discovery").map_err(TrainError::Hook)
    }

    /// Fine-tuning epochs up to `epochs`.
    pub fn run_finetune<F>(&mut self, hook: &mut F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer, &str) -> Result<(), String>,
    {
        self.start_finetune()?;
        while self.epoch < self.cfg.epochs {
            self.step_epoch()?;
            self.maybe_periodic_checkpoint(hook)?;
        }
        hook(self, "finetune").map_err(TrainError::Hook)
    }

    pub fn run<F>(&mut self, hook: &mut F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer, &str) -> Result<(), String>,
    {
        self.run_discovery(hook)?;
        self.run_finetune(hook)
    }

    fn maybe_periodic_checkpoint<F>(&self, hook: &mut F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer, &str) -> Result<(), String>,
    {
        let every = self.cfg.checkpoint_every;
        if every > 0 && self.epoch.is_multiple_of(every) {
            hook(self, &format!("epoch{:04}", self.epoch)).map_err(TrainError::Hook)?;
        }
        Ok(())
    }
}

/// A hook that ignores checkpoints.
pub fn no_checkpoints(_: &Trainer, _: &str) -> Result<(), String> {
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// The loss did not decrease over the final 20% of epochs.
    pub plateau_warning: bool,
    pub rollout: EvalReport,
}

/// Behavior cloning followed by a rollout check on `env`.
pub fn pretrain_bc(
    dataset: &DemoDataset,
    config: DiffusionConfig,
    env: &EnvConfig,
    sampler: &SamplerConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(DiffusionPolicy, PretrainReport), TrainError> {
    let mut rng = stream(seed, Purpose::BcTrain, &[]);
    let (policy, losses) = pretrain(dataset, config, &mut rng)?;
    let final_loss = *losses.last().unwrap_or(&f64::NAN);
    let tail = (losses.len() / 5).max(1);
    let plateau_warning = losses.len() >= 2 && {
        let window = &losses[losses.len() - tail.min(losses.len())..];
        let half = window.len().div_ceil(2);
        let first: f64 = window[..half].iter().sum::<f64>() / half as f64;
        let second: f64 = window[half..].iter().sum::<f64>() / (window.len() - half).max(1) as f64;
        window.len() >= 2 && second >= first
    };
    let stack = PolicyStack {
        diffusion: policy,
        steering: None,
        residual: None,
    };
    let rollout = evaluate(&stack, env, &ActOptions::new(*sampler), eval)?;
    Ok((
        stack.diffusion,
        PretrainReport {
            losses,
            final_loss,
            plateau_warning,
            rollout,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_schedule() {
        let s = CurriculumSchedule::default();
        assert_eq!(s.horizon(1, false), 10);
        assert_eq!(s.horizon(100, false), 10);
        assert_eq!(s.horizon(119, false), 10);
        assert_eq!(s.horizon(120, false), 20);
        assert_eq!(s.horizon(161, false), 40);
        assert_eq!(s.horizon(10_000, false), 50);
        assert_eq!(s.horizon(1, true), 50);
    }

    #[test]
    fn method_names_round_trip() {
        for name in ["DSRL", "DSRL[BMD]", "RES", "RES[BMD]", "DPPO", "DPPO[BMD]", "DPPO[10]", "DPPO[10][BMD]"] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert!("SAC".parse::<Method>().is_err());
    }

    #[test]
    fn warmup_must_fit_in_epochs() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 20,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
