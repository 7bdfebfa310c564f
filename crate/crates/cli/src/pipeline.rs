//! The experiment stages as library calls, shared by the subcommands and the
//! acceptance suite.

use bmd_core::diffusion::DiffusionPolicy;
use bmd_core::discovery::{mi_estimate, MiProbeRow};
use bmd_core::evalkit::{evaluate, EvalReport, ReportRow};
use bmd_core::rlft::{collect_rollouts, PolicyStack};
use bmd_core::seeding::{stream, Purpose};
use bmd_core::toyenv::{generate_demos, DemoDataset, Landscape};
use bmd_core::trainer::{pretrain_bc, PretrainReport, Trainer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

fn other(e: impl ToString) -> CliError {
    CliError::Other(e.to_string())
}

/// Expert demonstrations on the base layout for `cfg.demos.modes` goals.
pub fn demos(cfg: &ExperimentConfig) -> Result<DemoDataset, CliError> {
    let allowed = cfg.demos.allowed_modes(cfg.env.layout.num_modes())?;
    let mut rng = stream(cfg.seed, Purpose::Demos, &[cfg.demos.modes as u64]);
    generate_demos(
        &cfg.env,
        &allowed,
        cfg.demos.episodes,
        cfg.demos.noise_std,
        cfg.demos.start_radius,
        &mut rng,
    )
    .map_err(|e| CliError::Config(e.to_string()))
}

/// Behavior cloning plus a rollout check on the base layout.
pub fn pretrain(
    cfg: &ExperimentConfig,
    dataset: &DemoDataset,
) -> Result<(DiffusionPolicy, PretrainReport), CliError> {
    Ok(pretrain_bc(
        dataset,
        cfg.diffusion.clone(),
        &cfg.env,
        &cfg.frozen_sampler(),
        &cfg.eval_config(),
        cfg.seed,
    )?)
}

pub fn new_trainer(cfg: &ExperimentConfig, diffusion: DiffusionPolicy) -> Result<Trainer, CliError> {
    Ok(Trainer::new(
        diffusion,
        cfg.method,
        cfg.trainer.clone(),
        cfg.components(),
        cfg.finetune_env(),
        cfg.frozen_sampler(),
        cfg.seed,
    )?)
}

/// Evaluates the trainer's current stack on the fine-tuning landscape.
pub fn evaluate_trainer(cfg: &ExperimentConfig, tr: &Trainer) -> Result<EvalReport, CliError> {
    evaluate(
        &tr.learner.stack,
        &cfg.finetune_env(),
        &tr.eval_options(&cfg.frozen_sampler()),
        &cfg.eval_config(),
    )
    .map_err(other)
}

/// Evaluates the frozen pre-trained policy on the fine-tuning landscape.
pub fn evaluate_frozen(cfg: &ExperimentConfig, diffusion: DiffusionPolicy) -> Result<EvalReport, CliError> {
    let stack = PolicyStack {
        diffusion,
        steering: None,
        residual: None,
    };
    let opts = bmd_core::rlft::ActOptions::new(cfg.frozen_sampler());
    evaluate(&stack, &cfg.finetune_env(), &opts, &cfg.eval_config()).map_err(other)
}

pub fn report_row(method: &str, landscape: Landscape, seed: u64, r: &EvalReport) -> ReportRow {
    ReportRow {
        method: method.to_string(),
        landscape: landscape.to_string(),
        seed,
        sr: r.sr,
        sr_m: r.sr_m,
        mc_at_080: r.coverage_count as f64,
        entropy: r.entropy,
    }
}

/// Full training run: discovery (if the method has it) then fine-tuning.
pub fn train(cfg: &ExperimentConfig, diffusion: DiffusionPolicy) -> Result<Trainer, CliError> {
    let mut tr = new_trainer(cfg, diffusion)?;
    tr.run(&mut bmd_core::trainer::no_checkpoints)?;
    Ok(tr)
}

/// Discovery on the base layout with a `K_z`-code steering policy over
/// `diffusion`, then the variational MI and the discriminator NLL on a fresh
/// batch of full-length rollouts.
pub fn mi_probe_one(
    cfg: &ExperimentConfig,
    diffusion: DiffusionPolicy,
    dataset_modes: usize,
) -> Result<MiProbeRow, CliError> {
    let mut probe = cfg.clone();
    probe.method = "DSRL[BMD]".parse().expect("valid method");
    probe.landscape = Landscape::G0;
    probe.trainer.epochs = probe.trainer.warmup_epochs;
    probe.trainer.flags = Default::default();
    let mut tr = new_trainer(&probe, diffusion)?;
    tr.run_discovery(&mut bmd_core::trainer::no_checkpoints)?;

    let env = probe.finetune_env();
    let k_z = tr.learner.stack.k_z();
    let mut rngs: Vec<ChaCha8Rng> = (0..probe.probe.episodes as u64)
        .map(|i| stream(probe.seed, Purpose::Probe, &[dataset_modes as u64, i]))
        .collect();
    let zs: Vec<usize> = rngs.iter_mut().map(|r| r.random_range(0..k_z)).collect();
    let batch = collect_rollouts(
        &tr.learner.stack,
        &tr.learner.act_options(),
        &env,
        env.max_steps,
        &zs,
        &mut rngs,
    )
    .map_err(other)?;
    let disc = tr.disc.as_ref().expect("BMD trainer has a discriminator");
    let (x, codes) = batch.discriminator_inputs(probe.discovery.state_action);
    let log_q = disc.log_q(x.view(), &codes).map_err(other)?;
    Ok(MiProbeRow {
        dataset_modes,
        k_z,
        mi_estimate: mi_estimate(&log_q, &disc.prior).map_err(other)?,
        nll: -log_q.iter().sum::<f64>() / log_q.len().max(1) as f64,
        seed: probe.seed,
    })
}

/// Pre-trains one policy per entry of `probe.dataset_modes` and probes it.
pub fn mi_probe(cfg: &ExperimentConfig) -> Result<Vec<MiProbeRow>, CliError> {
    cfg.probe
        .dataset_modes
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.demos.modes = m;
            c.validate()?;
            let (policy, _) = pretrain(&c, &demos(&c)?)?;
            mi_probe_one(&c, policy, m)
        })
        .collect()
}

/// Named config change of an ablation run.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Full,
    NoFinetuneDiscovery,
    NoPretrainDiscovery,
    NoCurriculum,
    Lambda(f64),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoFinetuneDiscovery => "no_finetune_discovery".into(),
            Variant::NoPretrainDiscovery => "no_pretrain_discovery".into(),
            Variant::NoCurriculum => "no_curriculum".into(),
            Variant::Lambda(l) => format!("lambda={l}"),
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoFinetuneDiscovery => c.trainer.flags.no_finetune_discovery = true,
            Variant::NoPretrainDiscovery => c.trainer.flags.no_pretrain_discovery = true,
            Variant::NoCurriculum => c.trainer.flags.no_curriculum = true,
            Variant::Lambda(l) => c.discovery.lambda = *l,
        }
        c
    }

    /// The three switches, then one run per `ablate.lambdas` entry.
    pub fn all(cfg: &ExperimentConfig) -> Vec<Variant> {
        let mut v = vec![
            Variant::Full,
            Variant::NoFinetuneDiscovery,
            Variant::NoPretrainDiscovery,
            Variant::NoCurriculum,
        ];
        v.extend(cfg.ablate.lambdas.iter().map(|&l| Variant::Lambda(l)));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub method: String,
    pub landscape: String,
    pub seed: u64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SR_M")]
    pub sr_m: f64,
    pub mc_at_080: f64,
    pub entropy: f64,
}

pub fn ablation_run(
    cfg: &ExperimentConfig,
    diffusion: &DiffusionPolicy,
    variant: &Variant,
) -> Result<AblationRow, CliError> {
    let c = variant.apply(cfg);
    c.validate()?;
    let tr = train(&c, diffusion.clone())?;
    let r = report_row(&c.method.to_string(), c.landscape, c.seed, &evaluate_trainer(&c, &tr)?);
    Ok(AblationRow {
        variant: variant.name(),
        method: r.method,
        landscape: r.landscape,
        seed: r.seed,
        sr: r.sr,
        sr_m: r.sr_m,
        mc_at_080: r.mc_at_080,
        entropy: r.entropy,
    })
}
