//! Mapping between in-memory models and checkpoint tensors.
//!
//! Names are `<module>.<layer>.weight|bias` for networks, `<module>.log_std`
//! for Gaussian heads and `<module>.adam.m|v.<i>` for optimizer moments.

use bmd_core::approx::{Adam, Mlp};
use bmd_core::diffusion::{DiffusionConfig, DiffusionPolicy};
use bmd_core::rlft::DiagnosticsRow;
use bmd_core::seeding::{stream_id, Purpose};
use bmd_core::toyenv::{ChunkNormalizer, Stats};
use bmd_core::trainer::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, StreamState};
use crate::config::ExperimentConfig;
use crate::CliError;

fn err(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

fn put_mlp(ck: &mut Checkpoint, prefix: &str, net: &Mlp) {
    for (l, layer) in net.layers().iter().enumerate() {
        ck.push(
            format!("{prefix}.{l}.weight"),
            layer.weight.shape().to_vec(),
            layer.weight.iter().copied().collect(),
        );
        ck.push(format!("{prefix}.{l}.bias"), vec![layer.bias.len()], layer.bias.to_vec());
    }
}

fn load_mlp(ck: &Checkpoint, prefix: &str, net: &mut Mlp) -> Result<(), CliError> {
    let shapes: Vec<Vec<usize>> = net
        .layers()
        .iter()
        .flat_map(|l| [l.weight.shape().to_vec(), vec![l.bias.len()]])
        .collect();
    for (i, (dst, shape)) in net.tensors_mut().into_iter().zip(shapes).enumerate() {
        let name = format!("{prefix}.{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" });
        copy_into(ck, &name, &shape, dst)?;
    }
    if ck.has_tensor(&format!("{prefix}.{}.weight", net.layers().len())) {
        return Err(err(format!("{prefix} has more layers than the config")));
    }
    Ok(())
}

fn copy_into(ck: &Checkpoint, name: &str, shape: &[usize], dst: &mut [f64]) -> Result<(), CliError> {
    let t = ck.tensor(name)?;
    if t.shape != shape {
        return Err(err(format!(
            "tensor {name:?} has shape {:?}, the config expects {shape:?}",
            t.shape
        )));
    }
    dst.copy_from_slice(&t.data);
    Ok(())
}

fn put_vec(ck: &mut Checkpoint, name: String, v: &[f64]) {
    ck.push(name, vec![v.len()], v.to_vec());
}

fn load_vec(ck: &Checkpoint, name: &str, dst: &mut [f64]) -> Result<(), CliError> {
    copy_into(ck, name, &[dst.len()], dst)
}

fn put_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam) {
    let (m, v) = adam.moments();
    for (i, (m, v)) in m.iter().zip(v).enumerate() {
        put_vec(ck, format!("{prefix}.adam.m.{i}"), m);
        put_vec(ck, format!("{prefix}.adam.v.{i}"), v);
    }
    ck.set_meta(&format!("{prefix}.adam.steps"), adam.steps());
    ck.set_meta(&format!("{prefix}.adam.lr"), format!("{:?}", adam.config.learning_rate));
}

/// Rebuilds `adam` from the checkpoint; its config supplies everything but the
/// learning rate.
fn load_adam(ck: &Checkpoint, prefix: &str, adam: &Adam) -> Result<Adam, CliError> {
    let (m0, _) = adam.moments();
    let mut first = Vec::with_capacity(m0.len());
    let mut second = Vec::with_capacity(m0.len());
    for (i, m) in m0.iter().enumerate() {
        let mut a = vec![0.0; m.len()];
        let mut b = vec![0.0; m.len()];
        load_vec(ck, &format!("{prefix}.adam.m.{i}"), &mut a)?;
        load_vec(ck, &format!("{prefix}.adam.v.{i}"), &mut b)?;
        first.push(a);
        second.push(b);
    }
    let mut config = adam.config;
    config.learning_rate = ck.meta_parse(&format!("{prefix}.adam.lr"))?;
    let steps = ck.meta_parse(&format!("{prefix}.adam.steps"))?;
    Ok(Adam::restore(config, first, second, steps))
}

fn put_stats(ck: &mut Checkpoint, prefix: &str, s: &Stats) {
    put_vec(ck, format!("{prefix}.mean"), &s.mean);
    put_vec(ck, format!("{prefix}.std"), &s.std);
}

fn load_stats(ck: &Checkpoint, prefix: &str) -> Result<Stats, CliError> {
    Ok(Stats {
        mean: ck.tensor(&format!("{prefix}.mean"))?.data.clone(),
        std: ck.tensor(&format!("{prefix}.std"))?.data.clone(),
    })
}

pub fn put_diffusion(ck: &mut Checkpoint, policy: &DiffusionPolicy) {
    put_mlp(ck, "diffusion", &policy.net);
    put_stats(ck, "normalizer.state", &policy.normalizer.state);
    put_stats(ck, "normalizer.action", &policy.normalizer.action);
}

pub fn load_diffusion(ck: &Checkpoint, config: &DiffusionConfig) -> Result<DiffusionPolicy, CliError> {
    let normalizer = ChunkNormalizer {
        state: load_stats(ck, "normalizer.state")?,
        action: load_stats(ck, "normalizer.action")?,
    };
    // the init draw is overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = DiffusionPolicy::new(config.clone(), normalizer, &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    load_mlp(ck, "diffusion", &mut policy.net)?;
    Ok(policy)
}

/// A checkpoint holding only the pre-trained diffusion policy.
pub fn pretrain_checkpoint(cfg: &ExperimentConfig, policy: &DiffusionPolicy) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.to_toml());
    ck.set_meta("stage", "pretrain");
    ck.set_meta("config_hash", cfg.hash());
    ck.set_meta("seed", cfg.seed);
    ck.streams.push(StreamState {
        name: "bc_train".into(),
        seed: cfg.seed,
        stream: stream_id(Purpose::BcTrain, &[]),
        word_pos: 0,
    });
    put_diffusion(&mut ck, policy);
    ck
}

const DIAG_COLS: usize = 9;

fn put_diagnostics(ck: &mut Checkpoint, rows: &[DiagnosticsRow]) {
    let data = rows
        .iter()
        .flat_map(|r| {
            [
                r.epoch as f64,
                if r.phase == "discovery" { 0.0 } else { 1.0 },
                r.mean_env_reward,
                r.mean_intrinsic,
                r.actor_loss,
                r.value_loss,
                r.nll,
                r.mi_estimate,
                r.horizon as f64,
            ]
        })
        .collect();
    ck.push("diagnostics", vec![rows.len(), DIAG_COLS], data);
}

fn load_diagnostics(ck: &Checkpoint) -> Result<Vec<DiagnosticsRow>, CliError> {
    let t = ck.tensor("diagnostics")?;
    if t.shape.len() != 2 || t.shape[1] != DIAG_COLS {
        return Err(err("diagnostics table has the wrong width"));
    }
    Ok(t.data
        .chunks_exact(DIAG_COLS)
        .map(|r| DiagnosticsRow {
            epoch: r[0] as usize,
            phase: if r[1] == 0.0 { "discovery" } else { "finetune" }.into(),
            mean_env_reward: r[2],
            mean_intrinsic: r[3],
            actor_loss: r[4],
            value_loss: r[5],
            nll: r[6],
            mi_estimate: r[7],
            horizon: r[8] as usize,
        })
        .collect())
}

/// Full training state after `stage`. Every epoch draws fresh streams keyed by
/// `(seed, purpose, epoch)`, so the stream table records where the next epoch
/// starts.
pub fn trainer_checkpoint(cfg: &ExperimentConfig, tr: &Trainer, stage: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.to_toml());
    ck.set_meta("stage", stage);
    ck.set_meta("config_hash", cfg.hash());
    ck.set_meta("seed", tr.seed);
    ck.set_meta("method", tr.method);
    ck.set_meta("epoch", tr.epoch);
    ck.set_meta("finetune_started", tr.finetune_started);
    ck.set_meta("high_nll_streak", tr.high_nll_streak);
    let next = tr.epoch as u64 + 1;
    for (name, purpose, path) in [
        ("rollout", Purpose::Rollout, vec![next, 0]),
        ("update", Purpose::Update, vec![next]),
        ("discriminator", Purpose::Discriminator, vec![next]),
    ] {
        ck.streams.push(StreamState {
            name: name.into(),
            seed: tr.seed,
            stream: stream_id(purpose, &path),
            word_pos: 0,
        });
    }

    let l = &tr.learner;
    put_diffusion(&mut ck, &l.stack.diffusion);
    if let Some(s) = &l.stack.steering {
        put_mlp(&mut ck, "steering", &s.head.net);
        put_vec(&mut ck, "steering.log_std".into(), &s.head.log_std);
    }
    if let Some(r) = &l.stack.residual {
        put_mlp(&mut ck, "residual", &r.head.net);
        put_vec(&mut ck, "residual.log_std".into(), &r.head.log_std);
    }
    put_mlp(&mut ck, "critic", &l.critic.net);
    if let Some(d) = &tr.disc {
        put_mlp(&mut ck, "discriminator", &d.net);
        put_adam(&mut ck, "discriminator", &d.adam);
    }
    if let Some(a) = &l.steering_adam {
        put_adam(&mut ck, "steering", a);
    }
    if let Some(a) = &l.residual_adam {
        put_adam(&mut ck, "residual", a);
    }
    if let Some(a) = &l.diffusion_adam {
        put_adam(&mut ck, "diffusion", a);
    }
    put_adam(&mut ck, "critic", &l.critic_adam);
    put_diagnostics(&mut ck, &tr.diagnostics);
    ck
}

/// Rebuilds a trainer from `cfg` and overwrites its state with the checkpoint.
pub fn restore_trainer(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Trainer, CliError> {
    let method: String = ck.meta_parse("method")?;
    if method != cfg.method.to_string() {
        return Err(err(format!(
            "checkpoint was trained with {method}, the config selects {}",
            cfg.method
        )));
    }
    let diffusion = load_diffusion(ck, &cfg.diffusion)?;
    let mut tr = Trainer::new(
        diffusion,
        cfg.method,
        cfg.trainer.clone(),
        cfg.components(),
        cfg.finetune_env(),
        cfg.frozen_sampler(),
        ck.meta_parse("seed")?,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    if ck.meta_parse::<bool>("finetune_started")? {
        tr.start_finetune().map_err(|e| CliError::Config(e.to_string()))?;
    }
    tr.epoch = ck.meta_parse("epoch")?;
    tr.finetune_started = ck.meta_parse("finetune_started")?;
    tr.high_nll_streak = ck.meta_parse("high_nll_streak")?;
    tr.diagnostics = load_diagnostics(ck)?;

    let l = &mut tr.learner;
    if let Some(s) = &mut l.stack.steering {
        load_mlp(ck, "steering", &mut s.head.net)?;
        load_vec(ck, "steering.log_std", &mut s.head.log_std)?;
    }
    if let Some(r) = &mut l.stack.residual {
        load_mlp(ck, "residual", &mut r.head.net)?;
        load_vec(ck, "residual.log_std", &mut r.head.log_std)?;
    }
    load_mlp(ck, "critic", &mut l.critic.net)?;
    if let Some(d) = &mut tr.disc {
        load_mlp(ck, "discriminator", &mut d.net)?;
        d.adam = load_adam(ck, "discriminator", &d.adam)?;
    }
    if let Some(a) = &l.steering_adam {
        l.steering_adam = Some(load_adam(ck, "steering", a)?);
    }
    if let Some(a) = &l.residual_adam {
        l.residual_adam = Some(load_adam(ck, "residual", a)?);
    }
    if let Some(a) = &l.diffusion_adam {
        l.diffusion_adam = Some(load_adam(ck, "diffusion", a)?);
    }
    l.critic_adam = load_adam(ck, "critic", &l.critic_adam)?;
    let expected: Vec<String> = trainer_checkpoint(cfg, &tr, "")
        .tensors
        .into_iter()
        .map(|t| t.name)
        .collect();
    if let Some(extra) = ck.tensors.iter().find(|t| !expected.contains(&t.name)) {
        return Err(err(format!(
            "tensor {:?} has no slot in a {} trainer",
            extra.name, cfg.method
        )));
    }
    Ok(tr)
}
