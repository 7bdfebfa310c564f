//! PPO fine-tuning: generalized advantage estimation, the clipped surrogate,
//! the critic, the residual policy, batched rollouts of the composed policy
//! stack, and the factored PPO update shared by the steering, residual and
//! DPPO adapters.

mod rollout;
mod update;

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{ApproxError, GaussianForward, GaussianHead, Mlp, StdMode};
use crate::diffusion::DiffusionError;
use crate::discovery::DiscoveryError;
use crate::steering::SteeringError;
use crate::toyenv::{EnvError, CHUNK_DIM, STATE_DIM};

pub use rollout::{
    collect_rollouts, ActOptions, ActOutput, Decision, EpisodeRecord, PolicyStack, RewardSpec,
    RolloutBatch,
};
pub use update::{finetune_dppo, finetune_residual, finetune_steering, Learner, UpdateStats};

#[derive(Debug, thiserror::Error)]
pub enum RlftError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Learning rate for the denoiser weights under DPPO.
    pub diffusion_learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// A denoise-transition ratio above this aborts the minibatch.
    pub max_ratio: f64,
    pub critic_hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            learning_rate: 3e-4,
            diffusion_learning_rate: 1e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            update_epochs: 10,
            minibatch_size: 512,
            max_grad_norm: Some(0.5),
            max_ratio: 1e3,
            critic_hidden: vec![256, 256, 256],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlftError> {
        let bad = |m: &str| Err(RlftError::InvalidConfig(m.into()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.update_epochs == 0 || self.minibatch_size == 0 {
            return bad("update_epochs and minibatch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.diffusion_learning_rate >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        Ok(())
    }
}

/// Generalized advantage estimation over a flat sequence of transitions.
///
/// `next_values[t]` is the value of the state after step `t`: the next
/// step's value inside an episode, or the bootstrap value at a truncation.
/// It is ignored when `dones[t]` (terminal). `ends[t]` marks the last step of
/// an episode, terminal or truncated, and stops the recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlftError> {
    let n = rewards.len();
    if [values.len(), next_values.len(), dones.len(), ends.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(RlftError::LengthMismatch("GAE inputs".into()));
    }
    if n > 0 && !ends[n - 1] {
        return Err(RlftError::LengthMismatch(
            "last transition does not end an episode".into(),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_values[t] * not_done - values[t];
        let carry = if ends[t] { 0.0 } else { next_adv };
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1 (population std). A constant vector
/// becomes all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / (std + 1e-8) } else { 0.0 };
    }
}

/// `min(rho A, clip(rho, 1-eps, 1+eps) A)` and its derivative with respect
/// to `log rho`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Gradient of `sum_i g_i log N(x_i; mean_i, std_i)` with respect to the mean
/// and log-std, for a forward pass of a Gaussian head.
pub fn gaussian_log_prob_grads(
    fwd: &GaussianForward,
    x: ArrayView2<f64>,
    g: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let var = fwd.log_std.mapv(|l| (2.0 * l).exp());
    let diff = &x - &fwd.mean;
    let mut d_mean = &diff / &var;
    let mut d_log_std = (&diff * &diff / &var).mapv(|v| v - 1.0);
    for (i, &gi) in g.iter().enumerate() {
        d_mean.row_mut(i).mapv_inplace(|v| v * gi);
        d_log_std.row_mut(i).mapv_inplace(|v| v * gi);
    }
    (d_mean, d_log_std)
}

/// `V(s, z, tau)` on `normalized state ++ one_hot(z) ++ tau`, where `tau` is
/// the fraction of the episode still ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub k_z: usize,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(k_z: usize, hidden: &[usize], rng: &mut R) -> Result<Self, RlftError> {
        let mut widths = vec![STATE_DIM + k_z + 1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut net = Mlp::new(&widths, rng)?;
        net.zero_output_layer();
        Ok(Self { net, k_z })
    }

    pub fn inputs(
        &self,
        states_norm: ArrayView2<f64>,
        zs: &[usize],
        time_left: &[f64],
    ) -> Result<Array2<f64>, RlftError> {
        if states_norm.nrows() != zs.len() || time_left.len() != zs.len() {
            return Err(RlftError::LengthMismatch("critic inputs".into()));
        }
        let mut x = Array2::zeros((zs.len(), STATE_DIM + self.k_z + 1));
        x.slice_mut(s![.., 0..STATE_DIM]).assign(&states_norm);
        for (r, &z) in zs.iter().enumerate() {
            if z >= self.k_z {
                return Err(RlftError::InvalidConfig(format!("code {z} >= K_z {}", self.k_z)));
            }
            x[[r, STATE_DIM + z]] = 1.0;
            x[[r, STATE_DIM + self.k_z]] = time_left[r];
        }
        Ok(x)
    }

    pub fn values(
        &self,
        states_norm: ArrayView2<f64>,
        zs: &[usize],
        time_left: &[f64],
    ) -> Result<Vec<f64>, RlftError> {
        let out = self.net.predict(self.inputs(states_norm, zs, time_left)?.view())?;
        Ok(out.column(0).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualConfig {
    /// Scale of the tanh-bounded correction, in action units.
    pub beta_res: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub std_floor: f64,
    pub std_mode: StdMode,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            beta_res: 0.1,
            hidden: vec![256, 256, 256],
            init_log_std: 0.1f64.ln(),
            std_floor: 1e-3,
            std_mode: StdMode::Global,
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self) -> Result<(), RlftError> {
        if !(self.beta_res > 0.0 && self.beta_res <= 1.0) {
            return Err(RlftError::InvalidConfig("beta_res must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Gaussian over a pre-tanh correction `u`; the executed chunk is
/// `a + beta_res * tanh(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPolicy {
    pub head: GaussianHead,
    pub beta_res: f64,
}

impl ResidualPolicy {
    pub fn new<R: Rng + ?Sized>(cfg: &ResidualConfig, rng: &mut R) -> Result<Self, RlftError> {
        cfg.validate()?;
        let head = GaussianHead::new(
            STATE_DIM + CHUNK_DIM,
            &cfg.hidden,
            CHUNK_DIM,
            cfg.std_mode,
            cfg.init_log_std,
            cfg.std_floor,
            rng,
        )?;
        Ok(Self {
            head,
            beta_res: cfg.beta_res,
        })
    }

    /// Rows of `normalized state ++ normalized pre-trained chunk`.
    pub fn inputs(
        states_norm: ArrayView2<f64>,
        chunks_norm: ArrayView2<f64>,
    ) -> Result<Array2<f64>, RlftError> {
        if states_norm.nrows() != chunks_norm.nrows() {
            return Err(RlftError::LengthMismatch("residual inputs".into()));
        }
        let mut x = Array2::zeros((states_norm.nrows(), STATE_DIM + CHUNK_DIM));
        x.slice_mut(s![.., 0..STATE_DIM]).assign(&states_norm);
        x.slice_mut(s![.., STATE_DIM..]).assign(&chunks_norm);
        Ok(x)
    }

    /// `a + beta_res * tanh(u)`, elementwise; not clipped.
    pub fn apply(&self, chunk: &[f64; CHUNK_DIM], u: &[f64]) -> [f64; CHUNK_DIM] {
        let mut out = *chunk;
        for (o, &ui) in out.iter_mut().zip(u) {
            *o += self.beta_res * ui.tanh();
        }
        out
    }
}

/// One row of the per-epoch training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub epoch: usize,
    pub phase: String,
    pub mean_env_reward: f64,
    pub mean_intrinsic: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub nll: f64,
    pub mi_estimate: f64,
    pub horizon: usize,
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticsRow], writer: W) -> Result<(), RlftError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record([
        "epoch",
        "phase",
        "mean_env_reward",
        "mean_intrinsic",
        "actor_loss",
        "value_loss",
        "nll",
        "mi_estimate",
        "horizon",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_hand_recursion() {
        let (adv, ret) = compute_gae(
            &[1.0, 1.0],
            &[0.5, 0.5],
            &[0.5, 0.0],
            &[false, true],
            &[false, true],
            0.99,
            0.95,
        )
        .unwrap();
        assert!((adv[0] - 1.46525).abs() < 1e-12);
        assert!((adv[1] - 0.5).abs() < 1e-12);
        assert!((ret[0] - 1.96525).abs() < 1e-12);
    }

    #[test]
    fn gae_zero_rewards_and_td0() {
        let z = compute_gae(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[false, false, true], &[false, false, true], 0.9, 0.9)
            .unwrap();
        assert!(z.0.iter().all(|&a| a == 0.0));
        let r = [0.3, -1.0, 2.0];
        let v = [0.1, 0.2, 0.4];
        let nv = [0.2, 0.4, 0.7];
        let (adv, _) = compute_gae(&r, &v, &nv, &[false; 3], &[false, false, true], 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert!((adv[t] - (r[t] + 0.9 * nv[t] - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_rejects_mismatch_and_open_episode() {
        assert!(compute_gae(&[1.0], &[], &[0.0], &[true], &[true], 0.9, 0.9).is_err());
        assert!(compute_gae(&[1.0], &[0.0], &[0.0], &[false], &[false], 0.9, 0.9).is_err());
    }

    #[test]
    fn surrogate_clip_rules() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), (1.2 * 2.0, 0.0));
        let (obj, g) = clipped_surrogate(0.5, -1.0, 0.2);
        assert!((obj + 0.8).abs() < 1e-15 && g == 0.0);
        let (obj, g) = clipped_surrogate(1.1, 1.0, 0.2);
        assert!((obj - 1.1).abs() < 1e-15 && (g - 1.1).abs() < 1e-15);
    }

    #[test]
    fn normalization_moments() {
        let mut a = vec![1.0, 2.0, 3.0, 6.0];
        normalize_advantages(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        let mut c = vec![2.0; 3];
        normalize_advantages(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn residual_is_bounded() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cfg = ResidualConfig {
            hidden: vec![8],
            ..ResidualConfig::default()
        };
        let res = ResidualPolicy::new(&cfg, &mut rng).unwrap();
        let a = [0.05; CHUNK_DIM];
        let out = res.apply(&a, &[50.0, -50.0, 0.0, 1.0, -1.0, 3.0, 0.2, -9.0]);
        for (o, i) in out.iter().zip(a) {
            assert!((o - i).abs() <= cfg.beta_res + 1e-15);
        }
    }

    #[test]
    fn diagnostics_header() {
        let mut buf = Vec::new();
        write_diagnostics_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,phase,mean_env_reward,mean_intrinsic,actor_loss,value_loss,nll,mi_estimate,horizon\n"
        );
    }
}
