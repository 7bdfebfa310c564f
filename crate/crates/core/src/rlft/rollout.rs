use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Critic, ResidualPolicy, RlftError};
use crate::approx::GaussianHead;
use crate::diffusion::{DenoiseStep, DiffusionPolicy, SamplerConfig};
use crate::discovery::Discriminator;
use crate::steering::SteeringPolicy;
use crate::toyenv::{step, EnvConfig, EnvState, Trajectory, CHUNK_DIM, CHUNK_LEN, STATE_DIM};

/// The frozen or fine-tuned diffusion policy with its optional steering and
/// residual heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStack {
    pub diffusion: DiffusionPolicy,
    pub steering: Option<SteeringPolicy>,
    pub residual: Option<ResidualPolicy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOptions {
    pub sampler: SamplerConfig,
    /// How many final denoise transitions to keep as trainable records.
    pub record_last: usize,
    /// Use the steering mean instead of sampling.
    pub deterministic_steering: bool,
    /// Use the residual mean instead of sampling.
    pub deterministic_residual: bool,
}

impl ActOptions {
    pub fn new(sampler: SamplerConfig) -> Self {
        Self {
            sampler,
            record_last: 0,
            deterministic_steering: false,
            deterministic_residual: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActOutput {
    /// Executed chunks in action units, clipped to the action bound.
    pub exec: Vec<[f64; CHUNK_DIM]>,
    pub w: Array2<f64>,
    /// Log-density of `w` under the steering policy (0 without steering).
    pub steer_logp: Vec<f64>,
    /// Normalized chunks from the diffusion sampler.
    pub chunks_norm: Array2<f64>,
    pub u: Array2<f64>,
    /// Log-density of `u` under the residual policy (0 without residual).
    pub res_logp: Vec<f64>,
    pub denoise: Vec<Vec<DenoiseStep>>,
}

impl PolicyStack {
    pub fn k_z(&self) -> usize {
        self.steering.as_ref().map_or(1, SteeringPolicy::k_z)
    }

    pub fn normalize_states(&self, states: &[[f64; STATE_DIM]]) -> Array2<f64> {
        let mut out = Array2::zeros((states.len(), STATE_DIM));
        for (r, s) in states.iter().enumerate() {
            let n = self.diffusion.normalize_state(s);
            out.row_mut(r).assign(&Array1::from(n));
        }
        out
    }

    /// Samples one action chunk per row; row `i` uses only `rngs[i]`.
    pub fn act<R: Rng>(
        &self,
        states_norm: ArrayView2<f64>,
        zs: &[usize],
        opts: &ActOptions,
        action_bound: f64,
        rngs: &mut [R],
    ) -> Result<ActOutput, RlftError> {
        let b = zs.len();
        if states_norm.nrows() != b || rngs.len() != b {
            return Err(RlftError::LengthMismatch("act batch".into()));
        }
        let (w, steer_logp) = match &self.steering {
            Some(st) if opts.deterministic_steering => {
                let fwd = st.forward(states_norm, zs)?;
                let lp = (0..b)
                    .map(|i| fwd.log_prob_row(i, fwd.mean.row(i).as_slice().expect("contiguous")))
                    .collect();
                (fwd.mean, lp)
            }
            Some(st) => st.sample_w(states_norm, zs, rngs)?,
            None => {
                let mut w = Array2::zeros((b, CHUNK_DIM));
                for (mut row, rng) in w.rows_mut().into_iter().zip(rngs.iter_mut()) {
                    row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
                }
                (w, vec![0.0; b])
            }
        };
        let out = self
            .diffusion
            .sample(states_norm, w.view(), &opts.sampler, opts.record_last > 0, rngs)?;
        let denoise: Vec<Vec<DenoiseStep>> = out
            .records
            .into_iter()
            .map(|mut r| {
                let keep = r.len().saturating_sub(opts.record_last);
                r.split_off(keep)
            })
            .collect();
        let base: Vec<[f64; CHUNK_DIM]> = (0..b)
            .map(|i| {
                self.diffusion
                    .to_env_chunk(out.chunks.row(i).as_slice().expect("contiguous"), action_bound)
            })
            .collect();
        let mut u = Array2::zeros((b, CHUNK_DIM));
        let mut res_logp = vec![0.0; b];
        let exec = match &self.residual {
            Some(res) => {
                let x = ResidualPolicy::inputs(states_norm, out.chunks.view())?;
                let fwd = res.head.forward(x.view())?;
                let mut exec = Vec::with_capacity(b);
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let ui = if opts.deterministic_residual {
                        fwd.mean.row(i).to_vec()
                    } else {
                        GaussianHead::sample_row(&fwd, i, rng)
                    };
                    res_logp[i] = fwd.log_prob_row(i, &ui);
                    let mut a = res.apply(&base[i], &ui);
                    a.iter_mut()
                        .for_each(|v| *v = v.clamp(-action_bound, action_bound));
                    u.row_mut(i).assign(&Array1::from(ui));
                    exec.push(a);
                }
                exec
            }
            None => base,
        };
        Ok(ActOutput {
            exec,
            w,
            steer_logp,
            chunks_norm: out.chunks,
            u,
            res_logp,
            denoise,
        })
    }
}

/// One policy decision: an executed action chunk and what PPO needs about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub episode: usize,
    pub z: usize,
    /// Normalized observation the policy acted on.
    pub state_norm: [f64; STATE_DIM],
    pub w: [f64; CHUNK_DIM],
    pub steer_logp: f64,
    pub chunk_norm: [f64; CHUNK_DIM],
    pub u: [f64; CHUNK_DIM],
    pub res_logp: f64,
    pub denoise: Vec<DenoiseStep>,
    /// Executed chunk, normalized with the action statistics.
    pub exec_norm: [f64; CHUNK_DIM],
    /// Normalized observation after the chunk.
    pub next_state_norm: [f64; STATE_DIM],
    /// Normalized true position after the chunk (no observation noise).
    pub next_true_norm: [f64; STATE_DIM],
    /// Mean per-step environment reward over the chunk's slots.
    pub env_reward: f64,
    /// Environment reward of the last executed step.
    pub last_step_reward: f64,
    /// Environment step count after the chunk.
    pub steps_after: usize,
    /// Steps left in the rollout horizon before the chunk, over the episode length.
    pub time_left: f64,
    /// Episode terminated at a goal during this chunk.
    pub done: bool,
    /// Last decision of its episode (terminal or truncated).
    pub end: bool,
    pub log_q: f64,
    pub intrinsic: f64,
    pub reward: f64,
    pub value: f64,
    pub next_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub z: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    /// Grouped by episode, in time order within each episode.
    pub decisions: Vec<Decision>,
    pub episodes: Vec<EpisodeRecord>,
    pub horizon: usize,
}

/// Runs one episode per entry of `zs` in lockstep from the origin, for at
/// most `horizon` environment steps each.
pub fn collect_rollouts(
    stack: &PolicyStack,
    opts: &ActOptions,
    env: &EnvConfig,
    horizon: usize,
    zs: &[usize],
    rngs: &mut [ChaCha8Rng],
) -> Result<RolloutBatch, RlftError> {
    let n = zs.len();
    if rngs.len() != n {
        return Err(RlftError::LengthMismatch("one rng per episode".into()));
    }
    let horizon = horizon.clamp(1, env.max_steps);
    let mut states = vec![EnvState::default(); n];
    let mut obs: Vec<[f64; STATE_DIM]> = states.iter().map(|s| s.position).collect();
    let mut episodes: Vec<EpisodeRecord> = zs
        .iter()
        .map(|&z| EpisodeRecord {
            z,
            trajectory: Trajectory::start([0.0, 0.0]),
        })
        .collect();
    let mut per_episode: Vec<Vec<Decision>> = vec![Vec::new(); n];
    let action_norm = &stack.diffusion.normalizer.action;
    loop {
        let active: Vec<usize> = (0..n)
            .filter(|&i| !states[i].done && states[i].step_count < horizon)
            .collect();
        if active.is_empty() {
            break;
        }
        let s_obs: Vec<[f64; STATE_DIM]> = active.iter().map(|&i| obs[i]).collect();
        let states_norm = stack.normalize_states(&s_obs);
        let active_z: Vec<usize> = active.iter().map(|&i| zs[i]).collect();
        let mut active_rngs: Vec<&mut ChaCha8Rng> = rngs
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| !states[*i].done && states[*i].step_count < horizon)
            .map(|(_, r)| r)
            .collect();
        let act = stack.act(
            states_norm.view(),
            &active_z,
            opts,
            env.action_bound,
            &mut active_rngs,
        )?;
        for (row, &i) in active.iter().enumerate() {
            let chunk = act.exec[row];
            let rng = &mut *active_rngs[row];
            let mut reward_sum = 0.0;
            let mut last = 0.0;
            let mut executed = 0;
            let mut success = false;
            let steps_before = states[i].step_count;
            for a in chunk.chunks_exact(2) {
                if states[i].step_count >= horizon || states[i].done {
                    break;
                }
                let out = step(&states[i], [a[0], a[1]], env, rng)?;
                episodes[i].trajectory.push([a[0], a[1]], &out);
                states[i] = out.state;
                obs[i] = out.observation;
                reward_sum += out.reward;
                last = out.reward;
                executed += 1;
                success = out.success;
            }
            let pad = if success {
                last * (CHUNK_LEN - executed) as f64
            } else {
                0.0
            };
            let end = states[i].done || states[i].step_count >= horizon;
            let to_arr8 = |v: Vec<f64>| -> [f64; CHUNK_DIM] { v.try_into().expect("chunk width") };
            let to_arr2 = |v: Vec<f64>| -> [f64; STATE_DIM] { v.try_into().expect("state width") };
            per_episode[i].push(Decision {
                episode: i,
                z: zs[i],
                state_norm: to_arr2(states_norm.row(row).to_vec()),
                w: to_arr8(act.w.row(row).to_vec()),
                steer_logp: act.steer_logp[row],
                chunk_norm: to_arr8(act.chunks_norm.row(row).to_vec()),
                u: to_arr8(act.u.row(row).to_vec()),
                res_logp: act.res_logp[row],
                denoise: act.denoise.get(row).cloned().unwrap_or_default(),
                exec_norm: to_arr8(action_norm.normalize(&chunk)),
                next_state_norm: to_arr2(stack.diffusion.normalize_state(&obs[i])),
                next_true_norm: to_arr2(stack.diffusion.normalize_state(&states[i].position)),
                env_reward: (reward_sum + pad) / CHUNK_LEN as f64,
                last_step_reward: last,
                steps_after: states[i].step_count,
                time_left: horizon.saturating_sub(steps_before) as f64 / env.max_steps as f64,
                done: success,
                end,
                log_q: 0.0,
                intrinsic: 0.0,
                reward: 0.0,
                value: 0.0,
                next_value: 0.0,
            });
        }
    }
    for ep in &mut episodes {
        ep.trajectory.success = ep
            .trajectory
            .final_state()
            .is_some_and(|p| env.layout.mode_at(p).is_some());
    }
    Ok(RolloutBatch {
        decisions: per_episode.into_iter().flatten().collect(),
        episodes,
        horizon,
    })
}

/// How per-decision rewards are assembled from a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    /// Include the environment reward (fine-tuning phase).
    pub use_env: bool,
    /// Intrinsic weight; 0 disables the intrinsic term.
    pub lambda: f64,
    pub gamma: f64,
    /// Feed the executed chunk to the discriminator next to the state.
    pub state_action: bool,
}

impl RolloutBatch {
    /// Discriminator inputs `s'` (or `s' ++ chunk`) and codes for every decision.
    pub fn discriminator_inputs(&self, state_action: bool) -> (Array2<f64>, Vec<usize>) {
        let width = if state_action { STATE_DIM + CHUNK_DIM } else { STATE_DIM };
        let mut x = Array2::zeros((self.decisions.len(), width));
        for (r, d) in self.decisions.iter().enumerate() {
            let mut row = x.row_mut(r);
            row[0] = d.next_true_norm[0];
            row[1] = d.next_true_norm[1];
            if state_action {
                for j in 0..CHUNK_DIM {
                    row[STATE_DIM + j] = d.exec_norm[j];
                }
            }
        }
        (x, self.decisions.iter().map(|d| d.z).collect())
    }

    /// Fills `log_q`, `intrinsic`, `reward`, `value` and `next_value`.
    ///
    /// A goal-terminated episode is treated as absorbing: the decision that
    /// reaches the goal also collects the discounted per-decision reward of
    /// staying there until the horizon.
    pub fn assign_rewards(
        &mut self,
        critic: &Critic,
        disc: Option<&Discriminator>,
        spec: &RewardSpec,
    ) -> Result<(), RlftError> {
        let n = self.decisions.len();
        if n == 0 {
            return Ok(());
        }
        if let Some(d) = disc {
            let (x, zs) = self.discriminator_inputs(spec.state_action);
            let log_q = d.log_q(x.view(), &zs)?;
            let log_p = d.prior.log_prob();
            for (dec, lq) in self.decisions.iter_mut().zip(log_q) {
                dec.log_q = lq;
                dec.intrinsic = spec.lambda * (lq - log_p);
            }
        }
        let zs: Vec<usize> = self.decisions.iter().map(|d| d.z).collect();
        let time_left: Vec<f64> = self.decisions.iter().map(|d| d.time_left).collect();
        let mut s = Array2::zeros((n, STATE_DIM));
        for (r, d) in self.decisions.iter().enumerate() {
            s[[r, 0]] = d.state_norm[0];
            s[[r, 1]] = d.state_norm[1];
        }
        let values = critic.values(s.view(), &zs, &time_left)?;
        let horizon = self.horizon;
        for r in 0..n {
            let (head, tail) = self.decisions.split_at_mut(r + 1);
            let d = &mut head[r];
            let env = if spec.use_env { d.env_reward } else { 0.0 };
            d.reward = env + d.intrinsic;
            if d.done {
                let remaining = horizon.saturating_sub(d.steps_after).div_ceil(CHUNK_LEN);
                let absorbing = if spec.use_env { d.last_step_reward } else { 0.0 } + d.intrinsic;
                let discount: f64 = (1..=remaining).map(|j| spec.gamma.powi(j as i32)).sum();
                d.reward += absorbing * discount;
            }
            d.value = values[r];
            // The rollout horizon ends a finite-horizon episode, so cutoffs are terminal too.
            d.next_value = if d.end {
                0.0
            } else {
                debug_assert_eq!(tail[0].episode, d.episode);
                values[r + 1]
            };
        }
        Ok(())
    }
}
