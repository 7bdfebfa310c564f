use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rollout::{collect_rollouts, ActOptions, PolicyStack, RewardSpec, RolloutBatch};
use super::{
    clipped_surrogate, compute_gae, gaussian_log_prob_grads, normalize_advantages, Critic,
    PpoConfig, ResidualPolicy, RlftError,
};
use crate::approx::{gaussian_log_prob, Adam, AdamConfig, GaussianForward};
use crate::diffusion::{ddim_transition, SamplerConfig};
use crate::discovery::Discriminator;
use crate::seeding::{stream, Purpose};
use crate::steering::log_prob_w;
use crate::toyenv::{EnvConfig, CHUNK_DIM, STATE_DIM};

/// Loss statistics of one PPO update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean actor loss over minibatches, summed over trained factors.
    pub actor_loss: f64,
    pub value_loss: f64,
    /// Largest `|ratio - 1|` in the first minibatch, before any parameter step.
    pub first_minibatch_max_ratio_dev: f64,
    /// Fraction of surrogate terms on the clipped branch.
    pub clip_fraction: f64,
    /// Denoiser minibatch steps skipped for an exploding ratio.
    pub aborted_minibatches: usize,
}

/// Everything the PPO update mutates: the policy stack, the critic, and one
/// optimizer per trainable factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub stack: PolicyStack,
    pub critic: Critic,
    pub ppo: PpoConfig,
    /// Sampler for rollouts; DPPO needs a stochastic one.
    pub sampler: SamplerConfig,
    pub train_steering: bool,
    pub train_residual: bool,
    /// Number of final denoise transitions treated as actions (0: frozen).
    pub dppo_last: usize,
    pub steering_adam: Option<Adam>,
    pub residual_adam: Option<Adam>,
    pub diffusion_adam: Option<Adam>,
    pub critic_adam: Adam,
}

struct FactorOut {
    loss: f64,
    clipped: usize,
    terms: usize,
    max_dev: f64,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(
        stack: PolicyStack,
        ppo: PpoConfig,
        sampler: SamplerConfig,
        dppo_last: usize,
        rng: &mut R,
    ) -> Result<Self, RlftError> {
        ppo.validate()?;
        sampler.validate(stack.diffusion.schedule.len())?;
        let critic = Critic::new(stack.k_z(), &ppo.critic_hidden, rng)?;
        let adam_cfg = |lr: f64| AdamConfig {
            max_grad_norm: ppo.max_grad_norm,
            ..AdamConfig::with_lr(lr)
        };
        let critic_adam = Adam::for_tensors(adam_cfg(ppo.learning_rate), &critic.net.tensors());
        let steering_adam = stack
            .steering
            .as_ref()
            .map(|s| Adam::for_tensors(adam_cfg(ppo.learning_rate), &s.head.tensors()));
        let residual_adam = stack
            .residual
            .as_ref()
            .map(|r| Adam::for_tensors(adam_cfg(ppo.learning_rate), &r.head.tensors()));
        let diffusion_adam = (dppo_last > 0).then(|| {
            Adam::for_tensors(
                adam_cfg(ppo.diffusion_learning_rate),
                &stack.diffusion.net.tensors(),
            )
        });
        if dppo_last > 0 && sampler.timesteps(stack.diffusion.schedule.len()).len() < dppo_last {
            return Err(RlftError::InvalidConfig(
                "more trainable denoise steps than sampler steps".into(),
            ));
        }
        Ok(Self {
            train_steering: stack.steering.is_some(),
            train_residual: stack.residual.is_some(),
            stack,
            critic,
            ppo,
            sampler,
            dppo_last,
            steering_adam,
            residual_adam,
            diffusion_adam,
            critic_adam,
        })
    }

    /// Adds a residual head and its optimizer, e.g. at the phase switch.
    pub fn attach_residual(&mut self, residual: ResidualPolicy) {
        self.residual_adam = Some(Adam::for_tensors(
            self.adam_config(self.ppo.learning_rate),
            &residual.head.tensors(),
        ));
        self.stack.residual = Some(residual);
        self.train_residual = true;
    }

    /// Makes the last `last` transitions of `sampler` trainable actions.
    pub fn enable_dppo(&mut self, sampler: SamplerConfig, last: usize) -> Result<(), RlftError> {
        sampler.validate(self.stack.diffusion.schedule.len())?;
        if last == 0 || sampler.timesteps(self.stack.diffusion.schedule.len()).len() < last {
            return Err(RlftError::InvalidConfig(
                "trainable denoise steps must be in 1..=sampler steps".into(),
            ));
        }
        self.diffusion_adam = Some(Adam::for_tensors(
            self.adam_config(self.ppo.diffusion_learning_rate),
            &self.stack.diffusion.net.tensors(),
        ));
        self.sampler = sampler;
        self.dppo_last = last;
        Ok(())
    }

    fn adam_config(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            max_grad_norm: self.ppo.max_grad_norm,
            ..AdamConfig::with_lr(lr)
        }
    }

    pub fn act_options(&self) -> ActOptions {
        ActOptions {
            record_last: self.dppo_last,
            ..ActOptions::new(self.sampler)
        }
    }

    /// Rolls out one epoch of `episodes` episodes with codes drawn from the
    /// prior. Episode `i` of epoch `e` owns the stream `(Rollout, [e, i])`.
    pub fn rollout(
        &self,
        env: &EnvConfig,
        horizon: usize,
        episodes: usize,
        epoch: u64,
        master_seed: u64,
    ) -> Result<RolloutBatch, RlftError> {
        let k_z = self.stack.k_z();
        let mut rngs: Vec<ChaCha8Rng> = (0..episodes as u64)
            .map(|i| stream(master_seed, Purpose::Rollout, &[epoch, i]))
            .collect();
        let zs: Vec<usize> = rngs.iter_mut().map(|r| r.random_range(0..k_z)).collect();
        collect_rollouts(&self.stack, &self.act_options(), env, horizon, &zs, &mut rngs)
    }

    /// Rollout, reward assignment and one PPO update.
    #[allow(clippy::too_many_arguments)]
    pub fn train_epoch(
        &mut self,
        env: &EnvConfig,
        horizon: usize,
        episodes: usize,
        epoch: u64,
        master_seed: u64,
        disc: Option<&Discriminator>,
        reward: &RewardSpec,
    ) -> Result<(RolloutBatch, UpdateStats), RlftError> {
        let mut batch = self.rollout(env, horizon, episodes, epoch, master_seed)?;
        batch.assign_rewards(&self.critic, disc, reward)?;
        let mut rng = stream(master_seed, Purpose::Update, &[epoch]);
        let stats = self.update(&batch, &mut rng)?;
        Ok((batch, stats))
    }

    /// Clipped-surrogate PPO over the batch. Every trainable factor of a
    /// decision (steering draw, residual draw, each trainable denoise
    /// transition) gets its own ratio and the decision's advantage.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &RolloutBatch,
        rng: &mut R,
    ) -> Result<UpdateStats, RlftError> {
        let d = &batch.decisions;
        let n = d.len();
        if n == 0 {
            return Ok(UpdateStats::default());
        }
        let rewards: Vec<f64> = d.iter().map(|x| x.reward).collect();
        let values: Vec<f64> = d.iter().map(|x| x.value).collect();
        let next_values: Vec<f64> = d.iter().map(|x| x.next_value).collect();
        let dones: Vec<bool> = d.iter().map(|x| x.done).collect();
        let ends: Vec<bool> = d.iter().map(|x| x.end).collect();
        let (mut adv, returns) = compute_gae(
            &rewards,
            &values,
            &next_values,
            &dones,
            &ends,
            self.ppo.gamma,
            self.ppo.gae_lambda,
        )?;
        normalize_advantages(&mut adv);

        let mut stats = UpdateStats::default();
        let mut order: Vec<usize> = (0..n).collect();
        let (mut minibatches, mut clipped, mut terms) = (0usize, 0usize, 0usize);
        for _ in 0..self.ppo.update_epochs {
            order.shuffle(rng);
            for mb in order.chunks(self.ppo.minibatch_size) {
                minibatches += 1;
                stats.value_loss += self.critic_step(batch, mb, &returns)?;
                let mut outs = Vec::new();
                if self.train_steering && self.stack.steering.is_some() {
                    outs.push(self.steering_step(batch, mb, &adv)?);
                }
                if self.train_residual && self.stack.residual.is_some() {
                    outs.push(self.residual_step(batch, mb, &adv)?);
                }
                if self.dppo_last > 0 {
                    match self.denoise_step(batch, mb, &adv)? {
                        Some(o) => outs.push(o),
                        None => stats.aborted_minibatches += 1,
                    }
                }
                for o in outs {
                    stats.actor_loss += o.loss;
                    clipped += o.clipped;
                    terms += o.terms;
                    if minibatches == 1 {
                        stats.first_minibatch_max_ratio_dev = stats.first_minibatch_max_ratio_dev.max(o.max_dev);
                    }
                }
            }
        }
        stats.actor_loss /= minibatches as f64;
        stats.value_loss /= minibatches as f64;
        stats.clip_fraction = if terms > 0 { clipped as f64 / terms as f64 } else { 0.0 };
        Ok(stats)
    }

    fn states(batch: &RolloutBatch, mb: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut s = Array2::zeros((mb.len(), STATE_DIM));
        let mut zs = Vec::with_capacity(mb.len());
        for (r, &i) in mb.iter().enumerate() {
            let d = &batch.decisions[i];
            s[[r, 0]] = d.state_norm[0];
            s[[r, 1]] = d.state_norm[1];
            zs.push(d.z);
        }
        (s, zs)
    }

    fn critic_step(&mut self, batch: &RolloutBatch, mb: &[usize], returns: &[f64]) -> Result<f64, RlftError> {
        let (s, zs) = Self::states(batch, mb);
        let time_left: Vec<f64> = mb.iter().map(|&i| batch.decisions[i].time_left).collect();
        let x = self.critic.inputs(s.view(), &zs, &time_left)?;
        let (out, cache) = self.critic.net.forward(x.view())?;
        let b = mb.len() as f64;
        let c = self.ppo.value_coef;
        let mut grad = Array2::zeros((mb.len(), 1));
        let mut loss = 0.0;
        for (r, &i) in mb.iter().enumerate() {
            let diff = out[[r, 0]] - returns[i];
            loss += c * diff * diff / b;
            grad[[r, 0]] = 2.0 * c * diff / b;
        }
        if !loss.is_finite() {
            return Err(RlftError::NonFiniteLoss("critic"));
        }
        let (grads, _) = self.critic.net.backward(&cache, grad.view())?;
        self.critic_adam.step(self.critic.net.tensors_mut(), grads.tensors())?;
        Ok(loss)
    }

    /// Surrogate loss and per-row dLoss/dlogp for a Gaussian factor.
    fn surrogate(&self, new_lp: &[f64], old_lp: &[f64], adv: &[f64]) -> (f64, Vec<f64>, FactorOut) {
        let b = new_lp.len() as f64;
        let mut g = Vec::with_capacity(new_lp.len());
        let mut out = FactorOut {
            loss: 0.0,
            clipped: 0,
            terms: new_lp.len(),
            max_dev: 0.0,
        };
        for ((&nl, &ol), &a) in new_lp.iter().zip(old_lp).zip(adv) {
            let ratio = (nl - ol).exp();
            out.max_dev = out.max_dev.max((ratio - 1.0).abs());
            let (obj, dobj) = clipped_surrogate(ratio, a, self.ppo.clip_eps);
            if dobj == 0.0 && ratio != 0.0 && a != 0.0 {
                out.clipped += 1;
            }
            out.loss -= obj / b;
            g.push(-dobj / b);
        }
        (out.loss, g, out)
    }

    /// Adds the entropy bonus gradient: loss -= c_H * mean_i sum_d log_std.
    fn entropy_terms(&self, fwd: &GaussianForward, d_log_std: &mut Array2<f64>) -> f64 {
        let b = fwd.log_std.nrows() as f64;
        let c = self.ppo.entropy_coef;
        d_log_std.mapv_inplace(|v| v - c / b);
        let dim = fwd.log_std.ncols() as f64;
        let ent = fwd.log_std.sum() / b + 0.5 * dim * (1.0 + (2.0 * std::f64::consts::PI).ln());
        -c * ent
    }

    fn steering_step(&mut self, batch: &RolloutBatch, mb: &[usize], adv: &[f64]) -> Result<FactorOut, RlftError> {
        let steering = self.stack.steering.as_ref().expect("checked");
        let (s, zs) = Self::states(batch, mb);
        let fwd = steering.forward(s.view(), &zs)?;
        let mut w = Array2::zeros((mb.len(), CHUNK_DIM));
        for (r, &i) in mb.iter().enumerate() {
            w.row_mut(r).assign(&Array1::from(batch.decisions[i].w.to_vec()));
        }
        let new_lp = log_prob_w(&fwd, w.view());
        let old_lp: Vec<f64> = mb.iter().map(|&i| batch.decisions[i].steer_logp).collect();
        let a: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
        let (mut loss, g, mut out) = self.surrogate(&new_lp, &old_lp, &a);
        let (mut d_mean, mut d_log_std) = gaussian_log_prob_grads(&fwd, w.view(), &g);
        loss += self.entropy_terms(&fwd, &mut d_log_std);
        let (pm, pl) = steering.noise_prior_penalty_grads(&fwd);
        loss += steering.noise_prior_penalty(&fwd);
        d_mean += &pm;
        d_log_std += &pl;
        if !loss.is_finite() {
            return Err(RlftError::NonFiniteLoss("steering actor"));
        }
        let grads = steering.head.backward(&fwd, d_mean.view(), d_log_std.view())?;
        let steering = self.stack.steering.as_mut().expect("checked");
        self.steering_adam
            .as_mut()
            .expect("steering optimizer")
            .step(steering.head.tensors_mut(), grads.tensors())?;
        out.loss = loss;
        Ok(out)
    }

    fn residual_step(&mut self, batch: &RolloutBatch, mb: &[usize], adv: &[f64]) -> Result<FactorOut, RlftError> {
        let residual = self.stack.residual.as_ref().expect("checked");
        let (s, _) = Self::states(batch, mb);
        let mut chunks = Array2::zeros((mb.len(), CHUNK_DIM));
        let mut u = Array2::zeros((mb.len(), CHUNK_DIM));
        for (r, &i) in mb.iter().enumerate() {
            chunks.row_mut(r).assign(&Array1::from(batch.decisions[i].chunk_norm.to_vec()));
            u.row_mut(r).assign(&Array1::from(batch.decisions[i].u.to_vec()));
        }
        let x = ResidualPolicy::inputs(s.view(), chunks.view())?;
        let fwd = residual.head.forward(x.view())?;
        let new_lp: Vec<f64> = (0..mb.len())
            .map(|r| fwd.log_prob_row(r, u.row(r).as_slice().expect("contiguous")))
            .collect();
        let old_lp: Vec<f64> = mb.iter().map(|&i| batch.decisions[i].res_logp).collect();
        let a: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
        let (mut loss, g, mut out) = self.surrogate(&new_lp, &old_lp, &a);
        let (d_mean, mut d_log_std) = gaussian_log_prob_grads(&fwd, u.view(), &g);
        loss += self.entropy_terms(&fwd, &mut d_log_std);
        if !loss.is_finite() {
            return Err(RlftError::NonFiniteLoss("residual actor"));
        }
        let grads = residual.head.backward(&fwd, d_mean.view(), d_log_std.view())?;
        let residual = self.stack.residual.as_mut().expect("checked");
        self.residual_adam
            .as_mut()
            .expect("residual optimizer")
            .step(residual.head.tensors_mut(), grads.tensors())?;
        out.loss = loss;
        Ok(out)
    }

    /// Returns `None` when a ratio exceeds `max_ratio` and the step is skipped.
    fn denoise_step(
        &mut self,
        batch: &RolloutBatch,
        mb: &[usize],
        adv: &[f64],
    ) -> Result<Option<FactorOut>, RlftError> {
        let rows: Vec<(usize, usize)> = mb
            .iter()
            .flat_map(|&i| (0..batch.decisions[i].denoise.len()).map(move |j| (i, j)))
            .collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let m = rows.len();
        let mut s = Array2::zeros((m, STATE_DIM));
        let mut x = Array2::zeros((m, CHUNK_DIM));
        let mut ks = Vec::with_capacity(m);
        for (r, &(i, j)) in rows.iter().enumerate() {
            let d = &batch.decisions[i];
            s[[r, 0]] = d.state_norm[0];
            s[[r, 1]] = d.state_norm[1];
            x.row_mut(r).assign(&Array1::from(d.denoise[j].x.clone()));
            ks.push(d.denoise[j].k);
        }
        let policy = &self.stack.diffusion;
        let (eps, cache) = policy.forward_eps(s.view(), x.view(), &ks)?;
        let eta = self.sampler.eta();
        let mut new_lp = Vec::with_capacity(m);
        let mut old_lp = Vec::with_capacity(m);
        let mut dlogp_deps = Array2::zeros((m, CHUNK_DIM));
        for (r, &(i, j)) in rows.iter().enumerate() {
            let rec = &batch.decisions[i].denoise[j];
            let t = ddim_transition(
                &policy.schedule,
                rec.k,
                rec.prev,
                eta,
                policy.config.x0_clip,
                &rec.x,
                eps.row(r).as_slice().expect("contiguous"),
            );
            let std = vec![rec.std; CHUNK_DIM];
            new_lp.push(gaussian_log_prob(&rec.next, &t.mean, &std));
            old_lp.push(rec.log_prob().ok_or_else(|| {
                RlftError::InvalidConfig("deterministic denoise transition recorded as action".into())
            })?);
            let var = rec.std * rec.std;
            for c in 0..CHUNK_DIM {
                dlogp_deps[[r, c]] = (rec.next[c] - t.mean[c]) / var * t.dmean_deps[c];
            }
        }
        if new_lp
            .iter()
            .zip(&old_lp)
            .any(|(n, o)| !((n - o).exp() <= self.ppo.max_ratio))
        {
            return Ok(None);
        }
        let a: Vec<f64> = rows.iter().map(|&(i, _)| adv[i]).collect();
        let (loss, g, out) = self.surrogate(&new_lp, &old_lp, &a);
        if !loss.is_finite() {
            return Err(RlftError::NonFiniteLoss("denoiser"));
        }
        for (r, gr) in g.iter().enumerate() {
            dlogp_deps.row_mut(r).mapv_inplace(|v| v * gr);
        }
        let (grads, _) = policy.net.backward(&cache, dlogp_deps.view())?;
        self.diffusion_adam
            .as_mut()
            .expect("diffusion optimizer")
            .step(self.stack.diffusion.net.tensors_mut(), grads.tensors())?;
        Ok(Some(out))
    }
}

/// Plain (unregularized) fine-tuning loop used by the baseline adapters.
fn plain_finetune(
    learner: &mut Learner,
    env: &EnvConfig,
    epochs: usize,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<UpdateStats>, RlftError> {
    let spec = RewardSpec {
        use_env: true,
        lambda: 0.0,
        gamma: learner.ppo.gamma,
        state_action: false,
    };
    (0..epochs)
        .map(|e| {
            learner
                .train_epoch(env, env.max_steps, episodes, e as u64, master_seed, None, &spec)
                .map(|(_, s)| s)
        })
        .collect()
}

/// PPO over the steering noise with the diffusion policy frozen (η = 0).
pub fn finetune_steering(
    learner: &mut Learner,
    env: &EnvConfig,
    epochs: usize,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<UpdateStats>, RlftError> {
    if learner.stack.steering.is_none() {
        return Err(RlftError::InvalidConfig("steering adapter needs a steering policy".into()));
    }
    learner.train_steering = true;
    learner.train_residual = false;
    learner.dppo_last = 0;
    plain_finetune(learner, env, epochs, episodes, master_seed)
}

/// PPO over the tanh-bounded residual with the diffusion policy frozen.
pub fn finetune_residual(
    learner: &mut Learner,
    env: &EnvConfig,
    epochs: usize,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<UpdateStats>, RlftError> {
    if learner.stack.residual.is_none() {
        return Err(RlftError::InvalidConfig("residual adapter needs a residual policy".into()));
    }
    learner.train_residual = true;
    learner.train_steering = false;
    learner.dppo_last = 0;
    plain_finetune(learner, env, epochs, episodes, master_seed)
}

/// PPO over the last `learner.dppo_last` denoise transitions.
pub fn finetune_dppo(
    learner: &mut Learner,
    env: &EnvConfig,
    epochs: usize,
    episodes: usize,
    master_seed: u64,
) -> Result<Vec<UpdateStats>, RlftError> {
    if learner.dppo_last == 0 || learner.diffusion_adam.is_none() {
        return Err(RlftError::InvalidConfig("DPPO needs trainable denoise steps".into()));
    }
    learner.train_steering = false;
    learner.train_residual = false;
    plain_finetune(learner, env, epochs, episodes, master_seed)
}
