//! The pre-trained generative policy: a noise-prediction MLP over action
//! chunks, trained by behavior cloning under a cosine schedule and sampled
//! with DDIM or full DDPM from a caller-supplied initial noise.

mod sampler;
mod schedule;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{Adam, AdamConfig, ApproxError, Mlp, MlpCache, MlpGrads};
use crate::toyenv::{ChunkNormalizer, DemoDataset, CHUNK_DIM, STATE_DIM};

pub use sampler::{
    ddim_transition, DdimSpacing, DenoiseStep, SampleBatch, SamplerConfig, SamplerKind,
    Transition,
};
pub use schedule::{cosine_schedule, NoiseSchedule};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid diffusion config: {0}")]
    InvalidConfig(String),
    #[error("batch inputs disagree in length")]
    BatchMismatch,
    #[error("empty demo dataset")]
    EmptyDataset,
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub k_diff: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Bound on the implied clean chunk (normalized units) inside the sampler.
    pub x0_clip: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            k_diff: 20,
            hidden: vec![512, 512, 512],
            time_embed_dim: 16,
            epochs: 1000,
            batch_size: 256,
            learning_rate: 3e-4,
            x0_clip: 3.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.k_diff < 2 {
            return Err(DiffusionError::InvalidConfig("k_diff must be >= 2".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(DiffusionError::InvalidConfig(
                "time_embed_dim must be a positive even number".into(),
            ));
        }
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(DiffusionError::InvalidConfig(
                "batch_size and hidden widths must be positive".into(),
            ));
        }
        if !(self.x0_clip > 0.0) || !(self.learning_rate > 0.0) {
            return Err(DiffusionError::InvalidConfig(
                "x0_clip and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        STATE_DIM + CHUNK_DIM + self.time_embed_dim
    }
}

/// Sinusoidal embedding: `sin(k f_i)` then `cos(k f_i)`, geometric `f_i`.
pub fn time_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (k as f64 * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub config: DiffusionConfig,
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub normalizer: ChunkNormalizer,
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(
        config: DiffusionConfig,
        normalizer: ChunkNormalizer,
        rng: &mut R,
    ) -> Result<Self, DiffusionError> {
        config.validate()?;
        let mut widths = vec![config.input_dim()];
        widths.extend_from_slice(&config.hidden);
        widths.push(CHUNK_DIM);
        let net = Mlp::new(&widths, rng)?;
        Self::from_parts(config, net, normalizer)
    }

    pub fn from_parts(
        config: DiffusionConfig,
        net: Mlp,
        normalizer: ChunkNormalizer,
    ) -> Result<Self, DiffusionError> {
        config.validate()?;
        if net.input_dim() != config.input_dim() || net.output_dim() != CHUNK_DIM {
            return Err(DiffusionError::InvalidConfig(
                "network shape does not match config".into(),
            ));
        }
        let schedule = cosine_schedule(config.k_diff)?;
        Ok(Self {
            config,
            net,
            schedule,
            normalizer,
        })
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        self.normalizer.state.normalize(s)
    }

    fn inputs(
        &self,
        states_norm: ArrayView2<f64>,
        x: ArrayView2<f64>,
        ks: &[usize],
    ) -> Result<Array2<f64>, DiffusionError> {
        let b = x.nrows();
        if states_norm.nrows() != b || ks.len() != b {
            return Err(DiffusionError::BatchMismatch);
        }
        let te = self.config.time_embed_dim;
        let mut input = Array2::zeros((b, self.config.input_dim()));
        input.slice_mut(s![.., 0..STATE_DIM]).assign(&states_norm);
        input
            .slice_mut(s![.., STATE_DIM..STATE_DIM + CHUNK_DIM])
            .assign(&x);
        let mut emb_cache: Vec<Option<Vec<f64>>> = vec![None; self.config.k_diff];
        for (r, &k) in ks.iter().enumerate() {
            let emb = emb_cache[k].get_or_insert_with(|| time_embedding(k, te));
            input
                .slice_mut(s![r, STATE_DIM + CHUNK_DIM..])
                .assign(&ndarray::ArrayView1::from(emb.as_slice()));
        }
        Ok(input)
    }

    /// Noise prediction for normalized states, noisy chunks and timesteps.
    pub fn predict_eps(
        &self,
        states_norm: ArrayView2<f64>,
        x: ArrayView2<f64>,
        ks: &[usize],
    ) -> Result<Array2<f64>, DiffusionError> {
        Ok(self.net.predict(self.inputs(states_norm, x, ks)?.view())?)
    }

    pub fn forward_eps(
        &self,
        states_norm: ArrayView2<f64>,
        x: ArrayView2<f64>,
        ks: &[usize],
    ) -> Result<(Array2<f64>, MlpCache), DiffusionError> {
        Ok(self.net.forward(self.inputs(states_norm, x, ks)?.view())?)
    }

    /// Denoising loss `mean_i ||eps_hat_i - eps_i||^2` and its gradient for
    /// one minibatch of normalized `(state, clean chunk)` rows.
    pub fn bc_loss_and_grad<R: Rng + ?Sized>(
        &self,
        states_norm: ArrayView2<f64>,
        chunks_norm: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<(f64, MlpGrads), DiffusionError> {
        let b = chunks_norm.nrows();
        if b == 0 || states_norm.nrows() != b {
            return Err(DiffusionError::BatchMismatch);
        }
        let ks: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.config.k_diff)).collect();
        let eps: Array2<f64> =
            Array2::from_shape_simple_fn((b, CHUNK_DIM), || rng.sample(StandardNormal));
        let mut noisy = chunks_norm.to_owned();
        for (r, &k) in ks.iter().enumerate() {
            let ab = self.schedule.alpha_bar(k);
            let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mut row = noisy.row_mut(r);
            row.zip_mut_with(&eps.row(r), |a, &e| *a = sa * *a + s1a * e);
        }
        let (pred, cache) = self.forward_eps(states_norm, noisy.view(), &ks)?;
        let diff = &pred - &eps;
        let loss = diff.mapv(|d| d * d).sum() / b as f64;
        let grad_out = diff.mapv(|d| 2.0 * d / b as f64);
        let (grads, _) = self.net.backward(&cache, grad_out.view())?;
        Ok((loss, grads))
    }

    pub fn bc_train_step<R: Rng + ?Sized>(
        &mut self,
        adam: &mut Adam,
        states_norm: ArrayView2<f64>,
        chunks_norm: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<f64, DiffusionError> {
        let (loss, grads) = self.bc_loss_and_grad(states_norm, chunks_norm, rng)?;
        adam.step(self.net.tensors_mut(), grads.tensors())?;
        Ok(loss)
    }

    pub fn new_adam(&self) -> Adam {
        Adam::for_tensors(AdamConfig::with_lr(self.config.learning_rate), &self.net.tensors())
    }
}

/// Behavior-clones a fresh policy on `dataset`. Returns the policy and the
/// mean training loss of every epoch.
pub fn pretrain<R: Rng + ?Sized>(
    dataset: &DemoDataset,
    config: DiffusionConfig,
    rng: &mut R,
) -> Result<(DiffusionPolicy, Vec<f64>), DiffusionError> {
    if dataset.num_samples() == 0 {
        return Err(DiffusionError::EmptyDataset);
    }
    let epochs = config.epochs;
    let batch = config.batch_size;
    let mut policy = DiffusionPolicy::new(config, dataset.normalizer.clone(), rng)?;
    let mut adam = policy.new_adam();
    let (states, chunks) = dataset.normalized_arrays();
    let n = states.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let s = states.select(Axis(0), idx);
            let a = chunks.select(Axis(0), idx);
            total += policy.bc_train_step(&mut adam, s.view(), a.view(), rng)? * idx.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok((policy, history))
}
