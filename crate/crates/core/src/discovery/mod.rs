//! The inference model `q(z | s)`, the intrinsic reward built from it, the
//! variational mutual-information estimate, and an enumerable conditional-MI
//! oracle.

mod oracle;

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{log_softmax, Adam, AdamConfig, ApproxError, Mlp};
use crate::steering::LatentPrior;

pub use oracle::{
    conditional_mi_enumerate, mc_conditional_mi, McMiConfig, McMiEstimate, TabularLatentPolicy,
};

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("empty rollout set")]
    EmptyRollouts,
    #[error("latent code {z} out of range for K_z = {k_z}")]
    InvalidCode { z: usize, k_z: usize },
    #[error("batch inputs disagree in length")]
    BatchMismatch,
    #[error("invalid toy policy: {0}")]
    InvalidToy(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    pub hidden: Vec<usize>,
    /// Std of the Gaussian noise added to discriminator inputs while training.
    pub input_noise_std: f64,
    pub learning_rate: f64,
    /// Intrinsic reward weight `lambda`.
    pub lambda: f64,
    /// Discriminator learning-rate multiplier during fine-tuning.
    pub finetune_lr_scale: f64,
    /// Minibatch steps on the epoch's `(s', z)` pairs per epoch.
    pub updates_per_epoch: usize,
    pub batch_size: usize,
    /// Feed the executed action chunk to the discriminator next to the state.
    pub state_action: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            input_noise_std: 1.0,
            learning_rate: 3e-3,
            lambda: 0.1,
            finetune_lr_scale: 0.05,
            updates_per_epoch: 10,
            batch_size: 256,
            state_action: false,
        }
    }
}

/// Categorical classifier over latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
    pub prior: LatentPrior,
    pub input_noise_std: f64,
    pub adam: Adam,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        prior: LatentPrior,
        cfg: &DiscoveryConfig,
        rng: &mut R,
    ) -> Result<Self, DiscoveryError> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(prior.k_z());
        let mut net = Mlp::new(&widths, rng)?;
        net.zero_output_layer();
        let adam = Adam::for_tensors(AdamConfig::with_lr(cfg.learning_rate), &net.tensors());
        Ok(Self {
            net,
            prior,
            input_noise_std: cfg.input_noise_std,
            adam,
        })
    }

    pub fn k_z(&self) -> usize {
        self.prior.k_z()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Row-wise log-softmax of the logits.
    pub fn log_probs(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, DiscoveryError> {
        let mut logits = self.net.predict(inputs)?;
        for mut row in logits.rows_mut() {
            let lp = log_softmax(row.as_slice().expect("contiguous"));
            row.assign(&ndarray::ArrayView1::from(&lp));
        }
        Ok(logits)
    }

    /// `log q(z_i | x_i)` for every row, without input noise.
    pub fn log_q(&self, inputs: ArrayView2<f64>, zs: &[usize]) -> Result<Vec<f64>, DiscoveryError> {
        if inputs.nrows() != zs.len() {
            return Err(DiscoveryError::BatchMismatch);
        }
        let lp = self.log_probs(inputs)?;
        zs.iter()
            .enumerate()
            .map(|(i, &z)| {
                if z >= self.k_z() {
                    Err(DiscoveryError::InvalidCode { z, k_z: self.k_z() })
                } else {
                    Ok(lp[[i, z]])
                }
            })
            .collect()
    }

    /// `lambda * (log q(z|s') - log p(z))` per row.
    pub fn intrinsic_rewards(
        &self,
        inputs: ArrayView2<f64>,
        zs: &[usize],
        lambda: f64,
    ) -> Result<Vec<f64>, DiscoveryError> {
        let lp = self.prior.log_prob();
        Ok(self
            .log_q(inputs, zs)?
            .into_iter()
            .map(|l| lambda * (l - lp))
            .collect())
    }

    /// Mean NLL without input noise.
    pub fn nll(&self, inputs: ArrayView2<f64>, zs: &[usize]) -> Result<f64, DiscoveryError> {
        let lq = self.log_q(inputs, zs)?;
        if lq.is_empty() {
            return Err(DiscoveryError::EmptyRollouts);
        }
        Ok(-lq.iter().sum::<f64>() / lq.len() as f64)
    }

    /// One Adam step on the noisy-input NLL; returns that NLL.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        inputs: ArrayView2<f64>,
        zs: &[usize],
        rng: &mut R,
    ) -> Result<f64, DiscoveryError> {
        let b = zs.len();
        if inputs.nrows() != b || b == 0 {
            return Err(DiscoveryError::BatchMismatch);
        }
        let mut x = inputs.to_owned();
        if self.input_noise_std > 0.0 {
            let sd = self.input_noise_std;
            x.mapv_inplace(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
        }
        let (logits, cache) = self.net.forward(x.view())?;
        let mut grad = Array2::zeros(logits.raw_dim());
        let mut nll = 0.0;
        for (i, (row, &z)) in logits.axis_iter(Axis(0)).zip(zs).enumerate() {
            if z >= self.k_z() {
                return Err(DiscoveryError::InvalidCode { z, k_z: self.k_z() });
            }
            let lp = log_softmax(row.as_slice().expect("contiguous"));
            nll -= lp[z];
            for (j, l) in lp.iter().enumerate() {
                let target = if j == z { 1.0 } else { 0.0 };
                grad[[i, j]] = (l.exp() - target) / b as f64;
            }
        }
        let (grads, _) = self.net.backward(&cache, grad.view())?;
        self.adam.step(self.net.tensors_mut(), grads.tensors())?;
        Ok(nll / b as f64)
    }
}

/// Variational lower bound `mean(log q(z|s) - log p(z))` over visited states.
pub fn mi_estimate(log_q: &[f64], prior: &LatentPrior) -> Result<f64, DiscoveryError> {
    if log_q.is_empty() {
        return Err(DiscoveryError::EmptyRollouts);
    }
    Ok(log_q.iter().sum::<f64>() / log_q.len() as f64 - prior.log_prob())
}

/// One row of the MI probe table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiProbeRow {
    pub dataset_modes: usize,
    #[serde(rename = "K_z")]
    pub k_z: usize,
    pub mi_estimate: f64,
    pub nll: f64,
    pub seed: u64,
}

pub fn write_mi_probe_csv<W: Write>(rows: &[MiProbeRow], writer: W) -> Result<(), DiscoveryError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
