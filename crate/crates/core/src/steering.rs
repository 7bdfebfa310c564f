//! Latent prior over behavior codes, the code-conditioned Gaussian steering
//! policy over the diffusion policy's initial noise, and the composed sampler.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{
    gaussian_log_prob, kl_to_standard_normal, ApproxError, GaussianForward, GaussianHead, StdMode,
};
use crate::diffusion::{DiffusionError, DiffusionPolicy, SamplerConfig};
use crate::toyenv::{CHUNK_DIM, STATE_DIM};

#[derive(Debug, thiserror::Error)]
pub enum SteeringError {
    #[error("latent code {z} out of range for K_z = {k_z}")]
    InvalidCode { z: usize, k_z: usize },
    #[error("K_z must be >= 1")]
    EmptyPrior,
    #[error("batch inputs disagree in length")]
    BatchMismatch,
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Uniform categorical prior over `K_z` codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentPrior {
    k_z: usize,
}

impl LatentPrior {
    pub fn new(k_z: usize) -> Result<Self, SteeringError> {
        if k_z == 0 {
            return Err(SteeringError::EmptyPrior);
        }
        Ok(Self { k_z })
    }

    pub fn k_z(&self) -> usize {
        self.k_z
    }

    pub fn log_prob(&self) -> f64 {
        -(self.k_z as f64).ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.k_z)
    }

    pub fn one_hot(&self, z: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.k_z];
        v[z] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub k_z: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub std_floor: f64,
    pub std_mode: StdMode,
    /// Weight of the `KL(pi(w|s,z) || N(0, I))` penalty in the actor loss.
    pub beta_w: f64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            k_z: 4,
            hidden: vec![256, 256, 256],
            init_log_std: 0.5f64.ln(),
            std_floor: 1e-3,
            std_mode: StdMode::Global,
            beta_w: 0.05,
        }
    }
}

/// Gaussian policy `pi(w | s, z)` over the diffusion noise space.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPolicy {
    pub head: GaussianHead,
    pub prior: LatentPrior,
    pub beta_w: f64,
}

impl SteeringPolicy {
    pub fn new<R: Rng + ?Sized>(cfg: &SteeringConfig, rng: &mut R) -> Result<Self, SteeringError> {
        let prior = LatentPrior::new(cfg.k_z)?;
        let head = GaussianHead::new(
            STATE_DIM + cfg.k_z,
            &cfg.hidden,
            CHUNK_DIM,
            cfg.std_mode,
            cfg.init_log_std,
            cfg.std_floor,
            rng,
        )?;
        Ok(Self {
            head,
            prior,
            beta_w: cfg.beta_w,
        })
    }

    pub fn k_z(&self) -> usize {
        self.prior.k_z()
    }

    /// Rows of `normalized state ++ one_hot(z)`.
    pub fn inputs(
        &self,
        states_norm: ArrayView2<f64>,
        zs: &[usize],
    ) -> Result<Array2<f64>, SteeringError> {
        if states_norm.nrows() != zs.len() {
            return Err(SteeringError::BatchMismatch);
        }
        let k = self.k_z();
        let mut x = Array2::zeros((zs.len(), STATE_DIM + k));
        x.slice_mut(s![.., 0..STATE_DIM]).assign(&states_norm);
        for (r, &z) in zs.iter().enumerate() {
            if z >= k {
                return Err(SteeringError::InvalidCode { z, k_z: k });
            }
            x[[r, STATE_DIM + z]] = 1.0;
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        states_norm: ArrayView2<f64>,
        zs: &[usize],
    ) -> Result<GaussianForward, SteeringError> {
        Ok(self.head.forward(self.inputs(states_norm, zs)?.view())?)
    }

    /// Draws one `w` per row (row `i` from `rngs[i]`) with its log-density.
    pub fn sample_w<R: Rng>(
        &self,
        states_norm: ArrayView2<f64>,
        zs: &[usize],
        rngs: &mut [R],
    ) -> Result<(Array2<f64>, Vec<f64>), SteeringError> {
        if rngs.len() != zs.len() {
            return Err(SteeringError::BatchMismatch);
        }
        let fwd = self.forward(states_norm, zs)?;
        let mut w = Array2::zeros((zs.len(), CHUNK_DIM));
        let mut logp = Vec::with_capacity(zs.len());
        for (i, rng) in rngs.iter_mut().enumerate() {
            let sample = GaussianHead::sample_row(&fwd, i, rng);
            logp.push(fwd.log_prob_row(i, &sample));
            w.row_mut(i).assign(&Array1::from(sample));
        }
        Ok((w, logp))
    }

    /// Mean over rows of `beta_w * KL(pi(.|s,z) || N(0, I))`.
    pub fn noise_prior_penalty(&self, fwd: &GaussianForward) -> f64 {
        if self.beta_w == 0.0 {
            return 0.0;
        }
        let b = fwd.mean.nrows();
        let total: f64 = (0..b)
            .map(|i| {
                let mean = fwd.mean.row(i).to_vec();
                kl_to_standard_normal(&mean, &fwd.std_row(i))
            })
            .sum();
        self.beta_w * total / b.max(1) as f64
    }

    /// Gradients of [`Self::noise_prior_penalty`] with respect to the mean
    /// and the (effective) log-std of every row.
    pub fn noise_prior_penalty_grads(&self, fwd: &GaussianForward) -> (Array2<f64>, Array2<f64>) {
        let b = fwd.mean.nrows().max(1) as f64;
        let scale = self.beta_w / b;
        let d_mean = fwd.mean.mapv(|m| scale * m);
        let d_log_std = fwd.log_std.mapv(|l| scale * ((2.0 * l).exp() - 1.0));
        (d_mean, d_log_std)
    }
}

/// Result of sampling the composed policy for a batch of states.
#[derive(Debug, Clone)]
pub struct SteeredAction {
    /// Normalized chunks produced by the diffusion sampler.
    pub chunks: Array2<f64>,
    pub w: Array2<f64>,
    pub log_prob_w: Vec<f64>,
}

/// `w ~ pi(w|s,z)`, then the diffusion sampler seeded with `w`.
pub fn steered_act<R: Rng>(
    diffusion: &DiffusionPolicy,
    steering: &SteeringPolicy,
    states_norm: ArrayView2<f64>,
    zs: &[usize],
    sampler: &SamplerConfig,
    rngs: &mut [R],
) -> Result<SteeredAction, SteeringError> {
    let (w, log_prob_w) = steering.sample_w(states_norm, zs, rngs)?;
    let out = diffusion.sample(states_norm, w.view(), sampler, false, rngs)?;
    Ok(SteeredAction {
        chunks: out.chunks,
        w,
        log_prob_w,
    })
}

/// Log-density of given `w` rows under the steering policy.
pub fn log_prob_w(fwd: &GaussianForward, w: ArrayView2<f64>) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| {
            let mean = fwd.mean.row(i).to_vec();
            let row = w.row(i).to_vec();
            gaussian_log_prob(&row, &mean, &fwd.std_row(i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::HALF_LN_2PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SteeringConfig {
        SteeringConfig {
            hidden: vec![16, 16],
            ..SteeringConfig::default()
        }
    }

    #[test]
    fn single_code_prior_is_constant() {
        let prior = LatentPrior::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| prior.sample(&mut rng) == 0));
        assert_eq!(prior.log_prob(), 0.0);
        assert!(LatentPrior::new(0).is_err());
    }

    #[test]
    fn prior_frequencies_are_uniform() {
        let prior = LatentPrior::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[prior.sample(&mut rng)] += 1;
        }
        let sd = (0.25 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn untrained_policy_has_zero_mean_and_initial_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pol = SteeringPolicy::new(&small(), &mut rng).unwrap();
        let s = Array2::from_elem((3, 2), 0.4);
        let fwd = pol.forward(s.view(), &[0, 1, 3]).unwrap();
        assert!(fwd.mean.iter().all(|&m| m == 0.0));
        for i in 0..3 {
            for sd in fwd.std_row(i) {
                assert!((sd - 0.5).abs() < 1e-12);
            }
            let at_mean = fwd.log_prob_row(i, &[0.0; CHUNK_DIM]);
            let expected = CHUNK_DIM as f64 * (-HALF_LN_2PI - 0.5f64.ln());
            assert!((at_mean - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pol = SteeringPolicy::new(&small(), &mut rng).unwrap();
        let s = Array2::zeros((1, 2));
        assert!(matches!(pol.forward(s.view(), &[4]), Err(SteeringError::InvalidCode { .. })));
    }

    #[test]
    fn penalty_zero_at_standard_normal_and_half_norm_when_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SteeringConfig {
            init_log_std: 0.0,
            beta_w: 1.0,
            ..small()
        };
        let mut pol = SteeringPolicy::new(&cfg, &mut rng).unwrap();
        let s = Array2::zeros((2, 2));
        let fwd = pol.forward(s.view(), &[0, 1]).unwrap();
        assert!(pol.noise_prior_penalty(&fwd).abs() < 1e-15);

        // shift the mean through the output bias
        let mut t = pol.head.net.tensors_mut();
        let bias = t.pop().unwrap();
        bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        drop(t);
        let fwd = pol.forward(s.view(), &[0, 1]).unwrap();
        let mu2: f64 = (0..CHUNK_DIM).map(|i| (0.1 * i as f64).powi(2)).sum();
        assert!((pol.noise_prior_penalty(&fwd) - 0.5 * mu2).abs() < 1e-12);
    }
}
