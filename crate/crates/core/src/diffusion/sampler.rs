use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, DiffusionPolicy, NoiseSchedule};
use crate::approx::gaussian_log_prob;
use crate::toyenv::CHUNK_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Strided DDIM over `ddim_steps` timesteps.
    Ddim,
    /// Ancestral sampling through every training timestep.
    DdpmFull,
}

/// Which strided subset of training timesteps DDIM visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdimSpacing {
    /// `{(n-1)s, ..., s, 0}` with stride `s = K / n`; two of 20 gives `{10, 0}`.
    Leading,
    /// `{K-1, K-1-s, ...}`; two of 20 gives `{19, 9}`.
    Trailing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub ddim_steps: usize,
    pub spacing: DdimSpacing,
    pub eta: f64,
    /// Lower bound on every transition std; 0 leaves the sampler untouched.
    pub min_std: f64,
}

impl SamplerConfig {
    /// Deterministic 2-step DDIM used for frozen policies.
    pub fn frozen() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            ddim_steps: 2,
            spacing: DdimSpacing::Leading,
            eta: 0.0,
            min_std: 0.0,
        }
    }

    pub fn ddim(steps: usize, eta: f64) -> Self {
        Self {
            kind: SamplerKind::Ddim,
            ddim_steps: steps,
            spacing: DdimSpacing::Leading,
            eta,
            min_std: 0.0,
        }
    }

    pub fn ddpm() -> Self {
        Self {
            kind: SamplerKind::DdpmFull,
            ddim_steps: 0,
            spacing: DdimSpacing::Leading,
            eta: 1.0,
            min_std: 0.0,
        }
    }

    pub fn with_spacing(self, spacing: DdimSpacing) -> Self {
        Self { spacing, ..self }
    }

    pub fn with_min_std(self, min_std: f64) -> Self {
        Self { min_std, ..self }
    }

    pub fn validate(&self, k_diff: usize) -> Result<(), DiffusionError> {
        if self.kind == SamplerKind::Ddim && (self.ddim_steps == 0 || self.ddim_steps > k_diff) {
            return Err(DiffusionError::InvalidConfig(format!(
                "ddim_steps must be in 1..={k_diff}, got {}",
                self.ddim_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) || !(self.min_std >= 0.0) {
            return Err(DiffusionError::InvalidConfig(
                "eta must be in [0, 1] and min_std >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Timestep indices visited, noisiest first.
    pub fn timesteps(&self, k_diff: usize) -> Vec<usize> {
        match self.kind {
            SamplerKind::DdpmFull => (0..k_diff).rev().collect(),
            SamplerKind::Ddim => {
                let stride = k_diff / self.ddim_steps;
                match self.spacing {
                    DdimSpacing::Leading => (0..self.ddim_steps).rev().map(|i| i * stride).collect(),
                    DdimSpacing::Trailing => {
                        (0..self.ddim_steps).map(|i| k_diff - 1 - i * stride).collect()
                    }
                }
            }
        }
    }

    pub fn eta(&self) -> f64 {
        match self.kind {
            SamplerKind::DdpmFull => 1.0,
            SamplerKind::Ddim => self.eta,
        }
    }
}

/// Gaussian transition `x_k -> x_prev` given a noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub mean: Vec<f64>,
    pub std: f64,
    /// Elementwise derivative of `mean` with respect to the noise prediction.
    pub dmean_deps: Vec<f64>,
}

/// Generalized DDIM step. `prev = None` denotes the clean end of the chain.
/// The implied clean sample is clipped to `[-x0_clip, x0_clip]`.
pub fn ddim_transition(
    schedule: &NoiseSchedule,
    k: usize,
    prev: Option<usize>,
    eta: f64,
    x0_clip: f64,
    x: &[f64],
    eps: &[f64],
) -> Transition {
    let ab = schedule.alpha_bar(k);
    let ab_prev = schedule.alpha_bar_prev(prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, s1a, sap) = (ab.sqrt(), (1.0 - ab).sqrt(), ab_prev.sqrt());
    let mut mean = Vec::with_capacity(x.len());
    let mut dmean = Vec::with_capacity(x.len());
    for (&xi, &ei) in x.iter().zip(eps) {
        let x0 = (xi - s1a * ei) / sa;
        let (x0c, dx0) = if x0.abs() > x0_clip {
            (x0_clip.copysign(x0), 0.0)
        } else {
            (x0, -s1a / sa)
        };
        mean.push(sap * x0c + dir * ei);
        dmean.push(sap * dx0 + dir);
    }
    Transition {
        mean,
        std: sigma,
        dmean_deps: dmean,
    }
}

/// One recorded denoising transition, enough to recompute its likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseStep {
    pub k: usize,
    pub prev: Option<usize>,
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub next: Vec<f64>,
}

impl DenoiseStep {
    /// Log-density of `next`, or `None` for a deterministic transition.
    pub fn log_prob(&self) -> Option<f64> {
        (self.std > 0.0).then(|| {
            let std = vec![self.std; self.mean.len()];
            gaussian_log_prob(&self.next, &self.mean, &std)
        })
    }
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// Final normalized chunks, one row per input.
    pub chunks: Array2<f64>,
    /// Per-row transition records, empty unless requested.
    pub records: Vec<Vec<DenoiseStep>>,
}

impl DiffusionPolicy {
    /// Denoises `w` (one row per state) with the given sampler. Row `i` draws
    /// its intermediate noise from `rngs[i]`.
    pub fn sample<R: Rng>(
        &self,
        states_norm: ArrayView2<f64>,
        w: ArrayView2<f64>,
        cfg: &SamplerConfig,
        record: bool,
        rngs: &mut [R],
    ) -> Result<SampleBatch, DiffusionError> {
        cfg.validate(self.schedule.len())?;
        let b = w.nrows();
        if states_norm.nrows() != b || rngs.len() != b || w.ncols() != CHUNK_DIM {
            return Err(DiffusionError::BatchMismatch);
        }
        let steps = cfg.timesteps(self.schedule.len());
        let mut x = w.to_owned();
        let mut records = vec![Vec::with_capacity(if record { steps.len() } else { 0 }); b];
        for (i, &k) in steps.iter().enumerate() {
            let prev = match cfg.kind {
                SamplerKind::DdpmFull => k.checked_sub(1),
                SamplerKind::Ddim => steps.get(i + 1).copied(),
            };
            let eps = self.predict_eps(states_norm, x.view(), &vec![k; b])?;
            let mut next = Array2::zeros((b, CHUNK_DIM));
            for r in 0..b {
                let xr = x.row(r).to_vec();
                let er = eps.row(r).to_vec();
                let t = ddim_transition(&self.schedule, k, prev, cfg.eta(), self.config.x0_clip, &xr, &er);
                let std = t.std.max(cfg.min_std);
                let nr: Vec<f64> = if std > 0.0 {
                    t.mean
                        .iter()
                        .map(|m| {
                            let z: f64 = rngs[r].sample(StandardNormal);
                            m + std * z
                        })
                        .collect()
                } else {
                    t.mean.clone()
                };
                next.row_mut(r).assign(&ndarray::ArrayView1::from(&nr));
                if record {
                    records[r].push(DenoiseStep {
                        k,
                        prev,
                        x: xr,
                        eps: er,
                        mean: t.mean,
                        std,
                        next: nr,
                    });
                }
            }
            x = next;
        }
        Ok(SampleBatch { chunks: x, records })
    }

    /// Denormalizes a sampled chunk and clips every action to the bound.
    pub fn to_env_chunk(&self, chunk_norm: &[f64], action_bound: f64) -> [f64; CHUNK_DIM] {
        let raw = self.normalizer.action.denormalize(chunk_norm);
        let mut out = [0.0; CHUNK_DIM];
        for (o, v) in out.iter_mut().zip(raw) {
            *o = v.clamp(-action_bound, action_bound);
        }
        out
    }
}
