use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpCache, MlpGrads};
use super::ApproxError;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((&xi, &mi), &si)| {
            let d = (xi - mi) / si;
            -HALF_LN_2PI - si.ln() - 0.5 * d * d
        })
        .sum()
}

/// Differential entropy of a diagonal Gaussian given its log-stds.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
}

/// Closed-form `KL(N(mean, diag(std^2)) || N(0, I))`.
pub fn kl_to_standard_normal(mean: &[f64], std: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .map(|(&m, &s)| 0.5 * (s * s + m * m - 1.0) - s.ln())
        .sum()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Inverse-CDF draw from the categorical defined by `logits`.
pub fn categorical_sample<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let probs = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

pub fn categorical_entropy(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .iter()
        .map(|lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// One learned log-std per output dimension, shared across states.
    Global,
    /// The network emits `[mean, log_std]`.
    StateDependent,
}

/// MLP with a diagonal Gaussian output.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub net: Mlp,
    pub log_std: Vec<f64>,
    pub mode: StdMode,
    pub std_floor: f64,
}

/// Per-row distribution parameters plus what backward needs.
#[derive(Debug, Clone)]
pub struct GaussianForward {
    pub mean: Array2<f64>,
    /// Effective log-std after the floor.
    pub log_std: Array2<f64>,
    /// Whether the log-std is above the floor (so gradients flow).
    active: Array2<bool>,
    cache: MlpCache,
}

impl GaussianForward {
    pub fn std_row(&self, i: usize) -> Vec<f64> {
        self.log_std.row(i).iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob_row(&self, i: usize, x: &[f64]) -> f64 {
        let mean = self.mean.row(i);
        gaussian_log_prob(x, mean.as_slice().expect("contiguous"), &self.std_row(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub net: MlpGrads,
    pub log_std: Vec<f64>,
}

impl GaussianGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.net.tensors();
        t.push(&self.log_std);
        t
    }
}

impl GaussianHead {
    /// `hidden` are the hidden widths. The output layer starts at zero so the
    /// initial mean is 0 and the initial std is `exp(init_log_std)`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        dim: usize,
        mode: StdMode,
        init_log_std: f64,
        std_floor: f64,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let out = match mode {
            StdMode::Global => dim,
            StdMode::StateDependent => 2 * dim,
        };
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(out);
        let mut net = Mlp::new(&widths, rng)?;
        net.zero_output_layer();
        if mode == StdMode::StateDependent {
            let mut tensors = net.tensors_mut();
            let bias = tensors.pop().expect("bias");
            for b in &mut bias[dim..] {
                *b = init_log_std;
            }
        }
        Ok(Self {
            net,
            log_std: vec![init_log_std; dim],
            mode,
            std_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<GaussianForward, ApproxError> {
        let (out, cache) = self.net.forward(input)?;
        let d = self.dim();
        let b = out.nrows();
        let mean = out.slice(s![.., 0..d]).to_owned();
        let raw = match self.mode {
            StdMode::Global => Array2::from_shape_fn((b, d), |(_, j)| self.log_std[j]),
            StdMode::StateDependent => out.slice(s![.., d..2 * d]).to_owned(),
        };
        let floor = self.std_floor.ln();
        let active = raw.mapv(|l| l > floor);
        let log_std = raw.mapv(|l| l.max(floor));
        Ok(GaussianForward {
            mean,
            log_std,
            active,
            cache,
        })
    }

    /// Backward given dLoss/dMean and dLoss/dLogStd (effective) per row.
    pub fn backward(
        &self,
        fwd: &GaussianForward,
        d_mean: ArrayView2<f64>,
        d_log_std: ArrayView2<f64>,
    ) -> Result<GaussianGrads, ApproxError> {
        let d = self.dim();
        let b = d_mean.nrows();
        let masked = Array2::from_shape_fn((b, d), |(i, j)| {
            if fwd.active[[i, j]] {
                d_log_std[[i, j]]
            } else {
                0.0
            }
        });
        match self.mode {
            StdMode::Global => {
                let (net, _) = self.net.backward(&fwd.cache, d_mean)?;
                let log_std = (0..d).map(|j| masked.column(j).sum()).collect();
                Ok(GaussianGrads { net, log_std })
            }
            StdMode::StateDependent => {
                let mut g = Array2::zeros((b, 2 * d));
                g.slice_mut(s![.., 0..d]).assign(&d_mean);
                g.slice_mut(s![.., d..2 * d]).assign(&masked);
                let (net, _) = self.net.backward(&fwd.cache, g.view())?;
                Ok(GaussianGrads {
                    net,
                    log_std: vec![0.0; d],
                })
            }
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.net.tensors();
        t.push(&self.log_std);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.net.tensors_mut();
        t.push(&mut self.log_std);
        t
    }

    /// Draws one sample from row `i` of a forward pass.
    pub fn sample_row<R: Rng + ?Sized>(fwd: &GaussianForward, i: usize, rng: &mut R) -> Vec<f64> {
        fwd.mean
            .row(i)
            .iter()
            .zip(fwd.log_std.row(i))
            .map(|(&m, &ls)| {
                let e: f64 = rng.sample(StandardNormal);
                m + ls.exp() * e
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_log_prob_at_mean() {
        let lp = gaussian_log_prob(&[0.0], &[0.0], &[1.0]);
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn doubling_std_costs_ln2_per_dim() {
        let a = gaussian_log_prob(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[0.3, 0.3, 0.3]);
        let b = gaussian_log_prob(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[0.6, 0.6, 0.6]);
        assert!((a - b - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        // trapezoid rule over +-10 sigma
        let (mean, std) = (0.7, 0.4);
        let n = 20_000;
        let (lo, hi) = (mean - 10.0 * std, mean + 10.0 * std);
        let h = (hi - lo) / n as f64;
        let f = |x: f64| gaussian_log_prob(&[x], &[mean], &[std]).exp();
        let mut total = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            total += f(lo + i as f64 * h);
        }
        assert!((total * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn uniform_logits_log_prob() {
        let lp = log_softmax(&[0.3; 4]);
        for v in lp {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_logits_have_near_zero_entropy() {
        assert!(categorical_entropy(&[30.0, 0.0, 0.0, 0.0]) < 1e-10);
        assert!((categorical_entropy(&[0.0; 4]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = [0.0, 3f64.ln()];
        let n = 100_000;
        let ones = (0..n).filter(|_| categorical_sample(&logits, &mut rng) == 1).count();
        let p = ones as f64 / n as f64;
        let sd = (0.75 * 0.25 / n as f64).sqrt();
        assert!((p - 0.75).abs() < 3.0 * sd, "p = {p}");
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_to_standard_normal(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        let kl = kl_to_standard_normal(&[0.5, -1.0], &[1.0, 1.0]);
        assert!((kl - 0.5 * 1.25).abs() < 1e-15);
    }

    #[test]
    fn std_floor_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = GaussianHead::new(2, &[4], 2, StdMode::Global, -10.0, 1e-3, &mut rng).unwrap();
        let x = Array2::from_elem((3, 2), 0.5);
        let fwd = head.forward(x.view()).unwrap();
        assert!(fwd.std_row(0).iter().all(|&s| (s - 1e-3).abs() < 1e-15));
        let ones = Array2::from_elem((3, 2), 1.0);
        let grads = head.backward(&fwd, ones.view(), ones.view()).unwrap();
        assert_eq!(grads.log_std, vec![0.0, 0.0]);
    }

    #[test]
    fn state_dependent_head_starts_at_init_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head =
            GaussianHead::new(3, &[5], 2, StdMode::StateDependent, 0.5f64.ln(), 1e-3, &mut rng)
                .unwrap();
        let x = Array2::from_elem((1, 3), 0.2);
        let fwd = head.forward(x.view()).unwrap();
        assert_eq!(fwd.mean.row(0).to_vec(), vec![0.0, 0.0]);
        for s in fwd.std_row(0) {
            assert!((s - 0.5).abs() < 1e-12);
        }
    }
}
