//! Conditional mutual information `I(A; W | S)` for policies whose densities
//! can be enumerated on small finite grids.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::DiscoveryError;

/// `p(s)`, `p(w)` and `pi(a | s, w)` on finite grids; `action_probs[s][w][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLatentPolicy {
    pub state_probs: Vec<f64>,
    pub latent_probs: Vec<f64>,
    pub action_probs: Vec<Vec<Vec<f64>>>,
}

fn check_simplex(p: &[f64], what: &str) -> Result<(), DiscoveryError> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DiscoveryError::InvalidToy(format!("{what} is not a distribution")));
    }
    Ok(())
}

impl TabularLatentPolicy {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        check_simplex(&self.state_probs, "p(s)")?;
        check_simplex(&self.latent_probs, "p(w)")?;
        if self.action_probs.len() != self.state_probs.len() {
            return Err(DiscoveryError::InvalidToy("state grid size".into()));
        }
        let n_a = self.num_actions();
        for per_state in &self.action_probs {
            if per_state.len() != self.latent_probs.len() {
                return Err(DiscoveryError::InvalidToy("latent grid size".into()));
            }
            for row in per_state {
                if row.len() != n_a {
                    return Err(DiscoveryError::InvalidToy("action grid size".into()));
                }
                check_simplex(row, "pi(a|s,w)")?;
            }
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.action_probs
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len)
    }

    /// `sum_w p(w) pi(a | s, w)`.
    pub fn marginal(&self, s: usize, a: usize) -> f64 {
        self.latent_probs
            .iter()
            .zip(&self.action_probs[s])
            .map(|(pw, row)| pw * row[a])
            .sum()
    }
}

/// `log pi(a|s,w) - log p(a|s)`, zero where `pi(a|s,w) = 0`.
fn pointwise(pi: f64, marginal: f64) -> f64 {
    if pi > 0.0 {
        pi.ln() - marginal.ln()
    } else {
        0.0
    }
}

/// Exact `E_s E_w KL(pi(.|s,w) || p(.|s))` by full enumeration.
pub fn conditional_mi_enumerate(policy: &TabularLatentPolicy) -> Result<f64, DiscoveryError> {
    policy.validate()?;
    let n_a = policy.num_actions();
    let mut total = 0.0;
    for (s, ps) in policy.state_probs.iter().enumerate() {
        let marg: Vec<f64> = (0..n_a).map(|a| policy.marginal(s, a)).collect();
        for (w, pw) in policy.latent_probs.iter().enumerate() {
            let row = &policy.action_probs[s][w];
            let kl: f64 = (0..n_a).map(|a| row[a] * pointwise(row[a], marg[a])).sum();
            total += ps * pw * kl;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMiConfig {
    /// Outer `(s, w, a)` draws.
    pub outer_samples: usize,
    /// Fresh latent draws per outer sample for the inner marginal estimate.
    pub inner_latents: usize,
    pub bootstrap_resamples: usize,
    /// Two-sided coverage of the percentile bootstrap interval.
    pub confidence: f64,
    /// Intervals wider than this raise `insufficient_samples`.
    pub max_ci_width: f64,
}

impl Default for McMiConfig {
    fn default() -> Self {
        Self {
            outer_samples: 2000,
            inner_latents: 64,
            bootstrap_resamples: 1000,
            confidence: 0.99,
            max_ci_width: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMiEstimate {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub insufficient_samples: bool,
}

/// Nested Monte-Carlo estimate of `I(A; W | S)`: outer draws of
/// `s ~ p(s), w ~ p(w), a ~ pi(.|s,w)`, inner marginal `p(a|s)` averaged over
/// fresh latent draws, percentile bootstrap over the outer terms.
pub fn mc_conditional_mi<R: Rng + ?Sized>(
    policy: &TabularLatentPolicy,
    cfg: &McMiConfig,
    rng: &mut R,
) -> Result<McMiEstimate, DiscoveryError> {
    policy.validate()?;
    if cfg.outer_samples == 0 || cfg.inner_latents == 0 {
        return Err(DiscoveryError::InvalidToy("sample counts must be positive".into()));
    }
    let weights = |p: &[f64]| {
        WeightedIndex::new(p).map_err(|e| DiscoveryError::InvalidToy(e.to_string()))
    };
    let s_dist = weights(&policy.state_probs)?;
    let w_dist = weights(&policy.latent_probs)?;
    let mut terms = Vec::with_capacity(cfg.outer_samples);
    for _ in 0..cfg.outer_samples {
        let s = s_dist.sample(rng);
        let w = w_dist.sample(rng);
        let row = &policy.action_probs[s][w];
        let a = weights(row)?.sample(rng);
        let inner: f64 = (0..cfg.inner_latents)
            .map(|_| policy.action_probs[s][w_dist.sample(rng)][a])
            .sum::<f64>()
            / cfg.inner_latents as f64;
        // the inner draws may all miss the latent that produced `a`
        let inner = inner.max(row[a] / cfg.inner_latents as f64);
        terms.push(pointwise(row[a], inner));
    }
    let n = terms.len();
    let estimate = terms.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..cfg.bootstrap_resamples.max(1))
        .map(|_| (0..n).map(|_| terms[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.confidence) / 2.0;
    let pick = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    let (ci_low, ci_high) = (pick(alpha), pick(1.0 - alpha));
    Ok(McMiEstimate {
        estimate,
        ci_low,
        ci_high,
        insufficient_samples: ci_high - ci_low > cfg.max_ci_width,
    })
}
