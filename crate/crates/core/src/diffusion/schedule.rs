use std::f64::consts::FRAC_PI_2;

use super::DiffusionError;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Variance schedule indexed by training timestep `k in 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

/// Squared-cosine schedule with offset `s = 0.008` and betas clipped at 0.999.
pub fn cosine_schedule(k_diff: usize) -> Result<NoiseSchedule, DiffusionError> {
    if k_diff < 2 {
        return Err(DiffusionError::InvalidConfig(format!(
            "need at least 2 diffusion steps, got {k_diff}"
        )));
    }
    let f = |t: f64| {
        let x = (t / k_diff as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        x.cos().powi(2)
    };
    let mut betas = Vec::with_capacity(k_diff);
    let mut alpha_bar = Vec::with_capacity(k_diff);
    let mut prod = 1.0;
    for k in 0..k_diff {
        let beta = (1.0 - f(k as f64 + 1.0) / f(k as f64)).clamp(0.0, MAX_BETA);
        prod *= 1.0 - beta;
        betas.push(beta);
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { alpha_bar, betas })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    /// `alpha_bar` of the step before `k`; 1 past the clean end of the chain.
    pub fn alpha_bar_prev(&self, prev: Option<usize>) -> f64 {
        prev.map_or(1.0, |p| self.alpha_bar[p])
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_step_cosine_bounds() {
        let s = cosine_schedule(20).unwrap();
        assert!(s.alpha_bar(0) >= 0.99);
        assert!(s.alpha_bar(19) < 0.05);
        for k in 1..20 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            let beta = 1.0 - s.alpha_bar(k) / s.alpha_bar(k - 1);
            assert!(beta > 0.0 && beta < 1.0);
            assert!((beta - s.beta(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_length() {
        assert!(cosine_schedule(1).is_err());
    }
}
