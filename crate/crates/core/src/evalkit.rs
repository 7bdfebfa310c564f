//! Success and diversity metrics, the fixed-seed evaluation harness, and
//! clustering-agreement statistics for mode stability.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rlft::{collect_rollouts, ActOptions, EpisodeRecord, PolicyStack, RlftError};
use crate::seeding::{stream, Purpose};
use crate::toyenv::{assign_mode, EnvConfig, GoalLayout};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rlft(#[from] RlftError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Coverage threshold on per-mode success.
    pub tau: f64,
    /// Seed of the per-episode streams, shared across methods.
    pub seed: u64,
    /// Use the steering mean instead of sampling `w`.
    pub deterministic_steering: bool,
    /// Use the residual mean instead of sampling.
    pub deterministic_residual: bool,
    /// Episodes per lockstep block; blocks run in parallel.
    pub block_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1024,
            tau: 0.8,
            seed: 0,
            deterministic_steering: false,
            deterministic_residual: true,
            block_size: 128,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.episodes == 0 || self.block_size == 0 {
            return Err(EvalError::InvalidConfig("episodes and block_size must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(EvalError::InvalidConfig("tau must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Success rate, per-mode success rates and realized mode counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeStats {
    pub sr: f64,
    pub per_mode_sr: Vec<f64>,
    pub sr_m: f64,
    pub counts: Vec<usize>,
    pub unassigned: usize,
}

/// `modes[i]` is the goal episode `i` ended in. Per-mode success divides by
/// the equal allocation `N / K` and is capped at 1.
pub fn sr_and_modes(modes: &[Option<usize>], num_modes: usize) -> ModeStats {
    let n = modes.len();
    let mut counts = vec![0usize; num_modes];
    for m in modes.iter().flatten() {
        counts[*m] += 1;
    }
    let successes: usize = counts.iter().sum();
    let alloc = n as f64 / num_modes as f64;
    let per_mode_sr: Vec<f64> = counts
        .iter()
        .map(|&c| if n == 0 { 0.0 } else { (c as f64 / alloc).min(1.0) })
        .collect();
    ModeStats {
        sr: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        sr_m: per_mode_sr.iter().sum::<f64>() / num_modes as f64,
        per_mode_sr,
        counts,
        unassigned: n - successes,
    }
}

/// Number of modes with `SR_i >= tau`, and that count over `K`.
pub fn mode_coverage(per_mode_sr: &[f64], tau: f64) -> (usize, f64) {
    let count = per_mode_sr.iter().filter(|&&s| s >= tau).count();
    (count, count as f64 / per_mode_sr.len().max(1) as f64)
}

/// `-sum p ln p / ln K` over assigned episodes. Returns `(entropy, undefined)`
/// where `undefined` flags an all-unassigned set (entropy reported as 0).
pub fn mode_entropy(counts: &[usize]) -> (f64, bool) {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return (0.0, true);
    }
    if counts.len() < 2 {
        return (0.0, false);
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (h / (counts.len() as f64).ln(), false)
}

/// Maps `Option<usize>` labels to dense ids, unassigned as its own label.
fn dense_labels(a: &[Option<usize>]) -> (Vec<usize>, usize) {
    let mut seen: Vec<Option<usize>> = Vec::new();
    let ids = a
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect();
    (ids, seen.len())
}

fn contingency(a: &[Option<usize>], b: &[Option<usize>]) -> Vec<Vec<f64>> {
    let (ia, na) = dense_labels(a);
    let (ib, nb) = dense_labels(b);
    let mut t = vec![vec![0.0; nb]; na];
    for (x, y) in ia.into_iter().zip(ib) {
        t[x][y] += 1.0;
    }
    t
}

fn entropy_of(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| -(c / n) * (c / n).ln())
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization. Two
/// single-cluster labelings score 1.
pub fn nmi(a: &[Option<usize>], b: &[Option<usize>]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    if a.is_empty() {
        return Ok(1.0);
    }
    let t = contingency(a, b);
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let ha = entropy_of(rows.iter().copied(), n);
    let hb = entropy_of(cols.iter().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (c * n / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Adjusted Rand index (Hubert-Arabie).
pub fn ari(a: &[Option<usize>], b: &[Option<usize>]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let comb2 = |x: f64| x * (x - 1.0) / 2.0;
    let n = a.len() as f64;
    if a.len() < 2 {
        return Ok(1.0);
    }
    let t = contingency(a, b);
    let index: f64 = t.iter().flatten().map(|&c| comb2(c)).sum();
    let rows: f64 = t.iter().map(|r| comb2(r.iter().sum())).sum();
    let cols: f64 = (0..t[0].len())
        .map(|j| comb2(t.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = rows * cols / comb2(n);
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Code-by-mode counts; the last column holds unassigned episodes.
pub fn confusion(codes: &[usize], modes: &[Option<usize>], k_z: usize, num_modes: usize) -> Vec<Vec<usize>> {
    let mut c = vec![vec![0usize; num_modes + 1]; k_z];
    for (&z, m) in codes.iter().zip(modes) {
        c[z][m.unwrap_or(num_modes)] += 1;
    }
    c
}

/// Most frequent assigned mode per code, `None` if the code never succeeded.
pub fn dominant_modes(confusion: &[Vec<usize>]) -> Vec<Option<usize>> {
    confusion
        .iter()
        .map(|row| {
            let assigned = &row[..row.len().saturating_sub(1)];
            let (best, &count) = assigned
                .iter()
                .enumerate()
                .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))?;
            (count > 0).then_some(best)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub nmi: f64,
    pub ari: f64,
    pub z_consistency: f64,
}

/// Agreement between two episode-aligned evaluations of the same codes.
pub fn stability_metrics(
    modes_a: &[Option<usize>],
    modes_b: &[Option<usize>],
    dominant_a: &[Option<usize>],
    dominant_b: &[Option<usize>],
) -> Result<Stability, EvalError> {
    if dominant_a.len() != dominant_b.len() {
        return Err(EvalError::LengthMismatch(dominant_a.len(), dominant_b.len()));
    }
    let agree = dominant_a
        .iter()
        .zip(dominant_b)
        .filter(|(x, y)| x.is_some() && x == y)
        .count();
    Ok(Stability {
        nmi: nmi(modes_a, modes_b)?,
        ari: ari(modes_a, modes_b)?,
        z_consistency: agree as f64 / dominant_a.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sr: f64,
    pub sr_m: f64,
    pub coverage_count: usize,
    pub coverage: f64,
    pub entropy: f64,
    pub entropy_undefined: bool,
    pub per_mode_sr: Vec<f64>,
    pub counts: Vec<usize>,
    pub unassigned: usize,
    pub confusion: Vec<Vec<usize>>,
    pub codes: Vec<usize>,
    pub modes: Vec<Option<usize>>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn from_episodes(episodes: Vec<EpisodeRecord>, layout: &GoalLayout, k_z: usize, tau: f64) -> Self {
        let k = layout.num_modes();
        let modes: Vec<Option<usize>> = episodes
            .iter()
            .map(|e| assign_mode(&e.trajectory, layout))
            .collect();
        let codes: Vec<usize> = episodes.iter().map(|e| e.z).collect();
        let stats = sr_and_modes(&modes, k);
        let (coverage_count, coverage) = mode_coverage(&stats.per_mode_sr, tau);
        let (entropy, entropy_undefined) = mode_entropy(&stats.counts);
        Self {
            sr: stats.sr,
            sr_m: stats.sr_m,
            coverage_count,
            coverage,
            entropy,
            entropy_undefined,
            per_mode_sr: stats.per_mode_sr,
            counts: stats.counts,
            unassigned: stats.unassigned,
            confusion: confusion(&codes, &modes, k_z, k),
            codes,
            modes,
            episodes,
        }
    }
}

/// Rolls `cfg.episodes` episodes with codes cycling `0, 1, .., K_z-1`.
/// Episode `i` always uses the stream `(Eval, [i])` of `cfg.seed`.
pub fn evaluate(
    stack: &PolicyStack,
    env: &EnvConfig,
    sampler_opts: &ActOptions,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let k_z = stack.k_z();
    let opts = ActOptions {
        record_last: 0,
        deterministic_steering: cfg.deterministic_steering,
        deterministic_residual: cfg.deterministic_residual,
        ..sampler_opts.clone()
    };
    let starts: Vec<usize> = (0..cfg.episodes).step_by(cfg.block_size).collect();
    let blocks: Result<Vec<Vec<EpisodeRecord>>, RlftError> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + cfg.block_size).min(cfg.episodes);
            let zs: Vec<usize> = (start..end).map(|i| i % k_z).collect();
            let mut rngs: Vec<ChaCha8Rng> = (start..end)
                .map(|i| stream(cfg.seed, Purpose::Eval, &[i as u64]))
                .collect();
            collect_rollouts(stack, &opts, env, env.max_steps, &zs, &mut rngs).map(|b| b.episodes)
        })
        .collect();
    let episodes = blocks?.into_iter().flatten().collect();
    Ok(EvalReport::from_episodes(episodes, &env.layout, k_z, cfg.tau))
}

/// One row of the summary report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub landscape: String,
    pub seed: u64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "SR_M")]
    pub sr_m: f64,
    pub mc_at_080: f64,
    pub entropy: f64,
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `mode,sr,count` rows.
pub fn write_per_mode_csv<W: Write>(report: &EvalReport, writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mode", "sr", "count"])?;
    for (i, (sr, c)) in report.per_mode_sr.iter().zip(&report.counts).enumerate() {
        w.write_record([i.to_string(), sr.to_string(), c.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `z_code,mode_0..mode_{K-1},unassigned` rows.
pub fn write_confusion_csv<W: Write>(report: &EvalReport, writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    let k = report.counts.len();
    let mut header = vec!["z_code".to_string()];
    header.extend((0..k).map(|i| format!("mode_{i}")));
    header.push("unassigned".into());
    w.write_record(&header)?;
    for (z, row) in report.confusion.iter().enumerate() {
        let mut rec = vec![z.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `episode,step,x,y,z_code,mode` rows; mode is empty when unassigned.
pub fn write_trajectories_csv<W: Write>(report: &EvalReport, writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "step", "x", "y", "z_code", "mode"])?;
    for (e, (ep, mode)) in report.episodes.iter().zip(&report.modes).enumerate() {
        let mode = mode.map(|m| m.to_string()).unwrap_or_default();
        for (t, p) in ep.trajectory.states.iter().enumerate() {
            w.write_record([
                e.to_string(),
                t.to_string(),
                p[0].to_string(),
                p[1].to_string(),
                ep.z.to_string(),
                mode.clone(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modes_from_counts(counts: &[usize], fails: usize) -> Vec<Option<usize>> {
        let mut v: Vec<Option<usize>> = Vec::new();
        for (m, &c) in counts.iter().enumerate() {
            v.extend(std::iter::repeat_n(Some(m), c));
        }
        v.extend(std::iter::repeat_n(None, fails));
        v
    }

    #[test]
    fn sr_m_is_the_mean_of_per_mode_rates() {
        // 100 episodes, allocation 25 per mode
        let s = sr_and_modes(&modes_from_counts(&[25, 21, 10, 0], 44), 4);
        assert!((s.per_mode_sr[1] - 0.84).abs() < 1e-12);
        assert!((s.sr_m - (1.0 + 0.84 + 0.4 + 0.0) / 4.0).abs() < 1e-12);
        assert!((s.sr - 0.56).abs() < 1e-12);
    }

    #[test]
    fn collapse_gives_full_sr_but_quarter_sr_m() {
        let s = sr_and_modes(&modes_from_counts(&[1024, 0, 0, 0], 0), 4);
        assert_eq!((s.sr, s.sr_m), (1.0, 0.25));
        let none = sr_and_modes(&modes_from_counts(&[0; 4], 8), 4);
        assert_eq!((none.sr, none.sr_m), (0.0, 0.0));
    }

    #[test]
    fn coverage_threshold_is_inclusive() {
        assert_eq!(mode_coverage(&[1.0, 0.85, 0.4, 0.0], 0.8).0, 2);
        assert_eq!(mode_coverage(&[0.8, 0.8], 0.8), (2, 1.0));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(mode_entropy(&[10, 0, 0, 0]), (0.0, false));
        assert!((mode_entropy(&[5, 5, 5, 5]).0 - 1.0).abs() < 1e-12);
        let h = mode_entropy(&[2, 1, 1, 0]).0;
        let oracle = -(0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln()) / 4f64.ln();
        assert!((h - oracle).abs() < 1e-12 && (h - 0.75).abs() < 1e-12);
        assert_eq!(mode_entropy(&[0, 0, 0, 0]), (0.0, true));
    }

    #[test]
    fn identical_and_relabeled_assignments_agree_fully() {
        let a: Vec<Option<usize>> = (0..40).map(|i| Some(i % 4)).collect();
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ari(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<Option<usize>> = a.iter().map(|m| m.map(|v| (v + 1) % 4)).collect();
        assert!((nmi(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((ari(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let codes: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let da = dominant_modes(&confusion(&codes, &a, 4, 4));
        let db = dominant_modes(&confusion(&codes, &b, 4, 4));
        let s = stability_metrics(&a, &b, &da, &db).unwrap();
        assert_eq!(s.z_consistency, 0.0);
        assert!(nmi(&a, &b[..3]).is_err());
    }

    #[test]
    fn confusion_rows_sum_to_code_counts() {
        let codes = [0, 1, 0, 1, 1];
        let modes = [Some(2), None, Some(2), Some(0), Some(0)];
        let c = confusion(&codes, &modes, 2, 3);
        assert_eq!(c[0], vec![0, 0, 2, 0]);
        assert_eq!(c[1], vec![2, 0, 0, 1]);
        assert_eq!(dominant_modes(&c), vec![Some(2), Some(0)]);
    }

    #[test]
    fn report_csv_header() {
        let mut buf = Vec::new();
        write_report_csv(
            &[ReportRow {
                method: "RES[BMD]".into(),
                landscape: "G1".into(),
                seed: 0,
                sr: 1.0,
                sr_m: 1.0,
                mc_at_080: 1.0,
                entropy: 0.99,
            }],
            &mut buf,
        )
        .unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("method,landscape,seed,SR,SR_M,mc_at_080,entropy\n"));
    }
}
