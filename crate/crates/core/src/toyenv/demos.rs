//! Scripted expert demonstrations, chunking, normalization statistics and the
//! on-disk demo format.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{step, EnvConfig, EnvError, EnvState, Point, CHUNK_DIM, CHUNK_LEN, STATE_DIM};

pub const DEMO_CSV_HEADER: [&str; 13] = [
    "episode", "step", "mode", "s_x", "s_y", "a0_x", "a0_y", "a1_x", "a1_y", "a2_x", "a2_y", "a3_x",
    "a3_y",
];

/// Smallest std kept by the normalizer; constant columns fall back to 1.
const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub mode: usize,
    /// State before each action.
    pub states: Vec<Point>,
    pub actions: Vec<Point>,
}

impl DemoEpisode {
    /// Actions `t..t + CHUNK_LEN`, padded by repeating the final action.
    pub fn chunk(&self, t: usize) -> [f64; CHUNK_DIM] {
        let last = self.actions.len() - 1;
        let mut out = [0.0; CHUNK_DIM];
        for h in 0..CHUNK_LEN {
            let a = self.actions[(t + h).min(last)];
            out[2 * h] = a[0];
            out[2 * h + 1] = a[1];
        }
        out
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Per-column mean and std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            n += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n_f = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n_f);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n_f).sqrt();
                if sd > MIN_STD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Normalization of diffusion inputs (states) and outputs (action chunks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkNormalizer {
    pub state: Stats,
    pub action: Stats,
}

impl ChunkNormalizer {
    pub fn identity() -> Self {
        Self {
            state: Stats::identity(STATE_DIM),
            action: Stats::identity(CHUNK_DIM),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("normalizer serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let n: Self = toml::from_str(text).map_err(|e| EnvError::Format(e.to_string()))?;
        if n.state.mean.len() != STATE_DIM
            || n.state.std.len() != STATE_DIM
            || n.action.mean.len() != CHUNK_DIM
            || n.action.std.len() != CHUNK_DIM
        {
            return Err(EnvError::Format("normalizer has wrong dimensions".into()));
        }
        if n.state.std.iter().chain(&n.action.std).any(|s| !(*s > 0.0)) {
            return Err(EnvError::Format("normalizer std must be positive".into()));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub episodes: Vec<DemoEpisode>,
    pub normalizer: ChunkNormalizer,
}

impl DemoDataset {
    pub fn from_episodes(episodes: Vec<DemoEpisode>) -> Self {
        let mut ds = Self {
            episodes,
            normalizer: ChunkNormalizer::identity(),
        };
        ds.refit_normalizer();
        ds
    }

    pub fn refit_normalizer(&mut self) {
        let states: Vec<Point> = self.episodes.iter().flat_map(|e| e.states.clone()).collect();
        let chunks: Vec<[f64; CHUNK_DIM]> = self
            .episodes
            .iter()
            .flat_map(|e| (0..e.len()).map(move |t| e.chunk(t)))
            .collect();
        self.normalizer = ChunkNormalizer {
            state: Stats::fit(STATE_DIM, states.iter().map(|s| s.as_slice())),
            action: Stats::fit(CHUNK_DIM, chunks.iter().map(|c| c.as_slice())),
        };
    }

    pub fn num_samples(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn modes(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.episodes.iter().map(|e| e.mode).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    /// Normalized `(states, chunks)` training matrices, one row per step.
    pub fn normalized_arrays(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.num_samples();
        let mut s = Array2::zeros((n, STATE_DIM));
        let mut a = Array2::zeros((n, CHUNK_DIM));
        let mut row = 0;
        for ep in &self.episodes {
            for t in 0..ep.len() {
                let ns = self.normalizer.state.normalize(&ep.states[t]);
                let na = self.normalizer.action.normalize(&ep.chunk(t));
                s.row_mut(row).assign(&ndarray::ArrayView1::from(&ns));
                a.row_mut(row).assign(&ndarray::ArrayView1::from(&na));
                row += 1;
            }
        }
        (s, a)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EnvError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(DEMO_CSV_HEADER)?;
        for (i, ep) in self.episodes.iter().enumerate() {
            for t in 0..ep.len() {
                let mut rec = vec![i.to_string(), t.to_string(), ep.mode.to_string()];
                rec.extend(ep.states[t].iter().map(|v| format!("{v:?}")));
                rec.extend(ep.chunk(t).iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV and attaches the given normalizer (or refits one).
    pub fn read_csv<R: Read>(reader: R, normalizer: Option<ChunkNormalizer>) -> Result<Self, EnvError> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != DEMO_CSV_HEADER {
            return Err(EnvError::Format(format!("unexpected header {header:?}")));
        }
        let mut episodes: Vec<DemoEpisode> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EnvError::Format(e.to_string()))?;
            let (ep, t, mode) = (nums[0] as usize, nums[1] as usize, nums[2] as usize);
            if ep == episodes.len() {
                episodes.push(DemoEpisode {
                    mode,
                    states: Vec::new(),
                    actions: Vec::new(),
                });
            }
            if ep + 1 != episodes.len() {
                return Err(EnvError::Format(format!("episode {ep} out of order")));
            }
            let cur = episodes.last_mut().expect("pushed above");
            if t != cur.states.len() || mode != cur.mode {
                return Err(EnvError::Format(format!("episode {ep} step {t} out of order")));
            }
            cur.states.push([nums[3], nums[4]]);
            cur.actions.push([nums[5], nums[6]]);
        }
        Ok(match normalizer {
            Some(normalizer) => Self {
                episodes,
                normalizer,
            },
            None => Self::from_episodes(episodes),
        })
    }
}

/// Rolls the scripted expert: each episode starts uniformly in a disc of
/// `start_radius` around the origin and heads straight for a goal drawn
/// uniformly from `allowed_modes`, at full speed, with Gaussian action noise.
pub fn generate_demos<R: Rng + ?Sized>(
    cfg: &EnvConfig,
    allowed_modes: &[usize],
    n_episodes: usize,
    noise_std: f64,
    start_radius: f64,
    rng: &mut R,
) -> Result<DemoDataset, EnvError> {
    cfg.validate()?;
    let k = cfg.layout.num_modes();
    if let Some(&mode) = allowed_modes.iter().find(|&&m| m >= k) {
        return Err(EnvError::InvalidMode { mode, num_modes: k });
    }
    if allowed_modes.is_empty() || n_episodes == 0 {
        return Err(EnvError::InvalidConfig(
            "need at least one allowed mode and one episode".into(),
        ));
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    for episode in 0..n_episodes {
        let mode = *allowed_modes.choose(rng).expect("non-empty");
        let goal = cfg.layout.centers()[mode];
        let mut state = EnvState::at(sample_disc(start_radius, rng));
        let mut ep = DemoEpisode {
            mode,
            states: Vec::new(),
            actions: Vec::new(),
        };
        loop {
            let dx = goal[0] - state.position[0];
            let dy = goal[1] - state.position[1];
            let norm = (dx * dx + dy * dy).sqrt().max(1e-12);
            let n0: f64 = rng.sample(StandardNormal);
            let n1: f64 = rng.sample(StandardNormal);
            let raw = [
                dx / norm * cfg.action_bound + noise_std * n0,
                dy / norm * cfg.action_bound + noise_std * n1,
            ];
            let action = cfg.clip_action(raw);
            let out = step(&state, action, cfg, rng)?;
            ep.states.push(state.position);
            ep.actions.push(action);
            state = out.state;
            if out.success {
                break;
            }
            if out.done {
                return Err(EnvError::DemoTimeout {
                    episode,
                    max_steps: cfg.max_steps,
                });
            }
        }
        episodes.push(ep);
    }
    Ok(DemoDataset::from_episodes(episodes))
}

fn sample_disc<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Point {
    if radius <= 0.0 {
        return [0.0, 0.0];
    }
    let r = radius * rng.random::<f64>().sqrt();
    let (s, c) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
    [r * c, r * s]
}
