//! The 2D Gaussian-mixture navigation task: reward landscape, rotated
//! variants, single-step dynamics, and trajectory-to-mode assignment.

mod demos;

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use demos::{generate_demos, ChunkNormalizer, DemoDataset, DemoEpisode, Stats, DEMO_CSV_HEADER};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
/// Actions per chunk (`H_a`).
pub const CHUNK_LEN: usize = 4;
/// Flattened chunk dimension (`d_w`).
pub const CHUNK_DIM: usize = CHUNK_LEN * ACTION_DIM;

pub type Point = [f64; 2];

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step called on a finished episode")]
    EpisodeFinished,
    #[error("mode {mode} out of range for {num_modes} modes")]
    InvalidMode { mode: usize, num_modes: usize },
    #[error("demo episode {episode} did not reach its goal within {max_steps} steps")]
    DemoTimeout { episode: usize, max_steps: usize },
    #[error("malformed demo data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Goal centers with a shared Gaussian spread and success radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalLayout {
    centers: Vec<Point>,
    sigma: f64,
    success_radius: f64,
}

impl Default for GoalLayout {
    fn default() -> Self {
        Self::diagonal()
    }
}

impl GoalLayout {
    pub fn new(centers: Vec<Point>, sigma: f64, success_radius: f64) -> Result<Self, EnvError> {
        let layout = Self {
            centers,
            sigma,
            success_radius,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Four goals at radius 1 on the diagonals.
    pub fn diagonal() -> Self {
        let centers = (0..4)
            .map(|i| {
                let a = FRAC_PI_4 + i as f64 * 2.0 * FRAC_PI_4;
                [a.cos(), a.sin()]
            })
            .collect();
        Self {
            centers,
            sigma: 0.2,
            success_radius: 0.15,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.centers.is_empty() {
            return Err(EnvError::InvalidLayout("no centers".into()));
        }
        if !(self.sigma > 0.0) || !(self.success_radius > 0.0) {
            return Err(EnvError::InvalidLayout(
                "sigma and success_radius must be positive".into(),
            ));
        }
        for (i, a) in self.centers.iter().enumerate() {
            if !a.iter().all(|v| v.is_finite()) {
                return Err(EnvError::InvalidLayout(format!("center {i} not finite")));
            }
            for (j, b) in self.centers.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(EnvError::InvalidLayout(format!(
                        "centers {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn success_radius(&self) -> f64 {
        self.success_radius
    }

    pub fn num_modes(&self) -> usize {
        self.centers.len()
    }

    /// Sum of unnormalized Gaussian bumps, one per center.
    pub fn reward(&self, p: Point) -> f64 {
        let denom = 2.0 * self.sigma * self.sigma;
        self.centers
            .iter()
            .map(|c| (-(sq(p[0] - c[0]) + sq(p[1] - c[1])) / denom).exp())
            .sum()
    }

    /// Rotates every center about the origin.
    pub fn rotate(&self, angle: f64) -> Self {
        Self {
            centers: self.centers.iter().map(|&c| rotate_point(c, angle)).collect(),
            sigma: self.sigma,
            success_radius: self.success_radius,
        }
    }

    /// Lowest-index center within the success radius of `p`.
    pub fn mode_at(&self, p: Point) -> Option<usize> {
        let r2 = self.success_radius * self.success_radius;
        self.centers
            .iter()
            .position(|c| sq(p[0] - c[0]) + sq(p[1] - c[1]) <= r2)
    }
}

fn sq(x: f64) -> f64 {
    x * x
}

pub fn rotate_point(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Named reward landscapes: the demonstration layout and its rotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Landscape {
    G0,
    G1,
    G2,
    Angle(f64),
}

impl Landscape {
    pub fn angle(self) -> f64 {
        match self {
            Landscape::G0 => 0.0,
            Landscape::G1 => FRAC_PI_8,
            Landscape::G2 => FRAC_PI_4,
            Landscape::Angle(a) => a,
        }
    }

    pub fn apply(self, base: &GoalLayout) -> GoalLayout {
        match self {
            Landscape::G0 => base.clone(),
            other => base.rotate(other.angle()),
        }
    }
}

impl fmt::Display for Landscape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Landscape::G0 => f.write_str("G0"),
            Landscape::G1 => f.write_str("G1"),
            Landscape::G2 => f.write_str("G2"),
            Landscape::Angle(a) => write!(f, "{a}"),
        }
    }
}

impl Serialize for Landscape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Landscape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Landscape {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "G0" | "g0" => Ok(Landscape::G0),
            "G1" | "g1" => Ok(Landscape::G1),
            "G2" | "g2" => Ok(Landscape::G2),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|a| a.is_finite())
                .map(Landscape::Angle)
                .ok_or_else(|| {
                    EnvError::InvalidConfig(format!(
                        "landscape must be G0, G1, G2 or an angle in radians, got {other:?}"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub layout: GoalLayout,
    pub max_steps: usize,
    pub action_bound: f64,
    pub workspace_bound: f64,
    pub obs_noise_std: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            layout: GoalLayout::diagonal(),
            max_steps: 50,
            action_bound: 0.1,
            workspace_bound: 1.5,
            obs_noise_std: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.layout.validate()?;
        if self.max_steps == 0 {
            return Err(EnvError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if !(self.action_bound > 0.0) || !(self.workspace_bound > 0.0) {
            return Err(EnvError::InvalidConfig(
                "action_bound and workspace_bound must be positive".into(),
            ));
        }
        if !(self.obs_noise_std >= 0.0) {
            return Err(EnvError::InvalidConfig("obs_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_landscape(&self, landscape: Landscape) -> Self {
        Self {
            layout: landscape.apply(&self.layout),
            ..self.clone()
        }
    }

    pub fn clip_action(&self, a: Point) -> Point {
        let b = self.action_bound;
        [a[0].clamp(-b, b), a[1].clamp(-b, b)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: Point,
    pub step_count: usize,
    pub done: bool,
}

impl EnvState {
    pub fn at(position: Point) -> Self {
        Self {
            position,
            step_count: 0,
            done: false,
        }
    }
}

impl Default for EnvState {
    fn default() -> Self {
        Self::at([0.0, 0.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    /// Position as seen by the agent, with observation noise.
    pub observation: Point,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Advances one step. Observation noise is drawn only when its std is positive.
pub fn step<R: Rng + ?Sized>(
    state: &EnvState,
    action: Point,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<StepOutcome, EnvError> {
    if state.done || state.step_count >= cfg.max_steps {
        return Err(EnvError::EpisodeFinished);
    }
    let a = cfg.clip_action(action);
    let wb = cfg.workspace_bound;
    let position = [
        (state.position[0] + a[0]).clamp(-wb, wb),
        (state.position[1] + a[1]).clamp(-wb, wb),
    ];
    let step_count = state.step_count + 1;
    let success = cfg.layout.mode_at(position).is_some();
    let done = success || step_count == cfg.max_steps;
    let observation = if cfg.obs_noise_std > 0.0 {
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        [
            position[0] + cfg.obs_noise_std * nx,
            position[1] + cfg.obs_noise_std * ny,
        ]
    } else {
        position
    };
    Ok(StepOutcome {
        state: EnvState {
            position,
            step_count,
            done,
        },
        observation,
        reward: cfg.layout.reward(position),
        done,
        success,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<Point>,
    pub actions: Vec<Point>,
    pub rewards: Vec<f64>,
    pub success: bool,
    pub mode_id: Option<usize>,
}

impl Trajectory {
    pub fn start(position: Point) -> Self {
        Self {
            states: vec![position],
            ..Self::default()
        }
    }

    pub fn push(&mut self, action: Point, outcome: &StepOutcome) {
        self.actions.push(action);
        self.states.push(outcome.state.position);
        self.rewards.push(outcome.reward);
        self.success = outcome.success;
    }

    pub fn final_state(&self) -> Option<Point> {
        self.states.last().copied()
    }
}

/// Mode of the goal the trajectory ended in, if any.
pub fn assign_mode(trajectory: &Trajectory, layout: &GoalLayout) -> Option<usize> {
    trajectory.final_state().and_then(|p| layout.mode_at(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn reward_at_center_is_one() {
        let layout = GoalLayout::diagonal();
        for &c in layout.centers() {
            // nearest other center is sqrt(2) away: exp(-2 / 0.08) = e^-25
            assert!((layout.reward(c) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_sigma_gives_k_everywhere() {
        let layout = GoalLayout::new(GoalLayout::diagonal().centers().to_vec(), 1e9, 0.15).unwrap();
        assert!((layout.reward([0.3, -1.2]) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(GoalLayout::new(vec![], 0.2, 0.15).is_err());
        assert!(GoalLayout::new(vec![[0.0, 0.0], [0.0, 0.0]], 0.2, 0.15).is_err());
        assert!(GoalLayout::new(vec![[0.0, 0.0]], 0.0, 0.15).is_err());
    }

    #[test]
    fn zero_action_keeps_position() {
        let cfg = EnvConfig::default();
        let s = EnvState::at([0.2, -0.3]);
        let out = step(&s, [0.0, 0.0], &cfg, &mut rng()).unwrap();
        assert_eq!(out.state.position, [0.2, -0.3]);
        assert_eq!(out.reward, cfg.layout.reward([0.2, -0.3]));
    }

    #[test]
    fn action_is_clipped() {
        let cfg = EnvConfig::default();
        let out = step(&EnvState::default(), [10.0, 10.0], &cfg, &mut rng()).unwrap();
        assert_eq!(out.state.position, [0.1, 0.1]);
    }

    #[test]
    fn position_is_clamped_to_workspace() {
        let cfg = EnvConfig::default();
        let out = step(&EnvState::at([1.45, -1.45]), [0.1, -0.1], &cfg, &mut rng()).unwrap();
        assert_eq!(out.state.position, [1.5, -1.5]);
    }

    #[test]
    fn diagonal_walk_reaches_goal() {
        let cfg = EnvConfig::default();
        let mut s = EnvState::default();
        let mut done_at = None;
        for t in 1..=11 {
            let out = step(&s, [0.071, 0.071], &cfg, &mut rng()).unwrap();
            s = out.state;
            if out.done {
                done_at = Some(t);
                break;
            }
        }
        // goal is at distance 1, success radius 0.15, 0.1004 per step: 9 steps
        assert_eq!(done_at, Some(9));
        assert_eq!(cfg.layout.mode_at(s.position), Some(0));
    }

    #[test]
    fn episode_ends_at_horizon_and_rejects_further_steps() {
        let cfg = EnvConfig {
            max_steps: 3,
            ..EnvConfig::default()
        };
        let mut s = EnvState::default();
        for t in 0..3 {
            let out = step(&s, [0.0, 0.0], &cfg, &mut rng()).unwrap();
            assert_eq!(out.done, t == 2);
            s = out.state;
        }
        assert!(matches!(
            step(&s, [0.0, 0.0], &cfg, &mut rng()),
            Err(EnvError::EpisodeFinished)
        ));
    }

    #[test]
    fn observation_noise_leaves_state_clean() {
        let cfg = EnvConfig {
            obs_noise_std: 0.5,
            ..EnvConfig::default()
        };
        let out = step(&EnvState::default(), [0.05, 0.0], &cfg, &mut rng()).unwrap();
        assert_eq!(out.state.position, [0.05, 0.0]);
        assert_ne!(out.observation, out.state.position);
        assert_eq!(out.reward, cfg.layout.reward([0.05, 0.0]));
    }

    #[test]
    fn full_rotation_is_identity() {
        let layout = GoalLayout::diagonal();
        let rotated = layout.rotate(2.0 * std::f64::consts::PI);
        for (a, b) in layout.centers().iter().zip(rotated.centers()) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_pi_rotation_lands_on_axes() {
        let rotated = GoalLayout::diagonal().rotate(FRAC_PI_4);
        let expected = [[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]];
        for (c, e) in rotated.centers().iter().zip(expected) {
            assert!((c[0] - e[0]).abs() < 1e-12 && (c[1] - e[1]).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn landscape_angles() {
        assert_eq!(Landscape::G1.angle(), FRAC_PI_8);
        assert_eq!(Landscape::G2.angle(), FRAC_PI_4);
        assert_eq!("G2".parse::<Landscape>().unwrap(), Landscape::G2);
        assert_eq!("0.5".parse::<Landscape>().unwrap(), Landscape::Angle(0.5));
        assert!("G7".parse::<Landscape>().is_err());
    }

    #[test]
    fn assign_mode_cases() {
        let layout = GoalLayout::diagonal();
        let mut traj = Trajectory::start([0.0, 0.0]);
        assert_eq!(assign_mode(&traj, &layout), None);
        traj.states.push(layout.centers()[2]);
        assert_eq!(assign_mode(&traj, &layout), Some(2));

        let degenerate =
            GoalLayout::new(vec![[5.0, 5.0], [0.1, 0.0], [7.0, 7.0], [-0.1, 0.0]], 0.2, 0.15).unwrap();
        assert_eq!(assign_mode(&Trajectory::start([0.0, 0.0]), &degenerate), Some(1));
    }
}
