//! Planar point-reaching environments for the assistive presets.
//!
//! A 2-D end effector starts at a random offset from the target and is
//! driven by acceleration commands. Every step reports the task reward and the
//! six preference cost items `[C_d, C_v, C_f, C_hf, C_fd, C_fdv]`. The three
//! presets share one dynamics routine and differ only in thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const STATE_DIM: usize = 7;
pub const ACTION_DIM: usize = 2;
pub const NUM_COSTS: usize = 6;

/// Multiplier on the spill rate `(|v| - v_spill) * dt`.
pub const SPILL_RATE: f64 = 0.02;
pub const SUCCESS_BONUS: f64 = 10.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeDone,
    #[error("action must have {ACTION_DIM} finite entries, got {0:?}")]
    BadAction(Vec<f64>),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("preference weights must have {NUM_COSTS} non-negative entries, got {0:?}")]
    BadWeights(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Feeding,
    Drinking,
    Scratching,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Feeding, Preset::Drinking, Preset::Scratching];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Feeding => "feeding",
            Preset::Drinking => "drinking",
            Preset::Scratching => "scratching",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "feeding" => Ok(Preset::Feeding),
            "drinking" => Ok(Preset::Drinking),
            "scratching" => Ok(Preset::Scratching),
            other => Err(EnvError::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub preset: Preset,
    /// Episode length T in steps.
    pub horizon: usize,
    /// Integration step in seconds.
    pub dt: f64,
    /// Per-axis acceleration bound (m/s²).
    pub action_bound: f64,
    /// Radius around the target that counts as "near" (m).
    pub near_radius: f64,
    /// Acceleration norm above which near-target force is "high" (m/s²).
    pub force_threshold: f64,
    pub success_radius: f64,
    /// Speed above which payload spills inside the near radius (m/s).
    pub spill_velocity: f64,
    /// Payload fraction required for success.
    pub payload_min: f64,
    /// Whether the payload model and payload cost items are active.
    pub has_payload: bool,
    /// Start-to-target distance band (m).
    pub spawn_min: f64,
    pub spawn_max: f64,
    /// Targets are drawn uniformly from `[-extent, extent]²`.
    pub target_extent: f64,
    /// Per-step constant added to preference returns when scoring.
    pub return_offset: f64,
}

impl EnvConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            horizon: 50,
            dt: 0.1,
            action_bound: 3.0,
            near_radius: 0.3,
            force_threshold: 1.0,
            success_radius: 0.1,
            spill_velocity: 0.3,
            payload_min: 0.99,
            has_payload: true,
            spawn_min: 0.6,
            spawn_max: 1.0,
            target_extent: 0.5,
            return_offset: 3.0,
        };
        match preset {
            Preset::Feeding => base,
            Preset::Drinking => Self {
                success_radius: 0.12,
                spill_velocity: 0.2,
                payload_min: 0.995,
                ..base
            },
            Preset::Scratching => Self {
                success_radius: 0.12,
                near_radius: 0.4,
                force_threshold: 0.6,
                has_payload: false,
                payload_min: 0.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("dt", self.dt),
            ("action_bound", self.action_bound),
            ("near_radius", self.near_radius),
            ("force_threshold", self.force_threshold),
            ("success_radius", self.success_radius),
            ("spill_velocity", self.spill_velocity),
            ("spawn_min", self.spawn_min),
            ("target_extent", self.target_extent),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EnvError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.horizon < 1 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if !(self.spawn_max >= self.spawn_min) {
            return Err(EnvError::InvalidConfig("spawn_max must be >= spawn_min".into()));
        }
        if !(0.0..=1.0).contains(&self.payload_min) {
            return Err(EnvError::InvalidConfig("payload_min must lie in [0, 1]".into()));
        }
        if !self.return_offset.is_finite() {
            return Err(EnvError::InvalidConfig("return_offset must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub target: [f64; 2],
    pub payload: f64,
    pub step: usize,
    pub done: bool,
}

impl EnvState {
    /// Observation vector `[px, py, vx, vy, tx, ty, payload]`.
    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.target[0],
            self.target[1],
            self.payload,
        ]
    }

    pub fn distance(&self) -> f64 {
        norm2([self.pos[0] - self.target[0], self.pos[1] - self.target[1]])
    }

    pub fn speed(&self) -> f64 {
        norm2(self.vel)
    }
}

/// The six per-step preference cost items of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrefCostVector(pub [f64; NUM_COSTS]);

impl PrefCostVector {
    pub fn distance(&self) -> f64 {
        self.0[0]
    }
    pub fn velocity(&self) -> f64 {
        self.0[1]
    }
    pub fn force(&self) -> f64 {
        self.0[2]
    }
    pub fn high_force(&self) -> f64 {
        self.0[3]
    }
    pub fn spill(&self) -> f64 {
        self.0[4]
    }
    pub fn entry_velocity(&self) -> f64 {
        self.0[5]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub task_reward: f64,
    pub costs: PrefCostVector,
    pub done: bool,
    pub success: bool,
}

#[inline]
fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Fresh episode: target uniform in the extent box, start at a uniform
/// distance in the spawn band and uniform bearing, at rest, payload full.
pub fn reset(config: &EnvConfig, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = config.target_extent;
    let target = [rng.random_range(-e..=e), rng.random_range(-e..=e)];
    let dist = rng.random_range(config.spawn_min..=config.spawn_max);
    let bearing = rng.random_range(0.0..std::f64::consts::TAU);
    EnvState {
        pos: [target[0] + dist * bearing.cos(), target[1] + dist * bearing.sin()],
        vel: [0.0, 0.0],
        target,
        payload: 1.0,
        step: 0,
        done: false,
    }
}

/// Clamps each action coordinate to `[-bound, bound]`.
pub fn clamp_action(config: &EnvConfig, action: &[f64]) -> [f64; 2] {
    let b = config.action_bound;
    [action[0].clamp(-b, b), action[1].clamp(-b, b)]
}

/// Advances one semi-explicit Euler step (`pos += v dt`, then `v += a dt`).
pub fn step(config: &EnvConfig, state: &EnvState, action: &[f64]) -> Result<StepOutcome, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeDone);
    }
    if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::BadAction(action.to_vec()));
    }
    let a = clamp_action(config, action);
    let dt = config.dt;
    let pos = [state.pos[0] + state.vel[0] * dt, state.pos[1] + state.vel[1] * dt];
    let vel = [state.vel[0] + a[0] * dt, state.vel[1] + a[1] * dt];
    let dist = norm2([pos[0] - state.target[0], pos[1] - state.target[1]]);
    let speed = norm2(vel);
    let force = norm2(a);
    let near = dist <= config.near_radius;

    let spill = if config.has_payload && near && speed > config.spill_velocity {
        (SPILL_RATE * (speed - config.spill_velocity) * dt).min(state.payload)
    } else {
        0.0
    };
    let payload = state.payload - spill;
    let success = dist <= config.success_radius && payload >= config.payload_min;
    let step_idx = state.step + 1;
    let done = success || step_idx >= config.horizon;

    let costs = PrefCostVector([
        dist,
        speed,
        if near { 0.0 } else { force },
        if near && force > config.force_threshold { force } else { 0.0 },
        spill,
        if config.has_payload && success { speed } else { 0.0 },
    ]);
    let task_reward = -dist + if success { SUCCESS_BONUS } else { 0.0 };
    Ok(StepOutcome {
        state: EnvState {
            pos,
            vel,
            target: state.target,
            payload,
            step: step_idx,
            done,
        },
        task_reward,
        costs,
        done,
        success,
    })
}

/// Named preference weight presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserType {
    Neutral,
    Cautious,
    Impatient,
}

impl UserType {
    pub const ALL: [UserType; 3] = [UserType::Neutral, UserType::Cautious, UserType::Impatient];

    pub fn weights(self) -> [f64; NUM_COSTS] {
        match self {
            UserType::Neutral => [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            UserType::Cautious => [1.0, 2.0, 1.5, 2.5, 3.0, 2.0],
            UserType::Impatient => [2.0, 0.5, 0.75, 0.5, 1.5, 0.5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UserType::Neutral => "neutral",
            UserType::Cautious => "cautious",
            UserType::Impatient => "impatient",
        }
    }
}

impl std::str::FromStr for UserType {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(UserType::Neutral),
            "cautious" => Ok(UserType::Cautious),
            "impatient" => Ok(UserType::Impatient),
            other => Err(EnvError::InvalidConfig(format!("unknown user type {other:?}"))),
        }
    }
}

/// Per-step preference reward `-(ω · costs)`; higher is preferred.
pub fn pref_reward(costs: &PrefCostVector, omega: &[f64]) -> Result<f64, EnvError> {
    if omega.len() != NUM_COSTS || omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(EnvError::BadWeights(omega.to_vec()));
    }
    Ok(-costs.0.iter().zip(omega).map(|(c, w)| c * w).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feeding() -> EnvConfig {
        EnvConfig::preset(Preset::Feeding)
    }

    #[test]
    fn reset_is_deterministic_and_preset_independent() {
        assert_eq!(reset(&feeding(), 42), reset(&feeding(), 42));
        let a = reset(&feeding(), 7);
        let b = reset(&EnvConfig::preset(Preset::Scratching), 7);
        assert_eq!(a, b);
        assert_eq!(a.payload, 1.0);
        assert_eq!(a.step, 0);
    }

    #[test]
    fn spawn_distance_within_band() {
        let cfg = feeding();
        for seed in 0..1000 {
            let d = reset(&cfg, seed).distance();
            assert!(d >= cfg.spawn_min - 1e-12 && d <= cfg.spawn_max + 1e-12, "seed {seed}: {d}");
        }
    }

    #[test]
    fn zero_action_at_rest_is_static() {
        let cfg = feeding();
        let s = reset(&cfg, 1);
        let out = step(&cfg, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(out.state.pos, s.pos);
        assert_eq!(out.costs.velocity(), 0.0);
        assert_eq!(out.costs.force(), 0.0);
        assert_eq!(out.costs.high_force(), 0.0);
        assert_eq!(out.state.step, 1);
    }

    #[test]
    fn success_at_target_with_full_payload() {
        let cfg = feeding();
        let s = EnvState {
            pos: [0.01, 0.0],
            vel: [0.0, 0.0],
            target: [0.0, 0.0],
            payload: 1.0,
            step: 3,
            done: false,
        };
        let out = step(&cfg, &s, &[0.1, 0.0]).unwrap();
        assert!(out.success && out.done);
        assert!((out.task_reward - (SUCCESS_BONUS - 0.01)).abs() < 1e-12);
        // Entry-velocity cost is the post-step speed.
        assert!((out.costs.entry_velocity() - 0.01).abs() < 1e-12);
        assert!(matches!(step(&cfg, &out.state, &[0.0, 0.0]), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn fast_motion_near_target_spills() {
        let cfg = feeding();
        let s = EnvState {
            pos: [0.2, 0.0],
            vel: [-1.0, 0.0],
            target: [0.0, 0.0],
            payload: 1.0,
            step: 0,
            done: false,
        };
        let out = step(&cfg, &s, &[0.0, 0.0]).unwrap();
        // pos -> 0.1 (inside the near radius), speed 1.0 > 0.3.
        let expected = SPILL_RATE * (1.0 - cfg.spill_velocity) * cfg.dt;
        assert!((out.costs.spill() - expected).abs() < 1e-15);
        assert!(out.state.payload < 1.0);
    }

    #[test]
    fn scratching_has_no_payload_costs() {
        let cfg = EnvConfig::preset(Preset::Scratching);
        let s = EnvState {
            pos: [0.05, 0.0],
            vel: [-0.5, 0.0],
            target: [0.0, 0.0],
            payload: 1.0,
            step: 0,
            done: false,
        };
        let out = step(&cfg, &s, &[0.0, 0.0]).unwrap();
        assert!(out.success);
        assert_eq!(out.costs.spill(), 0.0);
        assert_eq!(out.costs.entry_velocity(), 0.0);
    }

    #[test]
    fn force_items_split_by_distance() {
        let cfg = feeding();
        let far = EnvState { pos: [1.0, 0.0], vel: [0.0; 2], target: [0.0; 2], payload: 1.0, step: 0, done: false };
        let out = step(&cfg, &far, &[2.0, 0.0]).unwrap();
        assert_eq!(out.costs.force(), 2.0);
        assert_eq!(out.costs.high_force(), 0.0);
        let near = EnvState { pos: [0.2, 0.0], ..far.clone() };
        let out = step(&cfg, &near, &[2.0, 0.0]).unwrap();
        assert_eq!(out.costs.force(), 0.0);
        assert_eq!(out.costs.high_force(), 2.0);
        let gentle = step(&cfg, &near, &[0.5, 0.0]).unwrap();
        assert_eq!(gentle.costs.high_force(), 0.0);
    }

    #[test]
    fn actions_are_clamped_and_validated() {
        let cfg = feeding();
        let s = reset(&cfg, 3);
        let big = step(&cfg, &s, &[100.0, -100.0]).unwrap();
        let bounded = step(&cfg, &s, &[cfg.action_bound, -cfg.action_bound]).unwrap();
        assert_eq!(big, bounded);
        assert!(step(&cfg, &s, &[f64::NAN, 0.0]).is_err());
        assert!(step(&cfg, &s, &[0.0]).is_err());
    }

    #[test]
    fn horizon_ends_episode() {
        let cfg = EnvConfig { horizon: 3, ..feeding() };
        let mut s = reset(&cfg, 0);
        for i in 0..3 {
            let out = step(&cfg, &s, &[0.0, 0.0]).unwrap();
            assert_eq!(out.done, i == 2);
            s = out.state;
        }
    }

    #[test]
    fn pref_reward_examples() {
        let zero = PrefCostVector::default();
        assert_eq!(pref_reward(&zero, &UserType::Neutral.weights()).unwrap(), 0.0);
        let c = PrefCostVector([1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(pref_reward(&c, &UserType::Cautious.weights()).unwrap(), -3.0);
        let c = PrefCostVector([0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(pref_reward(&c, &UserType::Impatient.weights()).unwrap(), -1.0);
        assert!(pref_reward(&c, &[1.0; 5]).is_err());
        assert!(pref_reward(&c, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(feeding().validate().is_ok());
        assert!(EnvConfig { horizon: 0, ..feeding() }.validate().is_err());
        assert!(EnvConfig { success_radius: 0.0, ..feeding() }.validate().is_err());
        assert!(EnvConfig { spawn_max: 0.1, ..feeding() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariants_hold_on_random_rollouts(seed in 0u64..10_000, actions in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 50)) {
                for preset in Preset::ALL {
                    let cfg = EnvConfig::preset(preset);
                    let mut s = reset(&cfg, seed);
                    for &(ax, ay) in &actions {
                        let out = step(&cfg, &s, &[ax, ay]).unwrap();
                        prop_assert!(out.costs.0.iter().all(|c| *c >= 0.0));
                        prop_assert!(out.state.payload <= s.payload);
                        if out.success {
                            prop_assert!(out.state.distance() <= cfg.success_radius);
                        }
                        if preset == Preset::Scratching {
                            prop_assert_eq!(out.costs.spill(), 0.0);
                            prop_assert_eq!(out.costs.entry_velocity(), 0.0);
                        }
                        s = out.state;
                        if out.done { break; }
                    }
                }
            }

            #[test]
            fn pref_reward_scales_linearly(c in prop::array::uniform6(0.0f64..5.0), k in 0.1f64..10.0) {
                let w = UserType::Cautious.weights();
                let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
                let base = pref_reward(&PrefCostVector(c), &w).unwrap();
                let s = pref_reward(&PrefCostVector(c), &scaled).unwrap();
                prop_assert!((s - k * base).abs() <= 1e-9 * (1.0 + s.abs()));
            }
        }
    }
}
