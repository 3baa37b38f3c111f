//! Deterministic continuous-control toy environments with unsafe terminal states.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    /// Lower bound on every step reward; also the shield penalty.
    pub min_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub crashed: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; the initial state depends only on `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Actions are clamped to `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;

    fn state(&self) -> Vec<f64>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn spec(&self) -> &EnvSpec {
        (**self).spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        (**self).reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        (**self).step(action)
    }

    fn state(&self) -> Vec<f64> {
        (**self).state()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "cliff2d")]
    Cliff2d,
    #[serde(rename = "polebalance")]
    PoleBalance,
}

impl EnvKind {
    pub fn id(self) -> &'static str {
        match self {
            EnvKind::Cliff2d => "cliff2d",
            EnvKind::PoleBalance => "polebalance",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::Cliff2d => CliffWorld2D::spec_const(),
            EnvKind::PoleBalance => PoleBalance::spec_const(),
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvKind::Cliff2d => Box::new(CliffWorld2D::new()),
            EnvKind::PoleBalance => Box::new(PoleBalance::new()),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cliff2d" => Ok(EnvKind::Cliff2d),
            "polebalance" => Ok(EnvKind::PoleBalance),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

pub fn make_env(id: &str) -> Result<Box<dyn Environment>> {
    Ok(id.parse::<EnvKind>()?.make())
}

/// Penalty reward assigned to filtered transitions for the given env.
pub fn min_reward(id: &str) -> Result<f64> {
    Ok(id.parse::<EnvKind>()?.spec().min_reward)
}

fn clamp_action(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: action.len(),
        });
    }
    if action.iter().any(|a| a.is_nan()) {
        return Err(Error::NonFinite("action".into()));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

pub mod cliff {
    pub const START: [f64; 2] = [0.1, 0.5];
    pub const GOAL: [f64; 2] = [0.9, 0.5];
    pub const HAZARD_CENTER: [f64; 2] = [0.5, 0.5];
    pub const HAZARD_RADIUS: f64 = 0.15;
    pub const GOAL_TOLERANCE: f64 = 0.05;
    pub const DAMPING: f64 = 0.9;
    pub const THRUST: f64 = 0.1;
    pub const DT: f64 = 0.05;
    pub const HORIZON: usize = 200;
    pub const RESET_NOISE: f64 = 0.02;
}

/// Point mass in the unit square steering around a hazard disc toward a goal.
///
/// State is `(x, y, vx, vy)`. Leaving the square or entering the disc crashes.
#[derive(Debug, Clone)]
pub struct CliffWorld2D {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
    done: bool,
}

impl Default for CliffWorld2D {
    fn default() -> Self {
        Self::new()
    }
}

impl CliffWorld2D {
    pub fn new() -> Self {
        Self {
            spec: Self::spec_const(),
            pos: cliff::START,
            vel: [0.0; 2],
            steps: 0,
            done: false,
        }
    }

    fn spec_const() -> EnvSpec {
        EnvSpec {
            id: "cliff2d".into(),
            state_dim: 4,
            action_dim: 2,
            horizon: cliff::HORIZON,
            min_reward: -std::f64::consts::SQRT_2,
        }
    }

    /// Places the agent at an arbitrary state and starts a fresh episode there.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.pos = [state[0], state[1]];
        self.vel = [state[2], state[3]];
        self.steps = 0;
        self.done = false;
    }

    pub fn goal_distance(pos: [f64; 2]) -> f64 {
        ((pos[0] - cliff::GOAL[0]).powi(2) + (pos[1] - cliff::GOAL[1]).powi(2)).sqrt()
    }

    pub fn is_unsafe(pos: [f64; 2]) -> bool {
        let hx = pos[0] - cliff::HAZARD_CENTER[0];
        let hy = pos[1] - cliff::HAZARD_CENTER[1];
        let in_hazard = (hx * hx + hy * hy).sqrt() < cliff::HAZARD_RADIUS;
        let outside = pos.iter().any(|p| !(0.0..=1.0).contains(p));
        in_hazard || outside
    }
}

impl Environment for CliffWorld2D {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        let noise = cliff::RESET_NOISE;
        self.pos = [
            cliff::START[0] + rng.gen_range(-noise..=noise),
            cliff::START[1] + rng.gen_range(-noise..=noise),
        ];
        self.vel = [0.0; 2];
        self.steps = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = clamp_action(action, 2)?;
        for k in 0..2 {
            self.vel[k] = (cliff::DAMPING * self.vel[k] + cliff::THRUST * a[k]).clamp(-1.0, 1.0);
            self.pos[k] += cliff::DT * self.vel[k];
        }
        self.steps += 1;
        let dist = Self::goal_distance(self.pos);
        let crashed = Self::is_unsafe(self.pos);
        let reached = !crashed && dist < cliff::GOAL_TOLERANCE;
        self.done = crashed || reached || self.steps >= cliff::HORIZON;
        Ok(StepResult {
            next_state: self.state(),
            reward: -dist,
            done: self.done,
            crashed,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

pub mod pole {
    pub const FORCE_SCALE: f64 = 10.0;
    pub const DT: f64 = 0.02;
    pub const GRAVITY: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    pub const HALF_LENGTH: f64 = 0.5;
    pub const ANGLE_LIMIT: f64 = 0.2095;
    pub const POSITION_LIMIT: f64 = 2.4;
    pub const HORIZON: usize = 500;
    pub const RESET_NOISE: f64 = 0.05;
    /// Shield penalty; the alive reward itself never drops below 0.
    pub const PENALTY: f64 = -1.0;
}

/// Cart-pole with a continuous force, Euler-integrated.
///
/// State is `(x, x_dot, theta, theta_dot)`; +1 per surviving step.
#[derive(Debug, Clone)]
pub struct PoleBalance {
    spec: EnvSpec,
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl Default for PoleBalance {
    fn default() -> Self {
        Self::new()
    }
}

impl PoleBalance {
    pub fn new() -> Self {
        Self {
            spec: Self::spec_const(),
            state: [0.0; 4],
            steps: 0,
            done: false,
        }
    }

    fn spec_const() -> EnvSpec {
        EnvSpec {
            id: "polebalance".into(),
            state_dim: 4,
            action_dim: 1,
            horizon: pole::HORIZON,
            min_reward: pole::PENALTY,
        }
    }

    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }
}

impl Environment for PoleBalance {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        let noise = pole::RESET_NOISE;
        for v in &mut self.state {
            *v = rng.gen_range(-noise..=noise);
        }
        self.steps = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        use pole::*;
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = clamp_action(action, 1)?;
        let force = FORCE_SCALE * a[0];
        let [x, x_dot, theta, theta_dot] = self.state;
        let total_mass = CART_MASS + POLE_MASS;
        let pole_ml = POLE_MASS * HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_ml * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
        let x_acc = temp - pole_ml * theta_acc * cos / total_mass;
        self.state = [
            x + DT * x_dot,
            x_dot + DT * x_acc,
            theta + DT * theta_dot,
            theta_dot + DT * theta_acc,
        ];
        self.steps += 1;
        let crashed = self.state[2].abs() > ANGLE_LIMIT || self.state[0].abs() > POSITION_LIMIT;
        self.done = crashed || self.steps >= HORIZON;
        Ok(StepResult {
            next_state: self.state(),
            reward: if crashed { 0.0 } else { 1.0 },
            done: self.done,
            crashed,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.to_vec()
    }
}
