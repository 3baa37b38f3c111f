//! Per-step intervention around an environment and an agent.
//!
//! Each loop iteration appends the candidate step to the running trajectory,
//! asks the filter for a verdict and either executes the action or ends the
//! episode with a fabricated, penalized transition. A filtered action never
//! reaches the environment.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::dynamics::DynamicsModel;
use crate::envs::{EnvSpec, Environment, StepResult};
use crate::error::{Error, Result};
use crate::filters::{evaluate, DemoGroups, FilterDecision, StepEvaluator, StrategySpec};
use crate::types::{EpisodeRecord, ReplayMemory, Trajectory, TrajectoryMode, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldConfig {
    pub strategy: StrategySpec,
    pub mode: TrajectoryMode,
    /// Reward stored for filtered transitions.
    pub r_task: f64,
    pub enabled: bool,
}

impl ShieldConfig {
    pub fn new(strategy: StrategySpec, mode: TrajectoryMode, env: &EnvSpec) -> Self {
        Self {
            strategy,
            mode,
            r_task: env.min_reward,
            enabled: true,
        }
    }

    pub fn disabled(strategy: StrategySpec, mode: TrajectoryMode, env: &EnvSpec) -> Self {
        Self {
            enabled: false,
            ..Self::new(strategy, mode, env)
        }
    }

    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        if !self.r_task.is_finite() || self.r_task > env.min_reward {
            return Err(Error::Config(format!(
                "penalty reward {} must not exceed the minimum step reward {} of {}",
                self.r_task, env.min_reward, env.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShieldStats {
    pub episodes: u64,
    pub crashes: u64,
    pub filtered_episodes: u64,
    pub env_steps: u64,
    pub loop_iterations: u64,
    pub wall_time_shield: Duration,
    pub wall_time_total: Duration,
}

impl ShieldStats {
    pub fn merge(&mut self, other: &ShieldStats) {
        self.episodes += other.episodes;
        self.crashes += other.crashes;
        self.filtered_episodes += other.filtered_episodes;
        self.env_steps += other.env_steps;
        self.loop_iterations += other.loop_iterations;
        self.wall_time_shield += other.wall_time_shield;
        self.wall_time_total += other.wall_time_total;
    }

    pub fn crash_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.crashes as f64 / self.episodes as f64
        }
    }
}

/// Result of one loop iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub transition: Transition,
    /// `None` when the shield is disabled.
    pub decision: Option<FilterDecision>,
}

fn real_transition(s: &[f64], a: &[f64], r: StepResult) -> Transition {
    Transition {
        state: s.to_vec(),
        action: a.to_vec(),
        reward: r.reward,
        next_state: r.next_state,
        done: r.done,
        crashed: r.crashed,
        filtered: false,
    }
}

fn filtered_transition(
    cfg: &ShieldConfig,
    dynamics: &DynamicsModel,
    s: &[f64],
    a: &[f64],
) -> Result<Transition> {
    Ok(Transition {
        state: s.to_vec(),
        action: a.to_vec(),
        reward: cfg.r_task,
        next_state: dynamics.predict_next(s, a)?,
        done: true,
        crashed: false,
        filtered: true,
    })
}

fn check_mode(cfg: &ShieldConfig, demos: &DemoGroups) -> Result<()> {
    if cfg.mode != demos.mode() {
        return Err(Error::Config(format!(
            "shield mode {} does not match demonstration mode {}",
            cfg.mode,
            demos.mode()
        )));
    }
    Ok(())
}

/// Reference single step: extends `traj` with the candidate and re-evaluates
/// it from scratch. [`Shield`] is the incremental equivalent.
pub fn shield_step(
    cfg: &ShieldConfig,
    demos: &DemoGroups,
    dynamics: &DynamicsModel,
    env: &mut dyn Environment,
    traj: &mut Trajectory,
    s: &[f64],
    a: &[f64],
) -> Result<StepOutcome> {
    if !cfg.enabled {
        return Ok(StepOutcome {
            transition: real_transition(s, a, env.step(a)?),
            decision: None,
        });
    }
    check_mode(cfg, demos)?;
    traj.push(demos.featurize(s, a)?)?;
    let decision = evaluate(&cfg.strategy, traj, demos)?;
    let transition = if decision.is_filter() {
        filtered_transition(cfg, dynamics, s, a)?
    } else {
        real_transition(s, a, env.step(a)?)
    };
    Ok(StepOutcome {
        transition,
        decision: Some(decision),
    })
}

/// Stateful per-episode shield backed by an incremental evaluator.
pub struct Shield<'d> {
    cfg: ShieldConfig,
    evaluator: Option<StepEvaluator<'d>>,
    shield_time: Duration,
}

impl<'d> Shield<'d> {
    /// `demos` may be `None` only when the shield is disabled.
    pub fn new(cfg: ShieldConfig, demos: Option<&'d DemoGroups>) -> Result<Self> {
        let evaluator = match (cfg.enabled, demos) {
            (false, _) => None,
            (true, Some(d)) => {
                check_mode(&cfg, d)?;
                Some(StepEvaluator::new(cfg.strategy, d)?)
            }
            (true, None) => {
                return Err(Error::Config("an enabled shield needs demonstrations".into()))
            }
        };
        Ok(Self {
            cfg,
            evaluator,
            shield_time: Duration::ZERO,
        })
    }

    pub fn config(&self) -> &ShieldConfig {
        &self.cfg
    }

    /// Time spent on verdicts and fabricated successors so far.
    pub fn shield_time(&self) -> Duration {
        self.shield_time
    }

    pub fn step(
        &mut self,
        dynamics: Option<&DynamicsModel>,
        env: &mut dyn Environment,
        s: &[f64],
        a: &[f64],
    ) -> Result<StepOutcome> {
        let Some(evaluator) = self.evaluator.as_mut() else {
            return Ok(StepOutcome {
                transition: real_transition(s, a, env.step(a)?),
                decision: None,
            });
        };
        let started = Instant::now();
        let decision = evaluator.push_raw(s, a)?;
        let transition = if decision.is_filter() {
            let dynamics = dynamics
                .ok_or_else(|| Error::Config("an enabled shield needs a dynamics model".into()))?;
            let t = filtered_transition(&self.cfg, dynamics, s, a)?;
            self.shield_time += started.elapsed();
            t
        } else {
            self.shield_time += started.elapsed();
            real_transition(s, a, env.step(a)?)
        };
        Ok(StepOutcome {
            transition,
            decision: Some(decision),
        })
    }
}

/// Per-episode summary returned by [`run_episode`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub record: EpisodeRecord,
    pub stats: ShieldStats,
    pub acc_reward: f64,
    pub crashed: bool,
    pub filtered: bool,
    /// Index (0-based) of the filtered step, if any.
    pub filtered_at: Option<usize>,
}

/// Learning and exploration switches for [`run_episode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopOptions {
    pub explore: bool,
    pub learn: bool,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            explore: true,
            learn: true,
        }
    }
}

/// Runs one episode. Every transition, filtered or real, goes to `memory`;
/// when `opts.learn` is set the agent and the dynamics model each get one
/// update per loop iteration.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    cfg: &ShieldConfig,
    demos: Option<&DemoGroups>,
    mut dynamics: Option<&mut DynamicsModel>,
    env: &mut dyn Environment,
    agent: &mut dyn Agent,
    memory: &mut ReplayMemory,
    seed: u64,
    opts: LoopOptions,
) -> Result<EpisodeOutcome> {
    let started = Instant::now();
    cfg.validate(env.spec())?;
    let mut shield = Shield::new(*cfg, demos)?;
    let env_id = env.spec().id.clone();
    let mut s = env.reset(seed);
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut stats = ShieldStats {
        episodes: 1,
        ..ShieldStats::default()
    };
    let mut crashed = false;
    let mut filtered_at = None;
    loop {
        let a = agent.act(&s, opts.explore)?;
        let out = shield.step(dynamics.as_deref(), env, &s, &a)?;
        let t = out.transition;
        stats.loop_iterations += 1;
        if t.filtered {
            filtered_at = Some(actions.len());
        } else {
            stats.env_steps += 1;
            crashed = t.crashed;
        }
        actions.push(a);
        rewards.push(t.reward);
        states.push(t.next_state.clone());
        let done = t.done;
        s = t.next_state.clone();
        memory.push(t);
        if opts.learn {
            agent.optimize(memory)?;
            if let Some(d) = dynamics.as_deref_mut() {
                d.train_from_replay(memory)?;
            }
        }
        if done {
            break;
        }
    }
    stats.crashes = crashed as u64;
    stats.filtered_episodes = filtered_at.is_some() as u64;
    stats.wall_time_shield = shield.shield_time();
    stats.wall_time_total = started.elapsed();
    let acc_reward = rewards.iter().sum();
    Ok(EpisodeOutcome {
        record: EpisodeRecord {
            env_id,
            seed,
            states,
            actions,
            rewards,
            crashed,
        },
        stats,
        acc_reward,
        crashed,
        filtered: filtered_at.is_some(),
        filtered_at,
    })
}

/// Crash rate over a trailing window and over all episodes seen.
#[derive(Debug, Clone)]
pub struct CrashTracker {
    window: usize,
    recent: VecDeque<bool>,
    recent_crashes: usize,
    total: u64,
    crashes: u64,
}

impl CrashTracker {
    pub const DEFAULT_WINDOW: usize = 100;

    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            recent: VecDeque::new(),
            recent_crashes: 0,
            total: 0,
            crashes: 0,
        }
    }

    pub fn push(&mut self, crashed: bool) {
        self.recent.push_back(crashed);
        self.recent_crashes += crashed as usize;
        if self.recent.len() > self.window {
            self.recent_crashes -= self.recent.pop_front().unwrap_or(false) as usize;
        }
        self.total += 1;
        self.crashes += crashed as u64;
    }

    pub fn trailing(&self) -> f64 {
        if self.recent.is_empty() {
            0.0
        } else {
            self.recent_crashes as f64 / self.recent.len() as f64
        }
    }

    pub fn cumulative(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.crashes as f64 / self.total as f64
        }
    }
}

impl Default for CrashTracker {
    fn default() -> Self {
        Self::new(Self::DEFAULT_WINDOW)
    }
}

/// Environment wrapper that counts calls to `step`.
pub struct CountingEnv<E> {
    pub inner: E,
    pub steps: u64,
}

impl<E: Environment> CountingEnv<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, steps: 0 }
    }
}

impl<E: Environment> Environment for CountingEnv<E> {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        self.steps += 1;
        self.inner.step(action)
    }

    fn state(&self) -> Vec<f64> {
        self.inner.state()
    }
}
