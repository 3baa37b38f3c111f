//! Policies that produce actions and learn from replay.
//!
//! [`ActorCritic`] is a compact TD3-style learner: deterministic tanh actor,
//! twin critics with clipped double-Q targets, target policy smoothing,
//! delayed actor updates and Polyak-averaged target networks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{cliff, EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::neural::{
    mse_loss_and_grads, Adam, Gradients, Mlp, OutputActivation, DEFAULT_BATCH_SIZE,
    DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE,
};
use crate::types::{encode_step, ReplayMemory, TrajectoryMode, Transition};
use crate::{derive_seed, seeded_rng, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Random,
    Scripted,
    ActorCritic,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Random => "random",
            AgentKind::Scripted => "scripted",
            AgentKind::ActorCritic => "actor-critic",
        })
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AgentKind::Random),
            "scripted" => Ok(AgentKind::Scripted),
            "actor-critic" | "ac" => Ok(AgentKind::ActorCritic),
            other => Err(Error::Config(format!("unknown agent kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub gamma: f64,
    pub exploration_noise: f64,
    pub twin_critics: bool,
    pub tau: f64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub policy_delay: u64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::ActorCritic,
            gamma: 0.99,
            exploration_noise: 0.1,
            twin_critics: true,
            tau: 0.005,
            hidden: DEFAULT_HIDDEN,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            policy_delay: 2,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.exploration_noise >= 0.0) || !(self.target_noise >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.policy_delay == 0 {
            return Err(Error::Config(
                "batch size, hidden width and policy delay must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentLosses {
    pub critic: f64,
    pub actor: Option<f64>,
}

pub trait Agent: Send {
    /// Action in `[-1, 1]^action_dim`.
    fn act(&mut self, state: &[f64], explore: bool) -> Result<Vec<f64>>;

    /// One learning update; `None` when the agent does not learn or lacks data.
    fn optimize(&mut self, memory: &ReplayMemory) -> Result<Option<AgentLosses>>;

    /// Saves learned parameters, if any, next to `prefix`.
    fn save(&self, _prefix: &Path) -> Result<()> {
        Ok(())
    }
}

pub fn build_agent(cfg: &AgentConfig, env: &EnvSpec) -> Result<Box<dyn Agent>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        AgentKind::Random => Box::new(RandomAgent::new(env.action_dim, cfg.seed)),
        AgentKind::Scripted => Box::new(ScriptedAgent::new(
            env.id.parse()?,
            cfg.exploration_noise,
            cfg.seed,
        )),
        AgentKind::ActorCritic => Box::new(ActorCritic::new(env.state_dim, env.action_dim, cfg)?),
    })
}

/// Uniform actions over the action box.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    action_dim: usize,
    rng: SimRng,
}

impl RandomAgent {
    pub fn new(action_dim: usize, seed: u64) -> Self {
        Self {
            action_dim,
            rng: seeded_rng(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _state: &[f64], _explore: bool) -> Result<Vec<f64>> {
        Ok((0..self.action_dim)
            .map(|_| self.rng.gen_range(-1.0..=1.0))
            .collect())
    }

    fn optimize(&mut self, _memory: &ReplayMemory) -> Result<Option<AgentLosses>> {
        Ok(None)
    }
}

/// Hand-written controller per environment, with optional Gaussian noise.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    env: EnvKind,
    noise: f64,
    rng: SimRng,
}

impl ScriptedAgent {
    pub fn new(env: EnvKind, noise: f64, seed: u64) -> Self {
        Self {
            env,
            noise,
            rng: seeded_rng(seed),
        }
    }

    fn control(&self, s: &[f64]) -> Vec<f64> {
        match self.env {
            EnvKind::Cliff2d => {
                // detour above the hazard, then head for the goal
                let target = if s[0] < 0.5 { [0.6, 0.75] } else { cliff::GOAL };
                (0..2)
                    .map(|k| 8.0 * (target[k] - s[k]) - 2.0 * s[k + 2])
                    .collect()
            }
            EnvKind::PoleBalance => {
                vec![0.05 * s[0] + 0.2 * s[1] + 4.0 * s[2] + 0.6 * s[3]]
            }
        }
    }
}

impl Agent for ScriptedAgent {
    fn act(&mut self, state: &[f64], explore: bool) -> Result<Vec<f64>> {
        let mut a = self.control(state);
        if explore && self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
            a.iter_mut().for_each(|v| *v += n.sample(&mut self.rng));
        }
        Ok(a.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    fn optimize(&mut self, _memory: &ReplayMemory) -> Result<Option<AgentLosses>> {
        Ok(None)
    }
}

/// TD3-flavoured deterministic actor-critic.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    cfg: AgentConfig,
    state_dim: usize,
    actor: Mlp,
    actor_target: Mlp,
    actor_optim: Adam,
    critics: Vec<Mlp>,
    critic_targets: Vec<Mlp>,
    critic_optims: Vec<Adam>,
    updates: u64,
    rng: SimRng,
}

impl ActorCritic {
    pub fn new(state_dim: usize, action_dim: usize, cfg: &AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let actor = Mlp::init_with(
            &[state_dim, h, h, action_dim],
            derive_seed(cfg.seed, 1),
            OutputActivation::Tanh,
        )?;
        let n_critics = if cfg.twin_critics { 2 } else { 1 };
        let critics = (0..n_critics)
            .map(|i| Mlp::init(&[state_dim + action_dim, h, h, 1], derive_seed(cfg.seed, 2 + i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            state_dim,
            actor_target: actor.clone(),
            actor_optim: Adam::new(&actor, cfg.learning_rate),
            actor,
            critic_targets: critics.clone(),
            critic_optims: critics.iter().map(|c| Adam::new(c, cfg.learning_rate)).collect(),
            critics,
            updates: 0,
            rng: seeded_rng(derive_seed(cfg.seed, 99)),
        })
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn set_actor(&mut self, actor: Mlp) -> Result<()> {
        if actor.dims() != self.actor.dims() {
            return Err(Error::Config(format!(
                "actor checkpoint dims {:?} do not match {:?}",
                actor.dims(),
                self.actor.dims()
            )));
        }
        self.actor_target = actor.clone();
        self.actor = actor;
        Ok(())
    }

    /// Q estimate of the first critic.
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.critics[0].forward(&encode_step(state, action, TrajectoryMode::StateAction))?[0])
    }

    /// Bootstrapped regression targets; terminal transitions get their reward exactly.
    pub fn critic_targets(&mut self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let clip = self.cfg.target_noise_clip;
        let noise = if self.cfg.target_noise > 0.0 {
            Some(Normal::new(0.0, self.cfg.target_noise).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        batch
            .iter()
            .map(|t| {
                if t.done {
                    return Ok(t.reward);
                }
                let mut next_a = self.actor_target.forward(&t.next_state)?;
                if let Some(n) = &noise {
                    for a in &mut next_a {
                        *a = (*a + n.sample(&mut self.rng).clamp(-clip, clip)).clamp(-1.0, 1.0);
                    }
                }
                let x = encode_step(&t.next_state, &next_a, TrajectoryMode::StateAction);
                let mut q = f64::INFINITY;
                for target in &self.critic_targets {
                    q = q.min(target.forward(&x)?[0]);
                }
                Ok(t.reward + self.cfg.gamma * q)
            })
            .collect()
    }

    fn actor_step(&mut self, batch: &[&Transition]) -> Result<f64> {
        let n = batch.len() as f64;
        let mut actor_grads = Gradients::zeros_like(&self.actor);
        let mut scratch = Gradients::zeros_like(&self.critics[0]);
        let mut objective = 0.0;
        for t in batch {
            let actor_trace = self.actor.trace(&t.state)?;
            let x = encode_step(&t.state, actor_trace.output(), TrajectoryMode::StateAction);
            let critic_trace = self.critics[0].trace(&x)?;
            objective += critic_trace.output()[0];
            // minimize -Q(s, pi(s))
            let grad_x = self.critics[0].backward(&critic_trace, &[-1.0 / n], &mut scratch);
            self.actor
                .backward(&actor_trace, &grad_x[self.state_dim..], &mut actor_grads);
        }
        self.actor_optim.update(&mut self.actor, &actor_grads);
        Ok(-objective / n)
    }
}

impl Agent for ActorCritic {
    fn act(&mut self, state: &[f64], explore: bool) -> Result<Vec<f64>> {
        let mut a = self.actor.forward(state)?;
        if explore && self.cfg.exploration_noise > 0.0 {
            let n = Normal::new(0.0, self.cfg.exploration_noise)
                .map_err(|e| Error::Config(e.to_string()))?;
            a.iter_mut().for_each(|v| *v += n.sample(&mut self.rng));
        }
        Ok(a.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    fn optimize(&mut self, memory: &ReplayMemory) -> Result<Option<AgentLosses>> {
        if memory.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let batch = memory.sample(self.cfg.batch_size, &mut self.rng);
        let targets = self.critic_targets(&batch)?;
        let examples: Vec<(Vec<f64>, Vec<f64>)> = batch
            .iter()
            .zip(&targets)
            .map(|(t, y)| {
                (
                    encode_step(&t.state, &t.action, TrajectoryMode::StateAction),
                    vec![*y],
                )
            })
            .collect();
        let mut critic_loss = 0.0;
        for (critic, optim) in self.critics.iter_mut().zip(&mut self.critic_optims) {
            let (loss, grads) = mse_loss_and_grads(critic, &examples)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("critic loss became {loss}")));
            }
            optim.update(critic, &grads);
            critic_loss += loss;
        }
        critic_loss /= self.critics.len() as f64;
        self.updates += 1;

        let mut actor_loss = None;
        if self.updates % self.cfg.policy_delay == 0 {
            actor_loss = Some(self.actor_step(&batch)?);
            let tau = self.cfg.tau;
            self.actor_target.soft_update_from(&self.actor, tau);
            for (target, critic) in self.critic_targets.iter_mut().zip(&self.critics) {
                target.soft_update_from(critic, tau);
            }
        }
        Ok(Some(AgentLosses {
            critic: critic_loss,
            actor: actor_loss,
        }))
    }

    fn save(&self, prefix: &Path) -> Result<()> {
        let with = |suffix: &str| {
            let mut name = prefix.as_os_str().to_owned();
            name.push(suffix);
            std::path::PathBuf::from(name)
        };
        self.actor.save(with("-actor.json"))?;
        for (i, c) in self.critics.iter().enumerate() {
            c.save(with(&format!("-critic{}.json", i + 1)))?;
        }
        Ok(())
    }
}
