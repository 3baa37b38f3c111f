//! Learned one-step dynamics used to fabricate the successor of a filtered action.
//!
//! The network predicts the state delta: `s' = s + net(s ++ a)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::{train_step, Adam, Mlp, DEFAULT_BATCH_SIZE, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE};
use crate::types::{encode_step, ReplayMemory, TrajectoryMode, Transition};
use crate::{seeded_rng, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Real transitions required before the first update.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            warmup: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsModel {
    net: Mlp,
    optim: Adam,
    state_dim: usize,
    action_dim: usize,
    batch_size: usize,
    warmup: usize,
    rng: SimRng,
}

impl DynamicsModel {
    pub fn new(state_dim: usize, action_dim: usize, cfg: &DynamicsConfig) -> Result<Self> {
        let net = Mlp::init(
            &[state_dim + action_dim, cfg.hidden, cfg.hidden, state_dim],
            cfg.seed,
        )?;
        Self::from_net(net, action_dim, cfg)
    }

    pub fn from_net(net: Mlp, action_dim: usize, cfg: &DynamicsConfig) -> Result<Self> {
        let [input, _, _, state_dim] = net.dims();
        if input != state_dim + action_dim {
            return Err(Error::Config(format!(
                "dynamics net takes {input} inputs, expected {state_dim} + {action_dim}"
            )));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            optim: Adam::new(&net, cfg.learning_rate),
            net,
            state_dim,
            action_dim,
            batch_size: cfg.batch_size,
            warmup: cfg.warmup,
            rng: seeded_rng(cfg.seed ^ 0xD1_4A_11C5),
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Raw network output, i.e. the predicted `s' - s`.
    pub fn predict_delta(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: state.len(),
            });
        }
        if action.len() != self.action_dim {
            return Err(Error::DimensionMismatch {
                expected: self.action_dim,
                got: action.len(),
            });
        }
        self.net
            .forward(&encode_step(state, action, TrajectoryMode::StateAction))
    }

    pub fn predict_next(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let delta = self.predict_delta(state, action)?;
        let next: Vec<f64> = state.iter().zip(&delta).map(|(s, d)| s + d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dynamics prediction".into()));
        }
        Ok(next)
    }

    fn example(t: &Transition) -> (Vec<f64>, Vec<f64>) {
        let x = encode_step(&t.state, &t.action, TrajectoryMode::StateAction);
        let y = t.next_state.iter().zip(&t.state).map(|(n, s)| n - s).collect();
        (x, y)
    }

    /// One update on an explicit batch of transitions.
    pub fn train_on(&mut self, batch: &[&Transition]) -> Result<f64> {
        let examples: Vec<_> = batch.iter().map(|t| Self::example(t)).collect();
        train_step(&mut self.net, &mut self.optim, &examples)
    }

    /// One update on a uniform minibatch of real (unfiltered) transitions.
    /// Returns `None` when there is not yet enough real data.
    pub fn train_from_replay(&mut self, memory: &ReplayMemory) -> Result<Option<f64>> {
        if memory.real_len() < self.batch_size.max(self.warmup) {
            return Ok(None);
        }
        let batch = memory.sample_real(self.batch_size, &mut self.rng);
        let examples: Vec<_> = batch.iter().map(|t| Self::example(t)).collect();
        train_step(&mut self.net, &mut self.optim, &examples).map(Some)
    }

    /// Mean squared next-state error over the given transitions.
    pub fn next_state_mse<'a>(&self, samples: impl IntoIterator<Item = &'a Transition>) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in samples {
            let pred = self.predict_next(&t.state, &t.action)?;
            for (p, y) in pred.iter().zip(&t.next_state) {
                total += (p - y) * (p - y);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("evaluation set".into()));
        }
        Ok(total / count as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.net.save(path)
    }
}
