//! Trajectories, episode records, demonstration sets and replay memory.
//!
//! Episode corpora are stored as JSONL, one [`EpisodeRecord`] per line with
//! the keys `env_id, seed, states, actions, rewards, crashed` in that order.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation (state, action, or their concatenation).
pub type FeatureVector = Vec<f64>;

/// Which features make up one trajectory step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryMode {
    StateOnly,
    StateAction,
}

impl TrajectoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryMode::StateOnly => "state",
            TrajectoryMode::StateAction => "state-action",
        }
    }
}

impl fmt::Display for TrajectoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrajectoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" | "state-only" => Ok(TrajectoryMode::StateOnly),
            "state-action" => Ok(TrajectoryMode::StateAction),
            other => Err(Error::Config(format!(
                "unknown trajectory mode `{other}` (expected `state` or `state-action`)"
            ))),
        }
    }
}

/// Builds the per-step feature vector: the state itself, or state followed by action.
pub fn encode_step(state: &[f64], action: &[f64], mode: TrajectoryMode) -> FeatureVector {
    match mode {
        TrajectoryMode::StateOnly => state.to_vec(),
        TrajectoryMode::StateAction => {
            let mut v = Vec::with_capacity(state.len() + action.len());
            v.extend_from_slice(state);
            v.extend_from_slice(action);
            v
        }
    }
}

/// An ordered sequence of equal-dimension feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    mode: TrajectoryMode,
    steps: Vec<FeatureVector>,
}

impl Trajectory {
    pub fn new(mode: TrajectoryMode) -> Self {
        Self {
            mode,
            steps: Vec::new(),
        }
    }

    pub fn from_steps(mode: TrajectoryMode, steps: Vec<FeatureVector>) -> Result<Self> {
        let mut traj = Self::new(mode);
        for step in steps {
            traj.push(step)?;
        }
        Ok(traj)
    }

    /// Appends a step, rejecting dimension changes and non-finite entries.
    pub fn push(&mut self, step: FeatureVector) -> Result<()> {
        if let Some(dim) = self.dim() {
            if step.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: step.len(),
                });
            }
        }
        if step.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("trajectory step".into()));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn mode(&self) -> TrajectoryMode {
        self.mode
    }

    pub fn steps(&self) -> &[FeatureVector] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.steps.first().map(Vec::len)
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    pub(crate) fn steps_mut(&mut self) -> &mut [FeatureVector] {
        &mut self.steps
    }
}

/// A recorded episode. Field order is the canonical JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub env_id: String,
    pub seed: u64,
    pub states: Vec<FeatureVector>,
    pub actions: Vec<FeatureVector>,
    pub rewards: Vec<f64>,
    pub crashed: bool,
}

impl EpisodeRecord {
    /// Number of executed actions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.states.first().map(Vec::len)
    }

    pub fn action_dim(&self) -> Option<usize> {
        self.actions.first().map(Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::InvalidRecord("episode has no states".into()));
        }
        if self.actions.len() + 1 != self.states.len() || self.rewards.len() != self.actions.len() {
            return Err(Error::InvalidRecord(format!(
                "expected |actions| = |rewards| = |states| - 1, got states={}, actions={}, rewards={}",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        check_uniform(&self.states, "states")?;
        check_uniform(&self.actions, "actions")?;
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rewards".into()));
        }
        Ok(())
    }
}

fn check_uniform(rows: &[FeatureVector], what: &str) -> Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    for row in rows {
        if row.len() != first.len() {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                got: row.len(),
            });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
    }
    Ok(())
}

/// Materializes the feature sequence of a stored episode.
///
/// In state-action mode the terminal state has no paired action and is dropped.
pub fn episode_to_trajectory(rec: &EpisodeRecord, mode: TrajectoryMode) -> Result<Trajectory> {
    rec.validate()?;
    let steps: Vec<FeatureVector> = match mode {
        TrajectoryMode::StateOnly => rec.states.clone(),
        TrajectoryMode::StateAction => rec
            .states
            .iter()
            .zip(&rec.actions)
            .map(|(s, a)| encode_step(s, a, mode))
            .collect(),
    };
    if steps.is_empty() {
        return Err(Error::Empty(format!(
            "episode (env {}, seed {}) yields an empty {mode} trajectory",
            rec.env_id, rec.seed
        )));
    }
    Trajectory::from_steps(mode, steps)
}

/// Safe (non-crashed) and unsafe (crashed) demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub safe: Vec<EpisodeRecord>,
    pub unsafe_demos: Vec<EpisodeRecord>,
    pub mode: TrajectoryMode,
}

impl DemoSet {
    /// Partitions records by their crashed flag.
    pub fn from_records(records: Vec<EpisodeRecord>, mode: TrajectoryMode) -> Result<Self> {
        check_corpus(&records)?;
        let (unsafe_demos, safe): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.crashed);
        if safe.is_empty() || unsafe_demos.is_empty() {
            return Err(Error::InvalidDemoSet(format!(
                "need at least one safe and one unsafe demonstration (safe: {}, unsafe: {})",
                safe.len(),
                unsafe_demos.len()
            )));
        }
        Ok(Self {
            safe,
            unsafe_demos,
            mode,
        })
    }

    /// Keeps only the last `n` demonstrations of each group.
    pub fn truncate_latest(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("demo count must be at least 1".into()));
        }
        let tail = |v: &[EpisodeRecord]| v[v.len().saturating_sub(n)..].to_vec();
        Ok(Self {
            safe: tail(&self.safe),
            unsafe_demos: tail(&self.unsafe_demos),
            mode: self.mode,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.safe[0].state_dim().unwrap_or(0)
    }

    pub fn action_dim(&self) -> usize {
        self.safe
            .iter()
            .chain(&self.unsafe_demos)
            .find_map(EpisodeRecord::action_dim)
            .unwrap_or(0)
    }
}

/// Validates every record and checks that dimensions agree across the corpus.
pub fn check_corpus(records: &[EpisodeRecord]) -> Result<()> {
    let mut state_dim = None;
    let mut action_dim = None;
    for rec in records {
        rec.validate()?;
        for (seen, dim) in [
            (&mut state_dim, rec.state_dim()),
            (&mut action_dim, rec.action_dim()),
        ] {
            match (*seen, dim) {
                (Some(expected), Some(got)) if expected != got => {
                    return Err(Error::DimensionMismatch { expected, got });
                }
                (None, Some(got)) => *seen = Some(got),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Canonical one-line JSON form of a record.
pub fn to_canonical_line(rec: &EpisodeRecord) -> Result<String> {
    Ok(serde_json::to_string(rec)?)
}

pub fn save_episodes(path: impl AsRef<Path>, records: &[EpisodeRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = to_canonical_line(rec)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses JSONL records; `origin` only labels error messages.
pub fn read_episodes<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let rec: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        records.push(rec);
    }
    check_corpus(&records)?;
    Ok(records)
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes(BufReader::new(file), path)
}

pub fn load_demo_set(path: impl AsRef<Path>, mode: TrajectoryMode) -> Result<DemoSet> {
    DemoSet::from_records(load_episodes(path)?, mode)
}

/// Per-dimension z-score fitted on demonstration features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(demos: &DemoSet) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for rec in demos.safe.iter().chain(&demos.unsafe_demos) {
            let traj = episode_to_trajectory(rec, demos.mode)?;
            for step in traj.steps() {
                if sum.is_empty() {
                    sum = vec![0.0; step.len()];
                    sum_sq = vec![0.0; step.len()];
                }
                for (k, x) in step.iter().enumerate() {
                    sum[k] += x;
                    sum_sq[k] += x * x;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("no demonstration steps to fit a normalizer".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, step: &mut [f64]) -> Result<()> {
        if step.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: step.len(),
            });
        }
        for ((x, m), s) in step.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
        Ok(())
    }

    pub fn apply_trajectory(&self, traj: &mut Trajectory) -> Result<()> {
        for step in traj.steps_mut() {
            self.apply(step)?;
        }
        Ok(())
    }
}

/// One `(s, a, r, s')` tuple plus termination flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: FeatureVector,
    pub action: FeatureVector,
    pub reward: f64,
    pub next_state: FeatureVector,
    pub done: bool,
    pub crashed: bool,
    /// The action was never executed; `next_state` is a model prediction.
    pub filtered: bool,
}

pub const DEFAULT_REPLAY_CAPACITY: usize = 1_000_000;

/// FIFO replay buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    entries: VecDeque<Transition>,
    real: usize,
}

impl Default for ReplayMemory {
    fn default() -> Self {
        Self::new(DEFAULT_REPLAY_CAPACITY)
    }
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            real: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            if let Some(old) = self.entries.pop_front() {
                if !old.filtered {
                    self.real -= 1;
                }
            }
        }
        if !t.filtered {
            self.real += 1;
        }
        self.entries.push_back(t);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of transitions that came from real environment steps.
    pub fn real_len(&self) -> usize {
        self.real
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Uniform sample with replacement over all transitions.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect()
    }

    /// Uniform sample with replacement over unfiltered transitions only.
    pub fn sample_real<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.real == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let t = &self.entries[rng.gen_range(0..self.entries.len())];
            if !t.filtered {
                out.push(t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn record(states: usize, crashed: bool) -> EpisodeRecord {
        EpisodeRecord {
            env_id: "cliff2d".into(),
            seed: 7,
            states: (0..states).map(|i| vec![i as f64, 0.5]).collect(),
            actions: (1..states).map(|i| vec![i as f64 * 0.1]).collect(),
            rewards: (1..states).map(|i| -(i as f64)).collect(),
            crashed,
        }
    }

    #[test]
    fn encode_step_modes() {
        assert_eq!(
            encode_step(&[1.0, 2.0], &[3.0], TrajectoryMode::StateOnly),
            vec![1.0, 2.0]
        );
        assert_eq!(
            encode_step(&[1.0, 2.0], &[3.0], TrajectoryMode::StateAction),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            encode_step(&[0.0, 0.0], &[0.0], TrajectoryMode::StateAction),
            vec![0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn trajectory_rejects_dimension_change() {
        let mut t = Trajectory::new(TrajectoryMode::StateOnly);
        t.push(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            t.push(vec![1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(t.push(vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn episode_to_trajectory_counts() {
        let rec = record(3, false);
        let s = episode_to_trajectory(&rec, TrajectoryMode::StateOnly).unwrap();
        assert_eq!(s.len(), 3);
        let sa = episode_to_trajectory(&rec, TrajectoryMode::StateAction).unwrap();
        assert_eq!(sa.len(), 2);
        assert_eq!(sa.steps()[1], vec![1.0, 0.5, 0.2]);

        let single = record(1, false);
        assert!(episode_to_trajectory(&single, TrajectoryMode::StateAction).is_err());
        assert_eq!(
            episode_to_trajectory(&single, TrajectoryMode::StateOnly)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn record_validation() {
        let mut rec = record(4, false);
        rec.rewards.pop();
        assert!(matches!(rec.validate(), Err(Error::InvalidRecord(_))));
        let mut rec = record(4, false);
        rec.states[2] = vec![1.0];
        assert!(rec.validate().is_err());
    }

    #[test]
    fn demo_set_partitions_by_crash_flag() {
        let mut records: Vec<_> = (0..50).map(|_| record(5, true)).collect();
        records.extend((0..50).map(|_| record(5, false)));
        let demos = DemoSet::from_records(records, TrajectoryMode::StateOnly).unwrap();
        assert_eq!(demos.safe.len(), 50);
        assert_eq!(demos.unsafe_demos.len(), 50);
        assert!(demos.unsafe_demos.iter().all(|r| r.crashed));
        assert!(demos.safe.iter().all(|r| !r.crashed));

        let only_safe: Vec<_> = (0..3).map(|_| record(5, false)).collect();
        assert!(matches!(
            DemoSet::from_records(only_safe, TrajectoryMode::StateOnly),
            Err(Error::InvalidDemoSet(_))
        ));
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let mut other = record(3, true);
        for s in &mut other.states {
            s.push(0.0);
        }
        let records = vec![record(3, false), other];
        assert!(DemoSet::from_records(records, TrajectoryMode::StateOnly).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = to_canonical_line(&record(2, false)).unwrap();
        let text = format!("{good}\n{{\"env_id\": 3}}\n");
        let err = read_episodes(text.as_bytes(), Path::new("corpus.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn canonical_line_layout() {
        let rec = EpisodeRecord {
            env_id: "cliff2d".into(),
            seed: 3,
            states: vec![vec![0.1, 1.0], vec![0.2, -0.5]],
            actions: vec![vec![1.0]],
            rewards: vec![-0.25],
            crashed: true,
        };
        assert_eq!(
            to_canonical_line(&rec).unwrap(),
            r#"{"env_id":"cliff2d","seed":3,"states":[[0.1,1.0],[0.2,-0.5]],"actions":[[1.0]],"rewards":[-0.25],"crashed":true}"#
        );
    }

    #[test]
    fn replay_memory_is_fifo_and_tracks_real_count() {
        let mut mem = ReplayMemory::new(3);
        let t = |r: f64, filtered: bool| Transition {
            state: vec![0.0],
            action: vec![0.0],
            reward: r,
            next_state: vec![0.0],
            done: filtered,
            crashed: false,
            filtered,
        };
        mem.push(t(1.0, true));
        mem.push(t(2.0, false));
        mem.push(t(3.0, false));
        assert_eq!(mem.real_len(), 2);
        mem.push(t(4.0, false));
        assert_eq!(mem.len(), 3);
        assert_eq!(mem.real_len(), 3);
        let rewards: Vec<f64> = mem.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);

        let mut rng = seeded_rng(1);
        assert_eq!(mem.sample(8, &mut rng).len(), 8);

        let mut only_filtered = ReplayMemory::new(4);
        only_filtered.push(t(0.0, true));
        assert!(only_filtered.sample_real(4, &mut rng).is_empty());
    }

    #[test]
    fn normalizer_centers_demo_features() {
        let mut records: Vec<_> = (0..2).map(|_| record(4, true)).collect();
        records.push(record(4, false));
        let demos = DemoSet::from_records(records, TrajectoryMode::StateOnly).unwrap();
        let norm = Normalizer::fit(&demos).unwrap();
        assert!((norm.mean[0] - 1.5).abs() < 1e-12);
        // constant column falls back to unit scale
        assert_eq!(norm.std[1], 1.0);
        let mut step = vec![1.5, 0.5];
        norm.apply(&mut step).unwrap();
        assert_eq!(step, vec![0.0, 0.0]);
    }
}
