//! Demo generation, training loops, metrics files and summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{build_agent, Agent, AgentConfig};
use crate::dynamics::{DynamicsConfig, DynamicsModel};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::filters::{DemoGroups, StrategySpec};
use crate::shield::{run_episode, CrashTracker, EpisodeOutcome, LoopOptions, ShieldConfig, ShieldStats};
use crate::types::{EpisodeRecord, ReplayMemory, TrajectoryMode, DEFAULT_REPLAY_CAPACITY};
use crate::derive_seed;

/// Seed of the `i`-th episode of a run.
pub fn episode_seed(run_seed: u64, i: usize) -> u64 {
    derive_seed(run_seed, i as u64)
}

/// Seed handed to the agent of a run.
pub fn agent_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, u64::MAX)
}

fn dynamics_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, u64::MAX - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDemosConfig {
    pub env: EnvKind,
    pub agent: AgentConfig,
    /// Demonstrations wanted per group.
    pub per_group: usize,
    /// Give up after this many episodes.
    pub max_episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDemos {
    /// `per_group` safe and `per_group` unsafe records, in collection order.
    pub demos: Vec<EpisodeRecord>,
    /// Every episode that was run.
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs the agent unshielded until both groups have `per_group` episodes,
/// then keeps the most recent `per_group` of each.
pub fn gen_demos(cfg: &GenDemosConfig) -> Result<GeneratedDemos> {
    if cfg.per_group == 0 {
        return Err(Error::Config("demo count must be at least 1 per group".into()));
    }
    let spec = cfg.env.spec();
    let agent_cfg = AgentConfig {
        seed: agent_seed(cfg.seed),
        ..cfg.agent.clone()
    };
    let mut agent = build_agent(&agent_cfg, &spec)?;
    let mut env = cfg.env.make();
    let mut memory = ReplayMemory::new(DEFAULT_REPLAY_CAPACITY);
    let shield = ShieldConfig::disabled(placeholder_strategy(), TrajectoryMode::StateOnly, &spec);
    let mut episodes = Vec::new();
    let (mut safe, mut unsafe_) = (0usize, 0usize);
    while safe < cfg.per_group || unsafe_ < cfg.per_group {
        if episodes.len() >= cfg.max_episodes {
            return Err(Error::InsufficientDemos {
                needed: cfg.per_group,
                episodes: episodes.len(),
                safe,
                unsafe_count: unsafe_,
            });
        }
        let out = run_episode(
            &shield,
            None,
            None,
            env.as_mut(),
            agent.as_mut(),
            &mut memory,
            episode_seed(cfg.seed, episodes.len()),
            LoopOptions::default(),
        )?;
        if out.crashed {
            unsafe_ += 1;
        } else {
            safe += 1;
        }
        episodes.push(out.record);
    }
    Ok(GeneratedDemos {
        demos: select_latest(&episodes, cfg.per_group),
        episodes,
    })
}

/// Most recent `n` crashed and `n` non-crashed records, in original order.
pub fn select_latest(records: &[EpisodeRecord], n: usize) -> Vec<EpisodeRecord> {
    let mut keep = vec![false; records.len()];
    for crashed in [false, true] {
        records
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, r)| r.crashed == crashed)
            .take(n)
            .for_each(|(i, _)| keep[i] = true);
    }
    records
        .iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then(|| r.clone()))
        .collect()
}

/// Placeholder for runs where the shield is off and the strategy is unused.
pub fn placeholder_strategy() -> StrategySpec {
    crate::filters::enumerate_strategies()[0]
}

/// One row of the per-episode metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub acc_reward: f64,
    pub crashed: bool,
    pub filtered: bool,
    pub steps: usize,
    pub shield_time_ms: f64,
    pub total_time_ms: f64,
}

impl MetricsRow {
    fn from_outcome(episode: usize, out: &EpisodeOutcome) -> Self {
        Self {
            episode,
            acc_reward: out.acc_reward,
            crashed: out.crashed,
            filtered: out.filtered,
            steps: out.record.len(),
            shield_time_ms: millis(out.stats.wall_time_shield),
            total_time_ms: millis(out.stats.wall_time_total),
        }
    }
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub const METRICS_HEADER: &str =
    "episode,acc_reward,crashed,filtered,steps,shield_time_ms,total_time_ms";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6}",
            r.episode,
            r.acc_reward,
            r.crashed as u8,
            r.filtered as u8,
            r.steps,
            r.shield_time_ms,
            r.total_time_ms
        );
    }
    out
}

/// Everything a loop of episodes needs apart from the learners.
#[derive(Debug, Clone)]
pub struct LoopSetup<'a> {
    pub env: EnvKind,
    pub shield: ShieldConfig,
    pub demos: Option<&'a DemoGroups>,
    pub episodes: usize,
    pub seed: u64,
    pub opts: LoopOptions,
}

#[derive(Debug, Clone, Default)]
pub struct LoopReport {
    pub rows: Vec<MetricsRow>,
    pub stats: ShieldStats,
    pub records: Vec<EpisodeRecord>,
}

impl LoopReport {
    pub fn crash_count(&self) -> u64 {
        self.stats.crashes
    }
}

/// Runs `setup.episodes` episodes; `on_episode` sees each outcome together
/// with the running crash tracker.
pub fn run_loop(
    setup: &LoopSetup<'_>,
    agent: &mut dyn Agent,
    mut dynamics: Option<&mut DynamicsModel>,
    memory: &mut ReplayMemory,
    keep_records: bool,
    mut on_episode: impl FnMut(usize, &EpisodeOutcome, &CrashTracker),
) -> Result<LoopReport> {
    let mut env = setup.env.make();
    let mut report = LoopReport::default();
    let mut tracker = CrashTracker::default();
    for i in 0..setup.episodes {
        let out = run_episode(
            &setup.shield,
            setup.demos,
            dynamics.as_deref_mut(),
            env.as_mut(),
            agent,
            memory,
            episode_seed(setup.seed, i),
            setup.opts,
        )?;
        tracker.push(out.crashed);
        on_episode(i, &out, &tracker);
        report.stats.merge(&out.stats);
        report.rows.push(MetricsRow::from_outcome(i, &out));
        if keep_records {
            report.records.push(out.record);
        }
    }
    Ok(report)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Wall-clock sidecar written by every training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub env_id: String,
    pub shield_enabled: bool,
    pub episodes: u64,
    pub loop_iterations: u64,
    pub wall_time_total_ms: f64,
    pub wall_time_shield_ms: f64,
}

impl TimingRecord {
    pub fn from_stats(env_id: &str, shield_enabled: bool, stats: &ShieldStats) -> Self {
        Self {
            env_id: env_id.to_string(),
            shield_enabled,
            episodes: stats.episodes,
            loop_iterations: stats.loop_iterations,
            wall_time_total_ms: millis(stats.wall_time_total),
            wall_time_shield_ms: millis(stats.wall_time_shield),
        }
    }

    /// Wall time per agent-environment loop iteration.
    pub fn ms_per_iteration(&self) -> f64 {
        if self.loop_iterations == 0 {
            0.0
        } else {
            self.wall_time_total_ms / self.loop_iterations as f64
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Per-iteration wall time of `run` relative to `baseline`, in percent.
pub fn time_percent(run: &TimingRecord, baseline: &TimingRecord) -> Result<f64> {
    let base = baseline.ms_per_iteration();
    if !(base > 0.0) {
        return Err(Error::Config("baseline timing has no recorded work".into()));
    }
    Ok(100.0 * run.ms_per_iteration() / base)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub mode: TrajectoryMode,
    /// `None` trains the unshielded baseline.
    pub strategy: Option<StrategySpec>,
    pub episodes: usize,
    pub agent: AgentConfig,
    pub dynamics: DynamicsConfig,
    pub replay_capacity: usize,
}

/// Per-seed training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub episodes: usize,
    /// Over the final (up to) 100 episodes.
    pub acc_reward: MeanStd,
    pub crash_pct: f64,
    pub crash_pct_final_100: f64,
    pub filtered_pct: f64,
    pub timing: TimingRecord,
}

pub struct TrainRun {
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
    pub agent: Box<dyn Agent>,
    pub dynamics: Option<DynamicsModel>,
}

const FINAL_WINDOW: usize = 100;

pub fn train(cfg: &TrainConfig, demos: Option<&DemoGroups>, seed: u64) -> Result<TrainRun> {
    let spec = cfg.env.spec();
    let shield = match cfg.strategy {
        Some(s) => ShieldConfig::new(s, cfg.mode, &spec),
        None => ShieldConfig::disabled(placeholder_strategy(), cfg.mode, &spec),
    };
    if shield.enabled && demos.is_none() {
        return Err(Error::Config("a shielded run needs demonstrations".into()));
    }
    let agent_cfg = AgentConfig {
        seed: agent_seed(seed),
        ..cfg.agent.clone()
    };
    let mut agent = build_agent(&agent_cfg, &spec)?;
    let mut dynamics = if shield.enabled {
        let dcfg = DynamicsConfig {
            seed: dynamics_seed(seed),
            ..cfg.dynamics.clone()
        };
        Some(DynamicsModel::new(spec.state_dim, spec.action_dim, &dcfg)?)
    } else {
        None
    };
    let mut memory = ReplayMemory::new(cfg.replay_capacity);
    let setup = LoopSetup {
        env: cfg.env,
        shield,
        demos,
        episodes: cfg.episodes,
        seed,
        opts: LoopOptions::default(),
    };
    let report = run_loop(&setup, agent.as_mut(), dynamics.as_mut(), &mut memory, false, |_, _, _| {})?;
    let summary = summarize(seed, &report, spec.id.as_str(), shield.enabled);
    Ok(TrainRun {
        summary,
        rows: report.rows,
        agent,
        dynamics,
    })
}

fn summarize(seed: u64, report: &LoopReport, env_id: &str, shield_enabled: bool) -> RunSummary {
    let rows = &report.rows;
    let tail = &rows[rows.len().saturating_sub(FINAL_WINDOW)..];
    let rewards: Vec<f64> = tail.iter().map(|r| r.acc_reward).collect();
    let pct = |count: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 };
    RunSummary {
        seed,
        episodes: rows.len(),
        acc_reward: MeanStd::of(&rewards),
        crash_pct: pct(rows.iter().filter(|r| r.crashed).count(), rows.len()),
        crash_pct_final_100: pct(tail.iter().filter(|r| r.crashed).count(), tail.len()),
        filtered_pct: pct(rows.iter().filter(|r| r.filtered).count(), rows.len()),
        timing: TimingRecord::from_stats(env_id, shield_enabled, &report.stats),
    }
}

/// Cross-seed summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env_id: String,
    pub strategy: Option<String>,
    pub runs: Vec<RunSummary>,
    /// Across seeds, of each seed's final-100 mean.
    pub acc_reward: MeanStd,
    pub crash_pct: MeanStd,
    /// Per-iteration wall time relative to the baseline, in percent.
    pub time_pct: f64,
    pub timing: TimingRecord,
}

impl TrainSummary {
    /// `baseline = None` is only allowed for an unshielded run, which is its own baseline.
    pub fn build(
        env_id: &str,
        strategy: Option<StrategySpec>,
        runs: Vec<RunSummary>,
        baseline: Option<&TimingRecord>,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Empty("training runs".into()));
        }
        let mut timing = runs[0].timing.clone();
        timing.episodes = 0;
        timing.loop_iterations = 0;
        timing.wall_time_total_ms = 0.0;
        timing.wall_time_shield_ms = 0.0;
        for r in &runs {
            timing.episodes += r.timing.episodes;
            timing.loop_iterations += r.timing.loop_iterations;
            timing.wall_time_total_ms += r.timing.wall_time_total_ms;
            timing.wall_time_shield_ms += r.timing.wall_time_shield_ms;
        }
        let time_pct = match (baseline, strategy) {
            (Some(b), _) => time_percent(&timing, b)?,
            (None, None) => 100.0,
            (None, Some(_)) => {
                return Err(Error::Config(
                    "a shielded run needs a baseline timing file to report % Time".into(),
                ))
            }
        };
        let means: Vec<f64> = runs.iter().map(|r| r.acc_reward.mean).collect();
        let crashes: Vec<f64> = runs.iter().map(|r| r.crash_pct).collect();
        Ok(Self {
            env_id: env_id.to_string(),
            strategy: strategy.map(|s| s.id()),
            acc_reward: MeanStd::of(&means),
            crash_pct: MeanStd::of(&crashes),
            time_pct,
            timing,
            runs,
        })
    }

    /// Table-style one-liner.
    pub fn table_line(&self) -> String {
        format!(
            "{} | {} | Acc Reward {} | % Crash {:.1} ± {:.1} | % Time {:.0}",
            self.env_id,
            self.strategy.as_deref().unwrap_or("baseline"),
            self.acc_reward,
            self.crash_pct.mean,
            self.crash_pct.std,
            self.time_pct
        )
    }
}

/// Output paths of a training run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn metrics(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("metrics-seed{seed}.csv"))
    }

    pub fn checkpoint_prefix(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed{seed}"))
    }

    pub fn dynamics(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed{seed}-dynamics.json"))
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.json")
    }
}
