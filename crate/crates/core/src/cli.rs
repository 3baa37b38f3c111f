//! Command-line front end. Flags override values from an optional JSON
//! config file; everything else falls back to built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::ablation::{episode_outcome, rank_all, write_ranking_csv, EnvCorpus, RankedStrategy};
use crate::agent::{ActorCritic, Agent, AgentConfig, AgentKind};
use crate::dynamics::{DynamicsConfig, DynamicsModel};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::experiment::{
    gen_demos, metrics_csv, read_json, run_loop, train, wilson_interval, write_json,
    GenDemosConfig, LoopSetup, RunPaths, TimingRecord, TrainConfig, TrainSummary,
};
use crate::filters::{DemoGroups, MethodSpec, StrategySpec};
use crate::neural::Mlp;
use crate::shield::{LoopOptions, ShieldConfig};
use crate::types::{load_demo_set, load_episodes, save_episodes, ReplayMemory, TrajectoryMode, DEFAULT_REPLAY_CAPACITY};

#[derive(Debug, Parser)]
#[command(name = "dtw-shield", version, about = "Demonstration-based safety shield for RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an unshielded agent and keep the latest N safe and N unsafe episodes.
    GenDemos(Settings),
    /// Score all 576 strategies on recorded corpora.
    Rank(Settings),
    /// Train an agent with or without the shield.
    Train(Settings),
    /// Run a frozen policy and report crash statistics.
    Eval(Settings),
    /// Replay a recorded corpus through one strategy.
    Replay(Settings),
}

/// Settings shared by every subcommand. Each one may also come from `--config`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// JSON file with defaults for any of these settings
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    /// state | state-action
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub safe_method: Option<String>,
    #[arg(long)]
    pub unsafe_method: Option<String>,
    /// Demonstration file(s); `rank` pairs them with `--corpus` in order
    #[arg(long)]
    pub demos: Option<Vec<PathBuf>>,
    /// Replay corpus file(s) for `rank` and `replay`
    #[arg(long)]
    pub corpus: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Comma-separated seeds
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// random | scripted | actor-critic
    #[arg(long)]
    pub agent: Option<String>,
    /// Demonstrations per group
    #[arg(long)]
    pub demo_count: Option<usize>,
    /// Episode budget for `gen-demos`
    #[arg(long)]
    pub max_episodes: Option<usize>,
    /// Also write every episode run here (`gen-demos`, `eval`)
    #[arg(long)]
    pub corpus_out: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Worker threads for `rank` (0 = all cores)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Timing sidecar of a baseline run, for % Time
    #[arg(long)]
    pub baseline_timing: Option<PathBuf>,
    /// Actor checkpoint for `eval`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dynamics checkpoint for `eval`
    #[arg(long)]
    pub dynamics: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub exploration_noise: Option<f64>,
    /// Real transitions before the dynamics model starts training
    #[arg(long)]
    pub warmup: Option<usize>,
}

macro_rules! prefer {
    ($hi:ident, $lo:ident; $($field:ident),* $(,)?) => {
        Settings { config: $hi.config, $($field: $hi.$field.or($lo.$field)),* }
    };
}

impl Settings {
    /// Fills unset fields from the config file, if one was given.
    pub fn resolve(self) -> Result<Settings> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let file: Settings = read_json(&path)?;
        let hi = self;
        Ok(prefer!(hi, file; env, mode, safe_method, unsafe_method, demos, corpus, episodes,
            seed, normalize, out, agent, demo_count, max_episodes, corpus_out, top_k, workers,
            baseline_timing, checkpoint, dynamics, hidden, batch_size, learning_rate, gamma,
            exploration_noise, warmup))
    }

    fn env(&self) -> Result<EnvKind> {
        self.env.as_deref().unwrap_or("cliff2d").parse()
    }

    fn mode(&self) -> Result<TrajectoryMode> {
        self.mode.as_deref().unwrap_or("state").parse()
    }

    fn seeds(&self) -> Result<Vec<u64>> {
        let raw = self.seed.as_deref().unwrap_or("0");
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("invalid seed `{s}` in `{raw}`")))
            })
            .collect()
    }

    fn first_seed(&self) -> Result<u64> {
        Ok(self.seeds()?[0])
    }

    fn strategy(&self) -> Result<Option<StrategySpec>> {
        match (&self.safe_method, &self.unsafe_method) {
            (None, None) => Ok(None),
            (Some(s), Some(u)) => Ok(Some(StrategySpec::new(
                s.parse::<MethodSpec>()?,
                u.parse::<MethodSpec>()?,
            ))),
            _ => Err(Error::Config(
                "--safe-method and --unsafe-method must be given together".into(),
            )),
        }
    }

    fn required_strategy(&self) -> Result<StrategySpec> {
        self.strategy()?.ok_or_else(|| {
            Error::Config("--safe-method and --unsafe-method are required".into())
        })
    }

    fn agent_config(&self, default: AgentKind) -> Result<AgentConfig> {
        let base = AgentConfig::default();
        let cfg = AgentConfig {
            kind: match &self.agent {
                Some(k) => k.parse()?,
                None => default,
            },
            hidden: self.hidden.unwrap_or(base.hidden),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            gamma: self.gamma.unwrap_or(base.gamma),
            exploration_noise: self.exploration_noise.unwrap_or(base.exploration_noise),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn dynamics_config(&self) -> DynamicsConfig {
        let base = DynamicsConfig::default();
        DynamicsConfig {
            hidden: self.hidden.unwrap_or(base.hidden),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            warmup: self.warmup.unwrap_or(base.warmup),
            ..base
        }
    }

    fn demo_count(&self) -> Result<usize> {
        match self.demo_count.unwrap_or(50) {
            0 => Err(Error::Config("--demo-count must be at least 1".into())),
            n => Ok(n),
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    fn first_demos(&self) -> Result<&Path> {
        self.demos
            .as_ref()
            .and_then(|d| d.first())
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config("--demos is required".into()))
    }

    /// Demonstration groups from the first `--demos` file, trimmed to `--demo-count` if set.
    fn demo_groups(&self, path: &Path) -> Result<DemoGroups> {
        let mut set = load_demo_set(path, self.mode()?)?;
        if self.demo_count.is_some() {
            set = set.truncate_latest(self.demo_count()?)?;
        }
        DemoGroups::new(&set, self.normalize.unwrap_or(false))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos(s) => cmd_gen_demos(&s.resolve()?),
        Command::Rank(s) => cmd_rank(&s.resolve()?),
        Command::Train(s) => cmd_train(&s.resolve()?),
        Command::Eval(s) => cmd_eval(&s.resolve()?),
        Command::Replay(s) => cmd_replay(&s.resolve()?),
    }
}

fn cmd_gen_demos(s: &Settings) -> Result<()> {
    let cfg = GenDemosConfig {
        env: s.env()?,
        agent: s.agent_config(AgentKind::Random)?,
        per_group: s.demo_count()?,
        max_episodes: s.max_episodes.unwrap_or(20_000),
        seed: s.first_seed()?,
    };
    let out = gen_demos(&cfg)?;
    save_episodes(s.out()?, &out.demos)?;
    if let Some(path) = &s.corpus_out {
        save_episodes(path, &out.episodes)?;
    }
    let crashes = out.episodes.iter().filter(|r| r.crashed).count();
    println!(
        "{}: wrote {} demonstrations to {} after {} episodes ({} crashed)",
        cfg.env,
        out.demos.len(),
        s.out()?.display(),
        out.episodes.len(),
        crashes
    );
    Ok(())
}

fn cmd_rank(s: &Settings) -> Result<()> {
    let corpora_paths = s
        .corpus
        .as_ref()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let demo_paths = s.demos.clone().unwrap_or_default();
    if demo_paths.len() != corpora_paths.len() {
        return Err(Error::Config(format!(
            "got {} corpus files but {} demo files; pass one --demos per --corpus",
            corpora_paths.len(),
            demo_paths.len()
        )));
    }
    let mut corpora = Vec::new();
    for (cp, dp) in corpora_paths.iter().zip(&demo_paths) {
        let episodes = load_episodes(cp)?;
        let env_id = episodes
            .first()
            .map(|e| e.env_id.clone())
            .ok_or_else(|| Error::Empty(format!("corpus {}", cp.display())))?;
        corpora.push(EnvCorpus {
            env_id,
            episodes,
            demos: s.demo_groups(dp)?,
        });
    }
    let ranked = rank_all(&corpora, None, s.workers.unwrap_or(0))?;
    let env_ids: Vec<String> = corpora.iter().map(|c| c.env_id.clone()).collect();
    if let Some(out) = &s.out {
        write_ranking_csv(out, &env_ids, &ranked)?;
    }
    print_top(&ranked, s.top_k.unwrap_or(5));
    Ok(())
}

fn print_top(ranked: &[RankedStrategy], k: usize) {
    println!("rank  safe_method  unsafe_method  mean_score  safe_rate  length_ratio");
    for (i, r) in ranked.iter().take(k).enumerate() {
        let n = r.per_env.len() as f64;
        let safe = r.per_env.iter().map(|e| e.safe_rate).sum::<f64>() / n;
        let ratio = r.per_env.iter().map(|e| e.mean_length_ratio).sum::<f64>() / n;
        println!(
            "{:>4}  {:<11}  {:<13}  {:>10.4}  {:>9.3}  {:>12.3}",
            i + 1,
            r.strategy.safe_method.id(),
            r.strategy.unsafe_method.id(),
            r.mean_score,
            safe,
            ratio
        );
    }
}

fn cmd_train(s: &Settings) -> Result<()> {
    let env = s.env()?;
    let strategy = s.strategy()?;
    let demos = match strategy {
        Some(_) => Some(s.demo_groups(s.first_demos()?)?),
        None => None,
    };
    let cfg = TrainConfig {
        env,
        mode: s.mode()?,
        strategy,
        episodes: s.episodes.unwrap_or(5000),
        agent: s.agent_config(AgentKind::ActorCritic)?,
        dynamics: s.dynamics_config(),
        replay_capacity: DEFAULT_REPLAY_CAPACITY,
    };
    let baseline = match &s.baseline_timing {
        Some(p) => Some(TimingRecord::load(p)?),
        None => None,
    };
    let paths = RunPaths::new(s.out.clone().unwrap_or_else(|| PathBuf::from("runs")))?;
    let mut runs = Vec::new();
    for seed in s.seeds()? {
        let run = train(&cfg, demos.as_ref(), seed)?;
        let path = paths.metrics(seed);
        std::fs::write(&path, metrics_csv(&run.rows)).map_err(|e| Error::io(&path, e))?;
        run.agent.save(&paths.checkpoint_prefix(seed))?;
        if let Some(d) = &run.dynamics {
            d.save(paths.dynamics(seed))?;
        }
        println!(
            "seed {seed}: Acc Reward {} | % Crash {:.1}",
            run.summary.acc_reward, run.summary.crash_pct
        );
        runs.push(run.summary);
    }
    let summary = TrainSummary::build(env.id(), strategy, runs, baseline.as_ref())?;
    summary.timing.save(paths.timing())?;
    write_json(&paths.summary(), &summary)?;
    println!("{}", summary.table_line());
    Ok(())
}

fn cmd_eval(s: &Settings) -> Result<()> {
    let env = s.env()?;
    let spec = env.spec();
    let seed = s.first_seed()?;
    let mut agent: Box<dyn Agent> = match &s.checkpoint {
        Some(path) => {
            let actor = Mlp::load(path)?;
            let cfg = AgentConfig {
                hidden: actor.dims()[1],
                ..AgentConfig::default()
            };
            let mut ac = ActorCritic::new(spec.state_dim, spec.action_dim, &cfg)?;
            ac.set_actor(actor)?;
            Box::new(ac)
        }
        None => {
            let cfg = AgentConfig {
                seed: crate::experiment::agent_seed(seed),
                ..s.agent_config(AgentKind::Random)?
            };
            if cfg.kind == AgentKind::ActorCritic {
                return Err(Error::Config("evaluating an actor-critic needs --checkpoint".into()));
            }
            crate::agent::build_agent(&cfg, &spec)?
        }
    };
    let strategy = s.strategy()?;
    let demos = match strategy {
        Some(_) => Some(s.demo_groups(s.first_demos()?)?),
        None => None,
    };
    let mode = s.mode()?;
    let shield = match strategy {
        Some(st) => ShieldConfig::new(st, mode, &spec),
        None => ShieldConfig::disabled(crate::experiment::placeholder_strategy(), mode, &spec),
    };
    let mut dynamics = match (&s.dynamics, shield.enabled) {
        (Some(p), _) => Some(DynamicsModel::from_net(Mlp::load(p)?, spec.action_dim, &s.dynamics_config())?),
        (None, true) => Some(DynamicsModel::new(spec.state_dim, spec.action_dim, &s.dynamics_config())?),
        (None, false) => None,
    };
    let setup = LoopSetup {
        env,
        shield,
        demos: demos.as_ref(),
        episodes: s.episodes.unwrap_or(100),
        seed,
        opts: LoopOptions {
            explore: false,
            learn: false,
        },
    };
    let mut memory = ReplayMemory::new(DEFAULT_REPLAY_CAPACITY);
    let keep = s.corpus_out.is_some();
    let report = run_loop(&setup, agent.as_mut(), dynamics.as_mut(), &mut memory, keep, |_, _, _| {})?;
    if let Some(path) = &s.corpus_out {
        save_episodes(path, &report.records)?;
    }
    if let Some(out) = &s.out {
        std::fs::write(out, metrics_csv(&report.rows)).map_err(|e| Error::io(out, e))?;
    }
    let n = report.stats.episodes;
    let (lo, hi) = wilson_interval(report.stats.crashes, n, 1.96);
    println!(
        "{env}: {n} episodes, crash rate {:.1}% (95% CI {:.1}-{:.1}), filtered {:.1}%",
        100.0 * report.stats.crash_rate(),
        100.0 * lo,
        100.0 * hi,
        100.0 * report.stats.filtered_episodes as f64 / n.max(1) as f64
    );
    Ok(())
}

fn cmd_replay(s: &Settings) -> Result<()> {
    let strategy = s.required_strategy()?;
    let corpus_path = s
        .corpus
        .as_ref()
        .and_then(|c| c.first())
        .ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let episodes = load_episodes(corpus_path)?;
    if episodes.is_empty() {
        return Err(Error::Empty(format!("corpus {}", corpus_path.display())));
    }
    let demos = s.demo_groups(s.first_demos()?)?;
    let mut csv = String::from("index,seed,original_length,filtered_length,length_ratio,crashed,safe\n");
    for (i, e) in episodes.iter().enumerate() {
        let o = episode_outcome(&strategy, e, &demos)?;
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            e.seed,
            o.original_length,
            o.filtered_length,
            o.length_ratio(),
            e.crashed as u8,
            o.safe as u8
        ));
    }
    if let Some(out) = &s.out {
        std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    }
    let score = crate::ablation::score_strategy(&strategy, &episodes, &demos)?;
    println!(
        "{strategy}: {} episodes, safe_rate {:.3}, mean_length_ratio {:.3}, score {:.4}",
        episodes.len(),
        score.safe_rate,
        score.mean_length_ratio,
        score.score
    );
    Ok(())
}
