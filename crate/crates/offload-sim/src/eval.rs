//! Baselines, metrics, brute-force oracles, and experiment protocols.
//!
//! The oracle exploits the bandit structure of the rewards: with no
//! cross-step dependency, exhaustively enumerating the joint actions of each
//! step (MEC coupling included) yields the exact optimum of the step, and a
//! rollout of per-step optima is the optimal policy's trajectory.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{evaluate_dsmab, train_dsmab, BanditAgent, DsmabTeam, EstimatorKind, ExplorerKind};
use crate::config::{Action, SystemConfig};
use crate::env::{Env, EnvError, StepRecord};
use crate::ppg::{episode_seed, evaluate, train, PpgAgent, PpgKind, TrainError};
use crate::stream_rng;
use crate::traces::TaskGenConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("joint action space of size {size} exceeds the oracle limit {limit}")]
    StateSpaceTooLarge { size: usize, limit: usize },
    #[error("no records")]
    NoRecords,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    AlwaysLocal,
    AlwaysOffloadBestRate,
    UniformRandom,
}

impl BaselineKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "always_local" => Some(Self::AlwaysLocal),
            "always_offload_best_rate" => Some(Self::AlwaysOffloadBestRate),
            "uniform_random" => Some(Self::UniformRandom),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AlwaysLocal => "always_local",
            Self::AlwaysOffloadBestRate => "always_offload_best_rate",
            Self::UniformRandom => "uniform_random",
        }
    }
}

/// Rolls a fixed-rule policy through `episodes` episodes.
pub fn run_baseline(
    kind: BaselineKind,
    env: &mut Env,
    episodes: usize,
    seed: u64,
) -> Result<Vec<StepRecord>, EvalError> {
    let k = env.config().num_users;
    let c = env.config().num_channels;
    let mut rng = stream_rng(seed, 0xba5e);
    let mut records = Vec::new();
    for ep in 0..episodes {
        env.reset(episode_seed(seed, ep as u64));
        loop {
            let joint: Vec<Action> = match kind {
                BaselineKind::AlwaysLocal => vec![Action::LOCAL; k],
                BaselineKind::AlwaysOffloadBestRate => {
                    let rates = env.recent_uplink_rates();
                    let mut best = 0;
                    for (i, &r) in rates.iter().enumerate() {
                        if r > rates[best] {
                            best = i;
                        }
                    }
                    vec![Action(best + 1); k]
                }
                BaselineKind::UniformRandom => {
                    (0..k).map(|_| Action(rng.gen_range(0..=c))).collect()
                }
            };
            let out = env.step(&joint)?;
            records.extend(out.records);
            if out.done {
                break;
            }
        }
    }
    Ok(records)
}

/// Exhaustive per-step optimum over all `(C+1)^K` joint actions.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    /// Mean over steps of the best joint action's mean per-user reward.
    pub mean_best_reward: f64,
    /// Chosen optimal joint action per step.
    pub actions: Vec<Vec<Action>>,
    pub records: Vec<StepRecord>,
}

pub const ORACLE_LIMIT: usize = 4096;

/// Enumerates every joint action at every step (coupled through MEC
/// sharing), plays the argmax, and reports the optimal mean reward.
pub fn brute_force_oracle(
    env: &mut Env,
    episodes: usize,
    seed: u64,
) -> Result<OracleOutcome, EvalError> {
    let k = env.config().num_users;
    let a = env.config().num_actions();
    let space = a.checked_pow(k as u32).unwrap_or(usize::MAX);
    if space > ORACLE_LIMIT {
        return Err(EvalError::StateSpaceTooLarge {
            size: space,
            limit: ORACLE_LIMIT,
        });
    }
    let mut best_sum = 0.0;
    let mut steps = 0usize;
    let mut actions_log = Vec::new();
    let mut records = Vec::new();
    for ep in 0..episodes {
        env.reset(episode_seed(seed, ep as u64));
        loop {
            let mut best_mean = f64::NEG_INFINITY;
            let mut best_joint = vec![Action::LOCAL; k];
            let mut joint = vec![Action::LOCAL; k];
            for code in 0..space {
                let mut rem = code;
                for slot in joint.iter_mut() {
                    *slot = Action(rem % a);
                    rem /= a;
                }
                let rewards = env.peek_rewards(&joint)?;
                let mean = rewards.iter().sum::<f64>() / k as f64;
                if mean > best_mean {
                    best_mean = mean;
                    best_joint.copy_from_slice(&joint);
                }
            }
            best_sum += best_mean;
            steps += 1;
            actions_log.push(best_joint.clone());
            let out = env.step(&best_joint)?;
            records.extend(out.records);
            if out.done {
                break;
            }
        }
    }
    Ok(OracleOutcome {
        mean_best_reward: best_sum / steps as f64,
        actions: actions_log,
        records,
    })
}

/// Aggregate metrics over a record set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub num_records: usize,
    pub mean_response_time_s: f64,
    pub std_response_time_s: f64,
    pub mean_energy_j: f64,
    pub std_energy_j: f64,
    /// Mean of `S / (T_r * E)` in (bits/s)/J, recomputed from raw records.
    pub mean_efficiency: f64,
    pub mean_reward: f64,
    pub violation_rate: f64,
    /// Selection frequency per action (local first); sums to one.
    pub action_freqs: Vec<f64>,
    pub psnr_mean_db: f64,
}

impl MetricSummary {
    pub fn local_fraction(&self) -> f64 {
        self.action_freqs.first().copied().unwrap_or(0.0)
    }
}

pub fn summarize(
    records: &[StepRecord],
    num_actions: usize,
    task_gen: &TaskGenConfig,
) -> Result<MetricSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let n = records.len() as f64;
    let mean = |f: fn(&StepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mean_t = mean(|r| r.response_time_s);
    let mean_e = mean(|r| r.energy_j);
    let var_t = records
        .iter()
        .map(|r| (r.response_time_s - mean_t).powi(2))
        .sum::<f64>()
        / n;
    let var_e = records
        .iter()
        .map(|r| (r.energy_j - mean_e).powi(2))
        .sum::<f64>()
        / n;
    let mut freqs = vec![0.0; num_actions];
    for r in records {
        freqs[r.action] += 1.0;
    }
    freqs.iter_mut().for_each(|f| *f /= n);
    Ok(MetricSummary {
        num_records: records.len(),
        mean_response_time_s: mean_t,
        std_response_time_s: var_t.sqrt(),
        mean_energy_j: mean_e,
        std_energy_j: var_e.sqrt(),
        mean_efficiency: mean(|r| r.size_bits / (r.response_time_s * r.energy_j)),
        mean_reward: mean(|r| r.reward),
        violation_rate: records
            .iter()
            .filter(|r| r.deadline_slack_s < 0.0)
            .count() as f64
            / n,
        action_freqs: freqs,
        psnr_mean_db: records
            .iter()
            .map(|r| task_gen.psnr_for_layer(r.quality_layer))
            .sum::<f64>()
            / n,
    })
}

/// QoE view: PSNR histogram over quality layers and deadline-violation
/// probability binned by task size.
#[derive(Debug, Clone, Serialize)]
pub struct QoeSummary {
    /// `(layer, psnr_db, count)` for layers that appear.
    pub psnr_hist: Vec<(u8, f64, usize)>,
    /// `(size_lo, size_hi, violation_prob, count)` over equal-width bins.
    pub violation_by_size: Vec<(f64, f64, f64, usize)>,
}

pub fn qoe_summary(
    records: &[StepRecord],
    task_gen: &TaskGenConfig,
    size_bins: usize,
) -> Result<QoeSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut layer_counts = [0usize; crate::traces::NUM_QUALITY_LAYERS];
    for r in records {
        layer_counts[(r.quality_layer as usize - 1).min(6)] += 1;
    }
    let psnr_hist = layer_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i as u8 + 1, task_gen.layer_psnr_db[i], c))
        .collect();

    let lo = records.iter().map(|r| r.size_bits).fold(f64::INFINITY, f64::min);
    let hi = records
        .iter()
        .map(|r| r.size_bits)
        .fold(f64::NEG_INFINITY, f64::max);
    let bins = size_bins.max(1);
    let width = ((hi - lo) / bins as f64).max(1e-9);
    let mut counts = vec![0usize; bins];
    let mut violations = vec![0usize; bins];
    for r in records {
        let idx = (((r.size_bits - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
        if r.deadline_slack_s < 0.0 {
            violations[idx] += 1;
        }
    }
    let violation_by_size = (0..bins)
        .map(|i| {
            let prob = if counts[i] > 0 {
                violations[i] as f64 / counts[i] as f64
            } else {
                0.0
            };
            (lo + i as f64 * width, lo + (i + 1) as f64 * width, prob, counts[i])
        })
        .collect();
    Ok(QoeSummary {
        psnr_hist,
        violation_by_size,
    })
}

/// What an experiment sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    NumUsers,
    TaskSizeScale,
    UserSpeed,
    MecSpeed,
}

impl SweepVar {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "num_users" => Some(Self::NumUsers),
            "task_size_scale" => Some(Self::TaskSizeScale),
            "user_speed" => Some(Self::UserSpeed),
            "mec_speed" => Some(Self::MecSpeed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NumUsers => "num_users",
            Self::TaskSizeScale => "task_size_scale",
            Self::UserSpeed => "user_speed",
            Self::MecSpeed => "mec_speed",
        }
    }
}

/// Applies one sweep point to a base config. Size and speed values are
/// multiplicative scales; `num_users` is the literal user count.
pub fn apply_sweep(base: &SystemConfig, var: SweepVar, value: f64) -> SystemConfig {
    let mut cfg = base.clone();
    match var {
        SweepVar::NumUsers => {
            cfg.num_users = value.round().max(1.0) as usize;
        }
        SweepVar::TaskSizeScale => {
            for m in cfg.task_gen.layer_size_mean_bits.iter_mut() {
                *m *= value;
            }
            for s in cfg.task_gen.layer_size_std_bits.iter_mut() {
                *s *= value;
            }
        }
        SweepVar::UserSpeed => {
            cfg.compute.user_speed_bps *= value;
        }
        SweepVar::MecSpeed => {
            cfg.compute.mec_total_speed_bps *= value;
        }
    }
    cfg
}

/// Agents an experiment can field.
#[derive(Debug, Clone)]
pub enum AgentSel {
    Baseline(BaselineKind),
    /// Evaluate an existing checkpoint at every sweep point.
    PpgCheckpoint(PathBuf),
    /// Evaluate existing per-user bandit checkpoints.
    BanditCheckpoints(PathBuf),
    /// Train fresh at every sweep point, then evaluate greedily.
    TrainPpg(PpgKind, usize),
    TrainBandit(EstimatorKind, ExplorerKind, usize),
}

impl AgentSel {
    pub fn label(&self) -> String {
        match self {
            AgentSel::Baseline(b) => b.name().to_string(),
            AgentSel::PpgCheckpoint(p) => format!("ckpt:{}", p.display()),
            AgentSel::BanditCheckpoints(p) => format!("bandit-ckpt:{}", p.display()),
            AgentSel::TrainPpg(kind, _) => kind.name().to_string(),
            AgentSel::TrainBandit(est, exp, _) => crate::bandit::kind_name(*est, *exp).to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct ExperimentSpec {
    pub sweep: SweepVar,
    pub episodes: usize,
}

/// One table row: `(sweep value, agent, seed)` with its metric summary.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub sweep_var: String,
    pub sweep_value: f64,
    pub agent: String,
    pub seed: u64,
    pub episodes: usize,
    pub summary: MetricSummary,
}

/// Evaluates one agent at one sweep point with one seed.
pub fn run_point(
    base: &SystemConfig,
    var: SweepVar,
    value: f64,
    agent: &AgentSel,
    seed: u64,
    eval_episodes: usize,
) -> Result<MetricSummary, EvalError> {
    let mut cfg = apply_sweep(base, var, value);
    cfg.seed = seed;
    let mut env = Env::new(&cfg)?;
    let records = match agent {
        AgentSel::Baseline(kind) => run_baseline(*kind, &mut env, eval_episodes, seed)?,
        AgentSel::PpgCheckpoint(path) => {
            let agent = PpgAgent::load(path, &cfg)?;
            evaluate(&mut env, &agent, eval_episodes, seed)?
        }
        AgentSel::BanditCheckpoints(dir) => {
            let mut team = load_bandit_team(dir, &cfg)?;
            evaluate_dsmab(&mut env, &mut team, eval_episodes, seed)?
        }
        AgentSel::TrainPpg(kind, train_episodes) => {
            let mut agent = PpgAgent::new(*kind, &cfg, seed)?;
            train(&mut env, &mut agent, *train_episodes, seed, |_| {})?;
            evaluate(&mut env, &agent, eval_episodes, seed ^ 0xe7a1)?
        }
        AgentSel::TrainBandit(est, exp, train_episodes) => {
            let mut team = DsmabTeam::new(*est, *exp, &cfg, seed)?;
            train_dsmab(&mut env, &mut team, *train_episodes, seed, |_| {})?;
            evaluate_dsmab(&mut env, &mut team, eval_episodes, seed ^ 0xe7a1)?
        }
    };
    summarize(&records, cfg.num_actions(), &cfg.task_gen)
}

/// Loads per-user bandit checkpoint files `user<k>.ckpt` from a directory.
pub fn load_bandit_team(dir: &Path, cfg: &SystemConfig) -> Result<DsmabTeam, EvalError> {
    let mut agents = Vec::with_capacity(cfg.num_users);
    let mut first_header = None;
    for u in 0..cfg.num_users {
        let path = dir.join(format!("user{u:03}.ckpt"));
        let (agent, header) = BanditAgent::load(&path)?;
        if first_header.is_none() {
            first_header = Some(header);
        }
        agents.push(agent);
    }
    let header = first_header.ok_or(EvalError::NoRecords)?;
    let mut team = DsmabTeam::new(header.estimator, header.explorer, cfg, 0)?;
    team.agents = agents;
    Ok(team)
}

/// Runs the full `(sweep value, agent, seed)` grid. Points are independent
/// and run in parallel; rows come back sorted by (agent, value, seed).
pub fn run_experiment(
    base: &SystemConfig,
    spec: &ExperimentSpec,
    values: &[f64],
    agents: &[AgentSel],
    seeds: &[u64],
) -> Result<Vec<ExperimentRow>, EvalError> {
    let mut points: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..agents.len() {
        for v in 0..values.len() {
            for s in 0..seeds.len() {
                points.push((a, v, s));
            }
        }
    }
    let results: Vec<Result<ExperimentRow, EvalError>> = points
        .par_iter()
        .map(|&(a, v, s)| {
            let summary = run_point(
                base,
                spec.sweep,
                values[v],
                &agents[a],
                seeds[s],
                spec.episodes,
            )?;
            Ok(ExperimentRow {
                sweep_var: spec.sweep.name().to_string(),
                sweep_value: values[v],
                agent: agents[a].label(),
                seed: seeds[s],
                episodes: spec.episodes,
                summary,
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    rows.sort_by(|x, y| {
        (&x.agent, x.sweep_value, x.seed)
            .partial_cmp(&(&y.agent, y.sweep_value, y.seed))
            .unwrap()
    });
    Ok(rows)
}

/// Flat CSV schema for experiment rows (action frequencies appended as
/// `freq_0..freq_C`).
pub fn write_rows_csv(path: &Path, rows: &[ExperimentRow]) -> Result<(), EvalError> {
    let num_actions = rows
        .iter()
        .map(|r| r.summary.action_freqs.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "sweep_var".to_string(),
        "sweep_value".to_string(),
        "agent".to_string(),
        "seed".to_string(),
        "episodes".to_string(),
        "num_records".to_string(),
        "mean_response_time_s".to_string(),
        "std_response_time_s".to_string(),
        "mean_energy_j".to_string(),
        "std_energy_j".to_string(),
        "mean_efficiency".to_string(),
        "mean_reward".to_string(),
        "violation_rate".to_string(),
        "psnr_mean_db".to_string(),
    ];
    for a in 0..num_actions {
        header.push(format!("freq_{a}"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.sweep_var.clone(),
            format!("{}", r.sweep_value),
            r.agent.clone(),
            format!("{}", r.seed),
            format!("{}", r.episodes),
            format!("{}", r.summary.num_records),
            format!("{}", r.summary.mean_response_time_s),
            format!("{}", r.summary.std_response_time_s),
            format!("{}", r.summary.mean_energy_j),
            format!("{}", r.summary.std_energy_j),
            format!("{}", r.summary.mean_efficiency),
            format!("{}", r.summary.mean_reward),
            format!("{}", r.summary.violation_rate),
            format!("{}", r.summary.psnr_mean_db),
        ];
        for a in 0..num_actions {
            rec.push(format!(
                "{}",
                r.summary.action_freqs.get(a).copied().unwrap_or(0.0)
            ));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One-sided sign test: P(successes >= k | n fair coins). Used by the trend
/// assertions (reject "no trend" at p < 0.05).
pub fn sign_test_p(successes: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in successes..=n {
        p += binomial(n, k);
    }
    p / 2f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}
