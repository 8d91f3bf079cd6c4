//! `offload`: single entry point for trace synthesis, training, evaluation,
//! experiment sweeps, the exhaustive oracle, and plot emission.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 training abort
//! (non-finite loss, diagnostic written into the run directory), 3
//! checkpoint/config dimension mismatch.

mod plot;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use offload_sim::bandit::{self, train_dsmab, BanditCheckpointHeader, ContextScale, DsmabTeam};
use offload_sim::config::{self, SystemConfig, CONFIG_ENV_VAR};
use offload_sim::env::Env;
use offload_sim::eval::{
    self, brute_force_oracle, run_baseline, summarize, AgentSel, BaselineKind, ExperimentSpec,
    SweepVar,
};
use offload_sim::ppg::{self, PpgAgent, PpgKind, TrainError};

use runs::{CliError, RunDir};

const PPG_AGENTS: [&str; 2] = ["cppg", "ippg"];
const BANDIT_AGENTS: [&str; 5] = ["lin-ucb", "lin-ts", "nn-eps", "nn-ucb", "nn-ts"];
const BASELINES: [&str; 3] = ["always_local", "always_offload_best_rate", "uniform_random"];

#[derive(Parser)]
#[command(name = "offload", version, about)]
struct Cli {
    /// Config file (TOML). Falls back to $OFFLOAD_CONFIG, then to built-in
    /// defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel experiment points.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the config's synthetic traces out as CSV files.
    SynthTraces {
        #[arg(long, default_value = "runs/traces")]
        out_dir: PathBuf,
        /// Trace length in seconds.
        #[arg(long, default_value_t = 600.0)]
        duration: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an agent and write checkpoint + training log into a run dir.
    Train {
        /// One of: cppg, ippg, lin-ucb, lin-ts, nn-eps, nn-ucb, nn-ts.
        #[arg(long)]
        agent: String,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Run directory name (defaults to `<agent>-<timestamp>`).
        #[arg(long)]
        run_name: Option<String>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint or baseline greedily; write metrics + records.
    Eval {
        /// PPG checkpoint file or bandit checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baseline name instead of a checkpoint.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long)]
        run_name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Sweep a system variable over a grid of (agent, value, seed) points.
    Sweep {
        /// num_users | task_size_scale | user_speed | mec_speed.
        #[arg(long)]
        sweep: String,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: String,
        /// Comma-separated agents: baselines, trainable kinds, or
        /// `ckpt:<path>` / `bandit-ckpt:<dir>`.
        #[arg(long)]
        agents: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        /// Evaluation episodes per point.
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Training episodes for trainable agents (fresh per point).
        #[arg(long)]
        train_episodes: Option<usize>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long)]
        run_name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Exhaustive joint-action oracle on a desk-scale config.
    Oracle {
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        #[arg(long)]
        run_name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Render SVG figures from a sweep results CSV.
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// tradeoff | scalability | policy.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "plots")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(cli_path: &Option<PathBuf>) -> Result<SystemConfig, CliError> {
    let path = cli_path
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from));
    match path {
        Some(p) => config::load_config(&p).map_err(|e| CliError::new(1, format!("{e}"))),
        None => Ok(SystemConfig::default()),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| CliError::new(1, format!("cannot parse `{v}` as {what}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::SynthTraces {
            out_dir,
            duration,
            seed,
        } => cmd_synth_traces(&cli.config, out_dir, duration, seed),
        Cmd::Train {
            agent,
            episodes,
            seed,
            out_dir,
            run_name,
            force,
        } => cmd_train(&cli.config, &agent, episodes, seed, out_dir, run_name, force),
        Cmd::Eval {
            checkpoint,
            baseline,
            episodes,
            seed,
            out_dir,
            run_name,
            force,
        } => cmd_eval(
            &cli.config,
            checkpoint,
            baseline,
            episodes,
            seed,
            out_dir,
            run_name,
            force,
        ),
        Cmd::Sweep {
            sweep,
            values,
            agents,
            seeds,
            episodes,
            train_episodes,
            out_dir,
            run_name,
            force,
        } => cmd_sweep(
            &cli.config,
            &sweep,
            &values,
            &agents,
            &seeds,
            episodes,
            train_episodes,
            out_dir,
            run_name,
            force,
        ),
        Cmd::Oracle {
            episodes,
            seed,
            out_dir,
            run_name,
            force,
        } => cmd_oracle(&cli.config, episodes, seed, out_dir, run_name, force),
        Cmd::Plot {
            input,
            kind,
            out_dir,
        } => plot::cmd_plot(&input, &kind, &out_dir),
    }
}

fn cmd_synth_traces(
    config: &Option<PathBuf>,
    out_dir: PathBuf,
    duration: f64,
    seed: Option<u64>,
) -> Result<(), CliError> {
    use offload_sim::config::TraceSource;
    use offload_sim::traces::{synthesize_trace, write_trace_csv, Direction};

    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::new(1, format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for (ci, ch) in cfg.channels.iter().enumerate() {
        for (direction, src, tag) in [
            (Direction::Uplink, &ch.uplink, "uplink"),
            (Direction::Downlink, &ch.downlink, "downlink"),
        ] {
            if let TraceSource::Synthetic(spec) = src {
                let stream = 0x7452_0000 + 2 * ci as u64 + u64::from(tag == "downlink");
                let mut rng = offload_sim::stream_rng(cfg.seed, stream);
                let trace = synthesize_trace(spec, duration, direction, &mut rng);
                let name = format!("ch{}_{:?}_{}.csv", ch.id, ch.technology, tag).to_lowercase();
                let path = out_dir.join(&name);
                write_trace_csv(&trace, &path)
                    .map_err(|e| CliError::new(1, format!("write {name}: {e}")))?;
                written.push(name);
            }
        }
    }
    println!("wrote {} trace files to {}", written.len(), out_dir.display());
    runs::write_manifest_at(
        &out_dir,
        &cfg,
        "synth-traces",
        &[("duration_s", format!("{duration}"))],
        &written,
    )?;
    Ok(())
}

fn train_abort(run: &RunDir, msg: String) -> CliError {
    let _ = std::fs::write(run.path().join("diagnostic.txt"), &msg);
    CliError::new(2, format!("{msg} (diagnostic written to run directory)"))
}

fn cmd_train(
    config: &Option<PathBuf>,
    agent: &str,
    episodes: usize,
    seed: Option<u64>,
    out_dir: PathBuf,
    run_name: Option<String>,
    force: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let is_ppg = PPG_AGENTS.contains(&agent);
    let bandit_kind = bandit::parse_kind(agent);
    if !is_ppg && bandit_kind.is_none() {
        return Err(CliError::new(
            1,
            format!(
                "unknown agent `{agent}`; valid agents: {}, {}",
                PPG_AGENTS.join(", "),
                BANDIT_AGENTS.join(", ")
            ),
        ));
    }
    let run = RunDir::create(&out_dir, run_name, agent, force)?;
    run.write_config_snapshot(&cfg)?;
    let mut env = Env::new(&cfg).map_err(|e| CliError::new(1, format!("env: {e}")))?;
    let mut log = run.train_log_writer(&cfg)?;

    let mut outputs = vec!["config.toml".to_string(), "training_log.csv".to_string()];
    if is_ppg {
        let kind = if agent == "cppg" {
            PpgKind::Cppg
        } else {
            PpgKind::Ippg
        };
        let mut ag = PpgAgent::new(kind, &cfg, seed)
            .map_err(|e| CliError::new(1, format!("agent init: {e}")))?;
        let result = ppg::train(&mut env, &mut ag, episodes, seed, |row| {
            log.write_row(row);
        });
        log.finish()?;
        match result {
            Ok(()) => {}
            Err(TrainError::Diverged(msg)) => return Err(train_abort(&run, msg)),
            Err(e) => return Err(CliError::new(1, format!("train: {e}"))),
        }
        let ckpt = run.path().join("checkpoint.ckpt");
        ag.save(&ckpt)
            .map_err(|e| CliError::new(1, format!("save checkpoint: {e}")))?;
        outputs.push("checkpoint.ckpt".to_string());
    } else {
        let (est, exp) = bandit_kind.unwrap();
        let mut team = DsmabTeam::new(est, exp, &cfg, seed)
            .map_err(|e| CliError::new(1, format!("agent init: {e}")))?;
        let result = train_dsmab(&mut env, &mut team, episodes, seed, |row| {
            log.write_row(row);
        });
        log.finish()?;
        match result {
            Ok(()) => {}
            Err(TrainError::Diverged(msg)) => return Err(train_abort(&run, msg)),
            Err(e) => return Err(CliError::new(1, format!("train: {e}"))),
        }
        let dir = run.path().join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::new(1, format!("{e}")))?;
        let scale = ContextScale::from_config(&cfg);
        for (u, ag) in team.agents.iter().enumerate() {
            let header = BanditCheckpointHeader {
                estimator: est,
                explorer: exp,
                cfg: cfg.bandit.clone(),
                context_dim: ag.context_dim(),
                user: u,
                scale,
                lambda: cfg.lambda_init,
            };
            let name = format!("checkpoints/user{u:03}.ckpt");
            ag.save(&run.path().join(&name), &header)
                .map_err(|e| CliError::new(1, format!("save {name}: {e}")))?;
            outputs.push(name);
        }
    }
    run.write_manifest(
        "train",
        &[
            ("agent", agent.to_string()),
            ("episodes", format!("{episodes}")),
            ("seed", format!("{seed}")),
        ],
        &outputs,
    )?;
    println!("run directory: {}", run.path().display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    baseline: Option<String>,
    episodes: usize,
    seed: Option<u64>,
    out_dir: PathBuf,
    run_name: Option<String>,
    force: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let (label, records) = match (&checkpoint, &baseline) {
        (None, Some(name)) => {
            let kind = BaselineKind::parse(name).ok_or_else(|| {
                CliError::new(
                    1,
                    format!("unknown baseline `{name}`; valid: {}", BASELINES.join(", ")),
                )
            })?;
            let mut env = Env::new(&cfg).map_err(|e| CliError::new(1, format!("env: {e}")))?;
            let recs = run_baseline(kind, &mut env, episodes, seed)
                .map_err(|e| CliError::new(1, format!("eval: {e}")))?;
            (name.clone(), recs)
        }
        (Some(path), None) => {
            if path.is_dir() {
                let mut team = eval::load_bandit_team(path, &cfg)
                    .map_err(|e| CliError::new(3, format!("load bandit checkpoints: {e}")))?;
                let mut env =
                    Env::new(&cfg).map_err(|e| CliError::new(1, format!("env: {e}")))?;
                let recs = bandit::evaluate_dsmab(&mut env, &mut team, episodes, seed)
                    .map_err(|e| CliError::new(1, format!("eval: {e}")))?;
                ("bandit-checkpoint".to_string(), recs)
            } else {
                let header = PpgAgent::read_header(path)
                    .map_err(|e| CliError::new(3, format!("read checkpoint: {e}")))?;
                if header.num_users != cfg.num_users
                    || header.num_actions != cfg.num_actions()
                    || header.observation_dim != cfg.observation_dim
                {
                    return Err(CliError::new(
                        3,
                        format!(
                            "checkpoint/config dimension mismatch: checkpoint has K={}, A={}, dim={} but config has K={}, A={}, dim={}",
                            header.num_users,
                            header.num_actions,
                            header.observation_dim,
                            cfg.num_users,
                            cfg.num_actions(),
                            cfg.observation_dim
                        ),
                    ));
                }
                let agent = PpgAgent::load(path, &cfg)
                    .map_err(|e| CliError::new(3, format!("load checkpoint: {e}")))?;
                let mut env =
                    Env::new(&cfg).map_err(|e| CliError::new(1, format!("env: {e}")))?;
                let recs = ppg::evaluate(&mut env, &agent, episodes, seed)
                    .map_err(|e| CliError::new(1, format!("eval: {e}")))?;
                (header.kind.name().to_string(), recs)
            }
        }
        _ => {
            return Err(CliError::new(
                1,
                "exactly one of --checkpoint or --baseline is required".to_string(),
            ))
        }
    };
    let summary = summarize(&records, cfg.num_actions(), &cfg.task_gen)
        .map_err(|e| CliError::new(1, format!("{e}")))?;
    let run = RunDir::create(&out_dir, run_name, &format!("eval-{label}"), force)?;
    run.write_config_snapshot(&cfg)?;
    run.write_metrics_json("metrics.json", &cfg, &summary)?;
    run.write_records_csv("records.csv", &cfg, &records)?;
    run.write_manifest(
        "eval",
        &[
            ("agent", label),
            ("episodes", format!("{episodes}")),
            ("seed", format!("{seed}")),
        ],
        &[
            "config.toml".to_string(),
            "metrics.json".to_string(),
            "records.csv".to_string(),
        ],
    )?;
    println!("run directory: {}", run.path().display());
    println!(
        "mean response {:.4} s | mean energy {:.4} J | violations {:.4} | local fraction {:.4}",
        summary.mean_response_time_s,
        summary.mean_energy_j,
        summary.violation_rate,
        summary.local_fraction()
    );
    Ok(())
}

fn parse_agent_sel(name: &str, train_episodes: Option<usize>) -> Result<AgentSel, CliError> {
    if let Some(kind) = BaselineKind::parse(name) {
        return Ok(AgentSel::Baseline(kind));
    }
    if let Some(path) = name.strip_prefix("ckpt:") {
        return Ok(AgentSel::PpgCheckpoint(PathBuf::from(path)));
    }
    if let Some(path) = name.strip_prefix("bandit-ckpt:") {
        return Ok(AgentSel::BanditCheckpoints(PathBuf::from(path)));
    }
    let train_eps = || {
        train_episodes.ok_or_else(|| {
            CliError::new(
                1,
                format!("agent `{name}` trains per sweep point; pass --train-episodes"),
            )
        })
    };
    if name == "cppg" {
        return Ok(AgentSel::TrainPpg(PpgKind::Cppg, train_eps()?));
    }
    if name == "ippg" {
        return Ok(AgentSel::TrainPpg(PpgKind::Ippg, train_eps()?));
    }
    if let Some((est, exp)) = bandit::parse_kind(name) {
        return Ok(AgentSel::TrainBandit(est, exp, train_eps()?));
    }
    Err(CliError::new(
        1,
        format!(
            "unknown agent `{name}`; valid: {}, {}, {}, ckpt:<path>, bandit-ckpt:<dir>",
            BASELINES.join(", "),
            PPG_AGENTS.join(", "),
            BANDIT_AGENTS.join(", ")
        ),
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &Option<PathBuf>,
    sweep: &str,
    values: &str,
    agents: &str,
    seeds: &str,
    episodes: usize,
    train_episodes: Option<usize>,
    out_dir: PathBuf,
    run_name: Option<String>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let var = SweepVar::parse(sweep).ok_or_else(|| {
        CliError::new(
            1,
            format!(
                "unknown sweep `{sweep}`; valid: num_users, task_size_scale, user_speed, mec_speed"
            ),
        )
    })?;
    let values: Vec<f64> = parse_list(values, "a number")?;
    let seeds: Vec<u64> = parse_list(seeds, "a seed")?;
    if values.is_empty() || seeds.is_empty() {
        return Err(CliError::new(1, "need at least one value and one seed".into()));
    }
    let sels: Vec<AgentSel> = agents
        .split(',')
        .map(|a| parse_agent_sel(a.trim(), train_episodes))
        .collect::<Result<_, _>>()?;
    let spec = ExperimentSpec {
        sweep: var,
        episodes,
    };
    let rows = eval::run_experiment(&cfg, &spec, &values, &sels, &seeds)
        .map_err(|e| CliError::new(1, format!("sweep: {e}")))?;
    let run = RunDir::create(&out_dir, run_name, &format!("sweep-{}", var.name()), force)?;
    run.write_config_snapshot(&cfg)?;
    let results = run.path().join("results.csv");
    eval::write_rows_csv(&results, &rows).map_err(|e| CliError::new(1, format!("{e}")))?;
    runs::prepend_provenance(&results, &cfg)?;
    run.write_manifest(
        "sweep",
        &[
            ("sweep", var.name().to_string()),
            ("values", format!("{values:?}")),
            ("seeds", format!("{seeds:?}")),
            ("episodes", format!("{episodes}")),
            (
                "train_episodes",
                train_episodes.map(|t| t.to_string()).unwrap_or_default(),
            ),
        ],
        &["config.toml".to_string(), "results.csv".to_string()],
    )?;
    println!("run directory: {}", run.path().display());
    println!("{} result rows", rows.len());
    Ok(())
}

fn cmd_oracle(
    config: &Option<PathBuf>,
    episodes: usize,
    seed: Option<u64>,
    out_dir: PathBuf,
    run_name: Option<String>,
    force: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let mut env = Env::new(&cfg).map_err(|e| CliError::new(1, format!("env: {e}")))?;
    let outcome = brute_force_oracle(&mut env, episodes, seed)
        .map_err(|e| CliError::new(1, format!("oracle: {e}")))?;
    let summary = summarize(&outcome.records, cfg.num_actions(), &cfg.task_gen)
        .map_err(|e| CliError::new(1, format!("{e}")))?;
    let run = RunDir::create(&out_dir, run_name, "oracle", force)?;
    run.write_config_snapshot(&cfg)?;
    run.write_json(
        "oracle.json",
        &cfg,
        &serde_json::json!({
            "mean_best_reward": outcome.mean_best_reward,
            "episodes": episodes,
            "seed": seed,
            "summary": summary,
        }),
    )?;
    run.write_records_csv("records.csv", &cfg, &outcome.records)?;
    run.write_manifest(
        "oracle",
        &[
            ("episodes", format!("{episodes}")),
            ("seed", format!("{seed}")),
        ],
        &[
            "config.toml".to_string(),
            "oracle.json".to_string(),
            "records.csv".to_string(),
        ],
    )?;
    println!("optimal mean reward: {:.6}", outcome.mean_best_reward);
    println!("run directory: {}", run.path().display());
    Ok(())
}
