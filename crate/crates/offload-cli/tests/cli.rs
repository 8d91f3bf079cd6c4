//! End-to-end checks of the `offload` binary: subcommand wiring, exit
//! codes, run-directory hygiene, and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn offload(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offload"))
        .args(args)
        .current_dir(dir)
        .env_remove("OFFLOAD_CONFIG")
        .output()
        .expect("binary runs")
}

const MICRO_CONFIG: &str = r#"
num_users = 2
num_channels = 2
episode_len = 8
reward_scale = 1e8
seed = 7

[[channels]]
id = 1
technology = "5g"
tx_power_coeff_mw_per_mbps = 5.27
[channels.uplink.synthetic]
mean_bps = 1e8
std_bps = 0.0
model = "iid_lognormal"
correlation = 0.0
sample_period_s = 1.0
[channels.downlink.synthetic]
mean_bps = 1e8
std_bps = 0.0
model = "iid_lognormal"
correlation = 0.0
sample_period_s = 1.0

[[channels]]
id = 2
technology = "4g"
tx_power_coeff_mw_per_mbps = 57.99
[channels.uplink.synthetic]
mean_bps = 5e7
std_bps = 0.0
model = "iid_lognormal"
correlation = 0.0
sample_period_s = 1.0
[channels.downlink.synthetic]
mean_bps = 5e7
std_bps = 0.0
model = "iid_lognormal"
correlation = 0.0
sample_period_s = 1.0

[compute]
mec_total_speed_bps = 2.5e8
reference_intensity_cpb = 1.0

[task_gen]
layer_weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]

[task_gen.intensity]
mean_cpb = 2.0
std_cpb = 0.0

[ppg]
hidden = 16
n_policy = 6
n_aux = 2
minibatch = 32

[bandit]
hidden = 8
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), MICRO_CONFIG).unwrap();
    dir
}

#[test]
fn unknown_agent_exits_one_with_agent_list() {
    let dir = setup();
    let out = offload(
        &["--config", "config.toml", "train", "--agent", "dqn"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["cppg", "ippg", "lin-ucb", "lin-ts", "nn-eps", "nn-ucb", "nn-ts"] {
        assert!(err.contains(name), "missing {name} in: {err}");
    }
}

#[test]
fn invalid_config_exits_one() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "num_users = 0\n").unwrap();
    let out = offload(
        &["--config", "bad.toml", "train", "--agent", "cppg"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_users"));
}

#[test]
fn config_path_env_var_is_honored() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "num_users = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_offload"))
        .args(["train", "--agent", "cppg"])
        .current_dir(dir.path())
        .env("OFFLOAD_CONFIG", "bad.toml")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_users"));
}

#[test]
fn train_writes_run_dir_and_refuses_overwrite() {
    let dir = setup();
    let args = [
        "--config",
        "config.toml",
        "train",
        "--agent",
        "cppg",
        "--episodes",
        "4",
        "--seed",
        "3",
        "--run-name",
        "t",
    ];
    let out = offload(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "manifest.json", "training_log.csv", "checkpoint.ckpt"] {
        assert!(dir.path().join("runs/t").join(f).exists(), "missing {f}");
    }
    // Second run into the same directory must be refused without --force.
    let out2 = offload(&args, dir.path());
    assert_eq!(out2.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out2.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(offload(&forced, dir.path()).status.code(), Some(0));
}

#[test]
fn identical_train_and_eval_runs_are_byte_identical() {
    let dir = setup();
    for name in ["a", "b"] {
        let out = offload(
            &[
                "--config", "config.toml", "train", "--agent", "cppg", "--episodes", "8",
                "--seed", "7", "--run-name", name,
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
        let ck = format!("runs/{name}/checkpoint.ckpt");
        let ev = offload(
            &[
                "--config", "config.toml", "eval", "--checkpoint", &ck, "--episodes", "4",
                "--seed", "5", "--run-name", &format!("{name}-eval"),
            ],
            dir.path(),
        );
        assert_eq!(ev.status.code(), Some(0));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(
        read("runs/a/training_log.csv"),
        read("runs/b/training_log.csv")
    );
    assert_eq!(read("runs/a/checkpoint.ckpt"), read("runs/b/checkpoint.ckpt"));
    assert_eq!(
        read("runs/a-eval/metrics.json"),
        read("runs/b-eval/metrics.json")
    );
    assert_eq!(read("runs/a-eval/records.csv"), read("runs/b-eval/records.csv"));
}

#[test]
fn eval_dimension_mismatch_exits_three_naming_values() {
    let dir = setup();
    let out = offload(
        &[
            "--config", "config.toml", "train", "--agent", "cppg", "--episodes", "4",
            "--seed", "1", "--run-name", "t",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let k3 = MICRO_CONFIG.replace("num_users = 2", "num_users = 3");
    std::fs::write(dir.path().join("k3.toml"), k3).unwrap();
    let ev = offload(
        &[
            "--config", "k3.toml", "eval", "--checkpoint", "runs/t/checkpoint.ckpt",
            "--run-name", "e",
        ],
        dir.path(),
    );
    assert_eq!(ev.status.code(), Some(3));
    let err = String::from_utf8_lossy(&ev.stderr);
    assert!(err.contains("K=2") && err.contains("K=3"), "{err}");
}

#[test]
fn baseline_eval_needs_no_checkpoint() {
    let dir = setup();
    let out = offload(
        &[
            "--config", "config.toml", "eval", "--baseline", "always_local", "--episodes",
            "3", "--seed", "2", "--run-name", "bl",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("runs/bl/metrics.json")).unwrap();
    assert!(metrics.contains("\"summary\""));
    assert!(metrics.contains("provenance"));
    let records = std::fs::read_to_string(dir.path().join("runs/bl/records.csv")).unwrap();
    assert!(records.starts_with("# provenance"));
    // 2 users x 8 steps x 3 episodes records plus provenance + header.
    assert_eq!(records.lines().count(), 2 + 48);
}

#[test]
fn bandit_train_writes_per_user_checkpoints_usable_for_eval() {
    let dir = setup();
    let out = offload(
        &[
            "--config", "config.toml", "train", "--agent", "nn-ucb", "--episodes", "3",
            "--seed", "2", "--run-name", "bd",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("runs/bd/checkpoints/user000.ckpt").exists());
    assert!(dir.path().join("runs/bd/checkpoints/user001.ckpt").exists());
    let ev = offload(
        &[
            "--config", "config.toml", "eval", "--checkpoint", "runs/bd/checkpoints",
            "--episodes", "2", "--seed", "4", "--run-name", "bde",
        ],
        dir.path(),
    );
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
}

#[test]
fn oracle_runs_on_desk_scale_configs() {
    let dir = setup();
    let out = offload(
        &[
            "--config", "config.toml", "oracle", "--episodes", "2", "--seed", "3",
            "--run-name", "or",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("optimal mean reward"));
    assert!(dir.path().join("runs/or/oracle.json").exists());
}

#[test]
fn sweep_then_plot_pipeline_and_determinism() {
    let dir = setup();
    let out = offload(
        &[
            "--config", "config.toml", "sweep", "--sweep", "num_users", "--values", "2,3",
            "--agents", "always_local,uniform_random", "--seeds", "1,2", "--episodes", "2",
            "--run-name", "sw",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let results = dir.path().join("runs/sw/results.csv");
    let text = std::fs::read_to_string(&results).unwrap();
    assert!(text.starts_with("# provenance"));
    assert_eq!(text.lines().count(), 1 + 1 + 8); // provenance + header + 8 rows

    for kind in ["tradeoff", "scalability", "policy"] {
        let p = offload(
            &[
                "plot", "--input", "runs/sw/results.csv", "--kind", kind, "--out-dir", "plots",
            ],
            dir.path(),
        );
        assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    }
    let svg = std::fs::read(dir.path().join("plots/tradeoff.svg")).unwrap();
    // Re-plotting from the same CSV reproduces the bytes.
    let p2 = offload(
        &[
            "plot", "--input", "runs/sw/results.csv", "--kind", "tradeoff", "--out-dir",
            "plots2",
        ],
        dir.path(),
    );
    assert_eq!(p2.status.code(), Some(0));
    assert_eq!(svg, std::fs::read(dir.path().join("plots2/tradeoff.svg")).unwrap());

    // Missing column and empty input both exit 1 with a named reason.
    std::fs::write(dir.path().join("cols.csv"), "agent,seed\nx,1\n").unwrap();
    let bad = offload(
        &["plot", "--input", "cols.csv", "--kind", "tradeoff", "--out-dir", "plots"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("mean_response_time_s"));
    std::fs::write(dir.path().join("empty.csv"), "agent,seed\n").unwrap();
    let empty = offload(
        &["plot", "--input", "empty.csv", "--kind", "tradeoff", "--out-dir", "plots"],
        dir.path(),
    );
    assert_eq!(empty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("no rows"));
}

#[test]
fn synth_traces_round_trips_through_load() {
    let dir = setup();
    let out = offload(
        &[
            "--config", "config.toml", "synth-traces", "--out-dir", "traces", "--duration",
            "30",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let files: Vec<_> = std::fs::read_dir(dir.path().join("traces"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".csv")).count(), 4);
    // The written CSV parses back as a trace usable in a config.
    let one = files.iter().find(|f| f.ends_with(".csv")).unwrap();
    let trace = offload_sim::traces::load_trace(
        &dir.path().join("traces").join(one),
        offload_sim::traces::Direction::Uplink,
    )
    .unwrap();
    assert!(trace.duration_s() >= 30.0);
}
