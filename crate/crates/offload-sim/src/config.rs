//! Domain types, units, and validated configuration.
//!
//! Everything is SI internally: bits, seconds, Hz, Joules, Watts. The only
//! unit conversion happens at the config boundary, where channel power
//! coefficients are given in mW/Mbps (and traces in Mbps); one canonical unit
//! system avoids silent 1e6 slips between modules.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::{SyntheticTraceSpec, TaskGenConfig};

/// Environment variable the CLI consults for a default config path.
pub const CONFIG_ENV_VAR: &str = "OFFLOAD_CONFIG";

/// One elastic unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub size_bits: f64,
    pub intensity_cycles_per_bit: f64,
    pub deadline_s: f64,
    pub result_size_bits: f64,
    /// Quality layer in `[1, 7]`; higher layers carry more bits and PSNR.
    pub quality_layer: u8,
}

/// Offloading decision: 0 computes on-device, `c > 0` offloads via channel `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action(pub usize);

impl Action {
    pub const LOCAL: Action = Action(0);

    pub fn is_local(self) -> bool {
        self.0 == 0
    }

    /// Zero-based channel index for offload actions.
    pub fn channel_index(self) -> Option<usize> {
        (self.0 > 0).then(|| self.0 - 1)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_local() {
            write!(f, "local")
        } else {
            write!(f, "ch{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Technology {
    #[serde(rename = "4g")]
    FourG,
    #[serde(rename = "5g")]
    FiveG,
    #[serde(rename = "wigig")]
    WiGig,
}

/// Where a channel's rate series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic(SyntheticTraceSpec),
    File { path: String },
}

/// One wireless channel: energy profile plus uplink/downlink trace sources.
///
/// Power draw is rate-proportional: at average rate R the radio consumes
/// `coeff(mW/Mbps) * R(Mbps)` milliwatts, so a transfer of S bits costs
/// exactly `coeff * S * 1e-9` Joules regardless of the rate realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub id: usize,
    pub technology: Technology,
    pub tx_power_coeff_mw_per_mbps: f64,
    /// Defaults to the tx coefficient when absent (no downlink power values
    /// are published for these radios).
    pub rx_power_coeff_mw_per_mbps: Option<f64>,
    pub uplink: TraceSource,
    pub downlink: TraceSource,
}

impl ChannelSpec {
    pub fn rx_coeff(&self) -> f64 {
        self.rx_power_coeff_mw_per_mbps
            .unwrap_or(self.tx_power_coeff_mw_per_mbps)
    }

    /// Transmit energy per bit in J/bit (mW/Mbps == 1e-9 J/bit).
    pub fn tx_energy_per_bit(&self) -> f64 {
        self.tx_power_coeff_mw_per_mbps * 1e-9
    }

    pub fn rx_energy_per_bit(&self) -> f64 {
        self.rx_coeff() * 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeSpec {
    pub user_cpu_freq_hz: f64,
    pub user_speed_bps: f64,
    pub mec_total_speed_bps: f64,
    pub cpu_capacitance: f64,
    /// Normalizes intensity in the execution-time model; when unset it
    /// follows the mean of the intensity distribution so a mean-intensity
    /// task of S bits takes S / speed seconds.
    pub reference_intensity_cpb: Option<f64>,
}

impl Default for ComputeSpec {
    fn default() -> Self {
        Self {
            user_cpu_freq_hz: 2.4e9,
            user_speed_bps: 1e8,
            mec_total_speed_bps: 2.5e9,
            cpu_capacitance: 1e-27,
            reference_intensity_cpb: None,
        }
    }
}

/// Hyperparameters for the phasic policy gradient agents.
///
/// `gamma` is pinned to zero: the reward fully captures one decision, which
/// reduces the problem to a contextual bandit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpgHyper {
    pub clip_epsilon: f64,
    pub dual_clip: f64,
    pub entropy_weight: f64,
    pub n_policy: usize,
    pub n_aux: usize,
    pub n_lambda: usize,
    /// Update cadence in collected episodes; the replay buffer holds exactly
    /// this many episodes between update rounds.
    pub n_update: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub lambda_lr: f64,
    pub hidden: usize,
    pub gamma: f64,
}

impl Default for PpgHyper {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            dual_clip: 3.0,
            entropy_weight: 0.01,
            n_policy: 80,
            n_aux: 6,
            n_lambda: 5,
            n_update: 4,
            minibatch: 256,
            learning_rate: 3e-4,
            lambda_lr: 0.1,
            hidden: 64,
            gamma: 0.0,
        }
    }
}

/// Numeric knobs shared by the bandit family; which estimator/explorer to
/// use is picked per agent kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    /// Ridge prior on the feature covariance.
    pub mu: f64,
    /// Weight on the parameter-norm regularizer in the value-fit loss.
    pub reg_weight: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Sliding window of past samples used for fitting.
    pub window: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Episodes over which epsilon decays linearly from start to end.
    pub eps_decay_episodes: usize,
    pub hidden: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            reg_weight: 1e-4,
            batch_size: 64,
            learning_rate: 1e-3,
            window: 1024,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_episodes: 1000,
            hidden: 64,
        }
    }
}

/// Full system configuration; immutable after load and safe to share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub num_users: usize,
    pub num_channels: usize,
    pub episode_len: usize,
    pub history_window: usize,
    pub observation_dim: usize,
    pub seed: u64,
    pub lambda_init: f64,
    /// Divisor applied to the efficiency term of the reward.
    pub reward_scale: f64,
    /// Length of one decision epoch (one video segment).
    pub step_duration_s: f64,
    /// Length of synthesized traces before they wrap.
    pub synth_trace_duration_s: f64,
    pub channels: Vec<ChannelSpec>,
    pub compute: ComputeSpec,
    pub task_gen: TaskGenConfig,
    pub ppg: PpgHyper,
    pub bandit: BanditConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_users: 30,
            num_channels: 3,
            episode_len: 36,
            history_window: 4,
            observation_dim: 15,
            seed: 0,
            lambda_init: 16.0,
            reward_scale: 1e6,
            step_duration_s: 1.0,
            synth_trace_duration_s: 600.0,
            channels: default_channels(),
            compute: ComputeSpec::default(),
            task_gen: TaskGenConfig::default(),
            ppg: PpgHyper::default(),
            bandit: BanditConfig::default(),
        }
    }
}

fn synth(mean_bps: f64, std_bps: f64) -> TraceSource {
    TraceSource::Synthetic(SyntheticTraceSpec {
        mean_bps,
        std_bps,
        ..SyntheticTraceSpec::default()
    })
}

fn default_channels() -> Vec<ChannelSpec> {
    vec![
        ChannelSpec {
            id: 1,
            technology: Technology::FiveG,
            tx_power_coeff_mw_per_mbps: 5.27,
            rx_power_coeff_mw_per_mbps: None,
            uplink: synth(4e8, 1.6e8),
            downlink: synth(4e8, 1.6e8),
        },
        ChannelSpec {
            id: 2,
            technology: Technology::FourG,
            tx_power_coeff_mw_per_mbps: 57.99,
            rx_power_coeff_mw_per_mbps: None,
            uplink: synth(6e7, 1.5e7),
            downlink: synth(6e7, 1.5e7),
        },
        ChannelSpec {
            id: 3,
            technology: Technology::WiGig,
            tx_power_coeff_mw_per_mbps: 6.15,
            rx_power_coeff_mw_per_mbps: None,
            uplink: synth(8e8, 3.2e8),
            downlink: synth(8e8, 3.2e8),
        },
    ]
}

impl SystemConfig {
    /// Actions available to each user: local plus one per channel.
    pub fn num_actions(&self) -> usize {
        self.num_channels + 1
    }

    pub fn reference_intensity(&self) -> f64 {
        self.compute
            .reference_intensity_cpb
            .unwrap_or(self.task_gen.intensity.mean_cpb)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

/// One named invariant violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

/// Checks every config invariant; returns one entry per violated rule.
pub fn validate(cfg: &SystemConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut check = |ok: bool, field: &str, message: String| {
        if !ok {
            v.push(Violation {
                field: field.to_string(),
                message,
            });
        }
    };

    check(
        cfg.num_users >= 1,
        "num_users",
        "num_users must be ≥ 1".into(),
    );
    check(
        cfg.num_channels >= 1,
        "num_channels",
        "num_channels must be ≥ 1".into(),
    );
    check(
        cfg.episode_len >= 1,
        "episode_len",
        "episode_len must be ≥ 1".into(),
    );
    check(
        cfg.step_duration_s > 0.0,
        "step_duration_s",
        "step duration must be > 0".into(),
    );
    check(
        cfg.synth_trace_duration_s > 0.0,
        "synth_trace_duration_s",
        "synthetic trace duration must be > 0".into(),
    );
    check(
        cfg.lambda_init >= 0.0,
        "lambda_init",
        "deadline coefficient must be ≥ 0".into(),
    );
    check(
        cfg.reward_scale > 0.0,
        "reward_scale",
        "reward scale must be > 0".into(),
    );

    let dim = 2 + 3 * cfg.history_window + 1;
    check(
        dim == cfg.observation_dim,
        "history_window",
        format!(
            "observation dim {} ≠ {}; set observation_dim accordingly or H=4",
            dim, cfg.observation_dim
        ),
    );

    check(
        cfg.channels.len() == cfg.num_channels,
        "channels",
        format!(
            "expected {} channel specs, found {}",
            cfg.num_channels,
            cfg.channels.len()
        ),
    );
    for (i, ch) in cfg.channels.iter().enumerate() {
        let f = |name: &str| format!("channels[{i}].{name}");
        check(
            ch.tx_power_coeff_mw_per_mbps > 0.0,
            &f("tx_power_coeff"),
            "power coefficient must be > 0".into(),
        );
        if let Some(rx) = ch.rx_power_coeff_mw_per_mbps {
            check(
                rx > 0.0,
                &f("rx_power_coeff"),
                "power coefficient must be > 0".into(),
            );
        }
        check(
            ch.id >= 1 && ch.id <= cfg.num_channels,
            &f("id"),
            format!("channel id must be in [1, {}]", cfg.num_channels),
        );
        for (dir, src) in [("uplink", &ch.uplink), ("downlink", &ch.downlink)] {
            if let TraceSource::Synthetic(s) = src {
                check(
                    s.mean_bps > 0.0,
                    &f(&format!("{dir}.mean_bps")),
                    "mean rate must be > 0".into(),
                );
                check(
                    s.std_bps >= 0.0,
                    &f(&format!("{dir}.std_bps")),
                    "rate std must be ≥ 0".into(),
                );
                check(
                    (0.0..1.0).contains(&s.correlation),
                    &f(&format!("{dir}.correlation")),
                    "correlation must be in [0, 1)".into(),
                );
                check(
                    s.sample_period_s > 0.0,
                    &f(&format!("{dir}.sample_period_s")),
                    "sample period must be > 0".into(),
                );
            }
        }
    }
    {
        let mut ids: Vec<usize> = cfg.channels.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        check(
            ids.len() == cfg.channels.len(),
            "channels",
            "channel ids must be unique".into(),
        );
    }

    let cp = &cfg.compute;
    check(
        cp.user_cpu_freq_hz > 0.0,
        "compute.user_cpu_freq_hz",
        "must be > 0".into(),
    );
    check(
        cp.user_speed_bps > 0.0,
        "compute.user_speed_bps",
        "must be > 0".into(),
    );
    check(
        cp.mec_total_speed_bps > 0.0,
        "compute.mec_total_speed_bps",
        "must be > 0".into(),
    );
    check(
        cp.cpu_capacitance > 0.0,
        "compute.cpu_capacitance",
        "must be > 0".into(),
    );
    check(
        cp.user_speed_bps < cp.mec_total_speed_bps,
        "compute.user_speed_bps",
        "user speed must be below total MEC speed".into(),
    );
    if let Some(r) = cp.reference_intensity_cpb {
        check(r > 0.0, "compute.reference_intensity_cpb", "must be > 0".into());
    }

    let tg = &cfg.task_gen;
    check(
        tg.layer_size_mean_bits.windows(2).all(|w| w[0] <= w[1]),
        "task_gen.layer_size_mean_bits",
        "layer size means must be nondecreasing in layer index".into(),
    );
    check(
        tg.layer_psnr_db.windows(2).all(|w| w[0] <= w[1]),
        "task_gen.layer_psnr_db",
        "PSNR must be nondecreasing in layer index".into(),
    );
    check(
        tg.layer_size_mean_bits.iter().all(|&m| m > 0.0),
        "task_gen.layer_size_mean_bits",
        "layer size means must be > 0".into(),
    );
    check(
        tg.layer_size_std_bits.iter().all(|&s| s >= 0.0),
        "task_gen.layer_size_std_bits",
        "layer size stds must be ≥ 0".into(),
    );
    check(
        tg.layer_weights.iter().all(|&w| w >= 0.0) && tg.layer_weights.iter().sum::<f64>() > 0.0,
        "task_gen.layer_weights",
        "layer weights must be ≥ 0 with positive sum".into(),
    );
    check(
        tg.intensity.mean_cpb > 0.0,
        "task_gen.intensity.mean_cpb",
        "must be > 0".into(),
    );
    check(
        tg.intensity.std_cpb >= 0.0,
        "task_gen.intensity.std_cpb",
        "must be ≥ 0".into(),
    );
    check(
        tg.deadline_s > 0.0,
        "task_gen.deadline_s",
        "deadline must be > 0".into(),
    );
    check(
        tg.result_size_ratio >= 0.0,
        "task_gen.result_size_ratio",
        "result size ratio must be ≥ 0".into(),
    );

    let p = &cfg.ppg;
    check(
        p.clip_epsilon > 0.0 && p.clip_epsilon < 1.0,
        "ppg.clip_epsilon",
        "must be in (0, 1)".into(),
    );
    check(p.dual_clip > 1.0, "ppg.dual_clip", "must be > 1".into());
    check(
        p.entropy_weight >= 0.0,
        "ppg.entropy_weight",
        "must be ≥ 0".into(),
    );
    check(
        p.n_policy >= 1 && p.n_aux >= 1 && p.n_lambda >= 1 && p.n_update >= 1,
        "ppg.iterations",
        "phase iteration counts must be ≥ 1".into(),
    );
    check(p.minibatch >= 1, "ppg.minibatch", "must be ≥ 1".into());
    check(p.learning_rate > 0.0, "ppg.learning_rate", "must be > 0".into());
    check(p.lambda_lr >= 0.0, "ppg.lambda_lr", "must be ≥ 0".into());
    check(p.hidden >= 1, "ppg.hidden", "must be ≥ 1".into());
    check(
        p.gamma == 0.0,
        "ppg.gamma",
        "gamma is fixed at 0 (single-decision rewards)".into(),
    );

    let b = &cfg.bandit;
    check(b.mu > 0.0, "bandit.mu", "must be > 0".into());
    check(b.reg_weight >= 0.0, "bandit.reg_weight", "must be ≥ 0".into());
    check(b.batch_size >= 1, "bandit.batch_size", "must be ≥ 1".into());
    check(b.learning_rate > 0.0, "bandit.learning_rate", "must be > 0".into());
    check(b.window >= 1, "bandit.window", "must be ≥ 1".into());
    check(
        (0.0..=1.0).contains(&b.eps_start) && (0.0..=1.0).contains(&b.eps_end),
        "bandit.eps",
        "epsilon must be in [0, 1]".into(),
    );
    check(b.hidden >= 1, "bandit.hidden", "must be ≥ 1".into());

    v
}

/// Loads and validates a config file; an empty file yields the defaults.
pub fn load_config(path: &Path) -> Result<SystemConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<SystemConfig, ConfigError> {
    let cfg: SystemConfig = toml::from_str(text)?;
    let violations = validate(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

pub fn to_toml(cfg: &SystemConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.num_users, 30);
        assert_eq!(cfg.task_gen.deadline_s, 1.0);
        assert_eq!(cfg.compute.cpu_capacitance, 1e-27);
        assert_eq!(cfg.compute.user_cpu_freq_hz, 2.4e9);
        assert_eq!(cfg.compute.user_speed_bps, 1e8);
        assert_eq!(cfg.compute.mec_total_speed_bps, 2.5e9);
        assert_eq!(cfg.ppg.entropy_weight, 0.01);
        assert_eq!(cfg.lambda_init, 16.0);
        // Remaining rows of the parameter table.
        assert_eq!(cfg.channels[0].tx_power_coeff_mw_per_mbps, 5.27);
        assert_eq!(cfg.channels[1].tx_power_coeff_mw_per_mbps, 57.99);
        assert_eq!(cfg.channels[2].tx_power_coeff_mw_per_mbps, 6.15);
        assert_eq!(cfg.ppg.n_policy, 80);
        assert_eq!(cfg.ppg.n_aux, 6);
        assert_eq!(cfg.ppg.n_lambda, 5);
        assert_eq!(cfg.ppg.n_update, 4);
    }

    #[test]
    fn zero_users_is_rejected() {
        let err = parse_config("num_users = 0").unwrap_err();
        match err {
            ConfigError::Invalid(vs) => {
                assert!(vs.iter().any(|v| v.message == "num_users must be ≥ 1"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn negative_power_coeff_names_the_field() {
        let mut cfg = SystemConfig::default();
        cfg.channels[0].tx_power_coeff_mw_per_mbps = -1.0;
        let vs = validate(&cfg);
        assert!(vs.iter().any(|v| v.field == "channels[0].tx_power_coeff"));
    }

    #[test]
    fn default_config_validates_clean() {
        assert!(validate(&SystemConfig::default()).is_empty());
    }

    #[test]
    fn history_window_mismatch_reports_dimension() {
        let mut cfg = SystemConfig::default();
        cfg.history_window = 5;
        let vs = validate(&cfg);
        let hit = vs.iter().find(|v| v.field == "history_window").unwrap();
        assert_eq!(
            hit.message,
            "observation dim 18 ≠ 15; set observation_dim accordingly or H=4"
        );
        // Declaring the larger dimension resolves it.
        cfg.observation_dim = 18;
        assert!(validate(&cfg).is_empty());
    }

    #[test]
    fn channel_count_mismatch_is_a_violation() {
        let mut cfg = SystemConfig::default();
        cfg.channels.pop();
        let vs = validate(&cfg);
        assert!(vs.iter().any(|v| v.field == "channels"));
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = SystemConfig::default();
        let text = to_toml(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn load_config_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "num_users = 4\n").unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.num_users, 4);
        assert_eq!(cfg.num_channels, 3);

        std::fs::write(&p, "num_users = [3]\n").unwrap();
        assert!(matches!(load_config(&p), Err(ConfigError::Parse(_))));
    }
}
