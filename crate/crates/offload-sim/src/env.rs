//! Multi-user offloading environment.
//!
//! Steps are synchronized decision epochs of one segment duration. Every user
//! holds exactly one pending task; a joint action maps each task to local
//! compute or to one of the C channels. Offloaded tasks upload from the epoch
//! start, contend for the MEC processor under egalitarian processor sharing,
//! and download their results afterwards. Tasks that overrun the epoch still
//! run to completion and report their true response time, so deadline
//! violations stay measurable.
//!
//! Rewards have no temporal dependency: a step's reward is a pure function of
//! that step's tasks, actions, and trace windows (MEC contention couples users
//! within the step only). That is what licenses the gamma = 0 bandit reduction
//! in the agents.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Action, SystemConfig, Task, TraceSource};
use crate::stream_rng;
use crate::traces::{
    load_trace, sample_task, solve_tx_end, synthesize_trace, Direction, ThroughputTrace,
    TraceError,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("nonpositive input to {0}")]
    NonPositive(&'static str),
    #[error("joint action has {got} entries, expected {expected}")]
    WrongActionCount { expected: usize, got: usize },
    #[error("user {user}: action {action} out of range (max {max})")]
    ActionOutOfRange {
        user: usize,
        action: usize,
        max: usize,
    },
    #[error("episode already terminated; call reset")]
    Terminated,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Task computation time `(S * I) / (Z * I_ref)` in seconds.
///
/// `Z` is a computation speed in bits/s and `I_ref` the reference intensity
/// that normalizes it: a mean-intensity task of S bits takes S/Z seconds.
pub fn exec_time(
    size_bits: f64,
    intensity: f64,
    speed_bps: f64,
    reference_intensity: f64,
) -> Result<f64, EnvError> {
    if size_bits <= 0.0 || intensity <= 0.0 || speed_bps <= 0.0 || reference_intensity <= 0.0 {
        return Err(EnvError::NonPositive("exec_time"));
    }
    Ok((size_bits * intensity) / (speed_bps * reference_intensity))
}

/// Local CPU energy `kappa * S * I * f^2` in Joules.
pub fn local_energy(
    size_bits: f64,
    intensity: f64,
    cpu_freq_hz: f64,
    capacitance: f64,
) -> Result<f64, EnvError> {
    if size_bits <= 0.0 || intensity <= 0.0 || cpu_freq_hz <= 0.0 || capacitance <= 0.0 {
        return Err(EnvError::NonPositive("local_energy"));
    }
    Ok(capacitance * size_bits * intensity * cpu_freq_hz * cpu_freq_hz)
}

/// Radio energy: transfer duration times the rate-proportional power draw
/// `coeff(mW/Mbps) * rate(Mbps)`.
///
/// Because power is proportional to the realized average rate, this works out
/// to `coeff * payload_bits * 1e-9` Joules exactly whenever
/// `tx_time * avg_rate == payload`.
pub fn comm_energy(
    payload_bits: f64,
    coeff_mw_per_mbps: f64,
    tx_time_s: f64,
    avg_rate_bps: f64,
) -> f64 {
    if payload_bits <= 0.0 {
        return 0.0;
    }
    let power_w = coeff_mw_per_mbps * (avg_rate_bps / 1e6) * 1e-3;
    tx_time_s * power_w
}

/// Per-user reward: normalized energy-efficiency plus the deadline term
/// `lambda * (T_d - T_r)`.
pub fn reward(
    size_bits: f64,
    response_time_s: f64,
    energy_j: f64,
    deadline_s: f64,
    lambda: f64,
    efficiency_scale: f64,
) -> f64 {
    size_bits / (response_time_s * energy_j) / efficiency_scale
        + lambda * (deadline_s - response_time_s)
}

/// One offloaded task's demand on the MEC processor.
#[derive(Debug, Clone, Copy)]
pub struct MecJob {
    pub user: usize,
    /// Arrival at the MEC, relative to the epoch start (uplink completion).
    pub arrival_s: f64,
    /// Work in reference-intensity bits: `S * I / I_ref`.
    pub work_bits: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MecCompletion {
    pub user: usize,
    pub arrival_s: f64,
    pub departure_s: f64,
    /// Time-averaged service speed over the job's stay.
    pub avg_share_bps: f64,
}

#[derive(Debug, Clone)]
pub struct MecSchedule {
    /// Sorted by user id.
    pub completions: Vec<MecCompletion>,
    /// `(instant, active jobs)` after every arrival/departure event; between
    /// consecutive instants each active job receives `capacity / active`.
    pub events: Vec<(f64, usize)>,
}

/// Egalitarian processor sharing of `capacity_bps` among jobs, recomputed
/// event-by-event as jobs arrive and depart.
///
/// At every instant the active jobs split the capacity equally, so the summed
/// share never exceeds the capacity. Between events all active jobs drain at
/// the same rate; the next departure is the minimum remaining work, inverted
/// in closed form, so completion times are exact.
pub fn mec_schedule(jobs: &[MecJob], capacity_bps: f64) -> MecSchedule {
    assert!(capacity_bps > 0.0, "MEC capacity must be positive");
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by(|&a, &b| jobs[a].arrival_s.partial_cmp(&jobs[b].arrival_s).unwrap());

    let mut completions: Vec<MecCompletion> = Vec::with_capacity(jobs.len());
    let mut events: Vec<(f64, usize)> = Vec::new();
    let mut active: Vec<(usize, f64)> = Vec::new(); // (job index, remaining work)
    let mut next_arrival = 0usize;
    let mut now = match order.first() {
        Some(&i) => jobs[i].arrival_s,
        None => {
            return MecSchedule {
                completions,
                events,
            }
        }
    };

    while next_arrival < order.len() || !active.is_empty() {
        while next_arrival < order.len() && jobs[order[next_arrival]].arrival_s <= now {
            let idx = order[next_arrival];
            active.push((idx, jobs[idx].work_bits.max(0.0)));
            next_arrival += 1;
        }
        events.push((now, active.len()));
        if active.is_empty() {
            now = jobs[order[next_arrival]].arrival_s;
            continue;
        }
        let n = active.len() as f64;
        let per_job_rate = capacity_bps / n;
        let min_rem = active.iter().map(|&(_, r)| r).fold(f64::INFINITY, f64::min);
        let dt_depart = min_rem / per_job_rate;
        let dt_arrive = order
            .get(next_arrival)
            .map(|&i| jobs[i].arrival_s - now)
            .unwrap_or(f64::INFINITY);
        let dt = dt_depart.min(dt_arrive);
        let drained = per_job_rate * dt;
        now += dt;
        let mut i = 0;
        while i < active.len() {
            active[i].1 -= drained;
            // The minimum-remaining job lands exactly on zero up to rounding.
            if active[i].1 <= 1e-9 * drained {
                let (idx, _) = active.remove(i);
                let job = &jobs[idx];
                let service = now - job.arrival_s;
                completions.push(MecCompletion {
                    user: job.user,
                    arrival_s: job.arrival_s,
                    departure_s: now,
                    avg_share_bps: if service > 0.0 {
                        job.work_bits / service
                    } else {
                        capacity_bps
                    },
                });
            } else {
                i += 1;
            }
        }
    }
    events.push((now, 0));
    completions.sort_by_key(|c| c.user);
    MecSchedule {
        completions,
        events,
    }
}

/// Per-user feature vectors, row-major over the K users.
///
/// Layout per user: `[size, intensity, deadline, H tx times, H response
/// times, H energies]`, histories most-recent-first and zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    features: Vec<f64>,
    num_users: usize,
    dim: usize,
}

impl Observation {
    pub fn user(&self, k: usize) -> &[f64] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    /// Flattened K x dim matrix.
    pub fn flat(&self) -> &[f64] {
        &self.features
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// One decision's full outcome, persisted for training and metrics.
/// CSV field order matches declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub user: usize,
    pub action: usize,
    pub size_bits: f64,
    pub quality_layer: u8,
    pub tx_time_s: f64,
    pub response_time_s: f64,
    pub energy_j: f64,
    pub reward: f64,
    pub deadline_slack_s: f64,
    pub mec_share_bps: f64,
}

#[derive(Debug, Clone)]
struct UserHistory {
    tx_times: Vec<f64>,
    response_times: Vec<f64>,
    energies: Vec<f64>,
}

impl UserHistory {
    fn zeroed(h: usize) -> Self {
        Self {
            tx_times: vec![0.0; h],
            response_times: vec![0.0; h],
            energies: vec![0.0; h],
        }
    }

    /// Most-recent-first shift-in.
    fn push(&mut self, tx: f64, resp: f64, energy: f64) {
        for (buf, v) in [
            (&mut self.tx_times, tx),
            (&mut self.response_times, resp),
            (&mut self.energies, energy),
        ] {
            buf.rotate_right(1);
            buf[0] = v;
        }
    }
}

pub struct StepOutcome {
    pub observation: Observation,
    pub rewards: Vec<f64>,
    pub records: Vec<StepRecord>,
    pub done: bool,
}

/// The environment. `(config, seed)` fully determines every trajectory given
/// the action sequence. Traces are built once from the config seed (they play
/// the role of the recorded dataset); `reset` re-randomizes trace offsets and
/// task streams from the episode seed.
pub struct Env {
    cfg: SystemConfig,
    i_ref: f64,
    uplinks: Vec<ThroughputTrace>,
    downlinks: Vec<ThroughputTrace>,
    ul_offsets: Vec<f64>,
    dl_offsets: Vec<f64>,
    step_idx: usize,
    tasks: Vec<Task>,
    histories: Vec<UserHistory>,
    lambdas: Vec<f64>,
    task_rngs: Vec<ChaCha12Rng>,
    done: bool,
}

impl Env {
    pub fn new(cfg: &SystemConfig) -> Result<Self, EnvError> {
        let i_ref = cfg.reference_intensity();
        let mut uplinks = Vec::with_capacity(cfg.num_channels);
        let mut downlinks = Vec::with_capacity(cfg.num_channels);
        for (ci, ch) in cfg.channels.iter().enumerate() {
            for (direction, src) in [
                (Direction::Uplink, &ch.uplink),
                (Direction::Downlink, &ch.downlink),
            ] {
                let trace = match src {
                    TraceSource::File { path } => load_trace(path.as_ref(), direction)?,
                    TraceSource::Synthetic(spec) => {
                        let stream = 0x7452_0000
                            + 2 * ci as u64
                            + u64::from(direction == Direction::Downlink);
                        let mut rng = stream_rng(cfg.seed, stream);
                        synthesize_trace(spec, cfg.synth_trace_duration_s, direction, &mut rng)
                    }
                };
                match direction {
                    Direction::Uplink => uplinks.push(trace),
                    Direction::Downlink => downlinks.push(trace),
                }
            }
        }
        let mut env = Self {
            cfg: cfg.clone(),
            i_ref,
            uplinks,
            downlinks,
            ul_offsets: vec![0.0; cfg.num_channels],
            dl_offsets: vec![0.0; cfg.num_channels],
            step_idx: 0,
            tasks: Vec::new(),
            histories: Vec::new(),
            lambdas: vec![cfg.lambda_init; cfg.num_users],
            task_rngs: Vec::new(),
            done: false,
        };
        env.reset(cfg.seed);
        Ok(env)
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn reference_intensity(&self) -> f64 {
        self.i_ref
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Installs the per-user deadline coefficients used by subsequent
    /// rewards (agents snapshot theirs at each update window).
    pub fn set_lambdas(&mut self, lambdas: &[f64]) {
        assert_eq!(lambdas.len(), self.cfg.num_users);
        self.lambdas.copy_from_slice(lambdas);
    }

    /// Restarts the episode: fresh tasks, zeroed histories, trace offsets
    /// re-randomized from `seed`.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let k = self.cfg.num_users;
        let mut offset_rng = stream_rng(seed, 0x0ff5);
        for c in 0..self.cfg.num_channels {
            self.ul_offsets[c] = offset_rng.gen::<f64>() * self.uplinks[c].duration_s();
            self.dl_offsets[c] = offset_rng.gen::<f64>() * self.downlinks[c].duration_s();
        }
        self.task_rngs = (0..k)
            .map(|u| stream_rng(seed, 0x7a53_0000 + u as u64))
            .collect();
        self.tasks = self
            .task_rngs
            .iter_mut()
            .map(|rng| sample_task(&self.cfg.task_gen, rng))
            .collect();
        self.histories = (0..k)
            .map(|_| UserHistory::zeroed(self.cfg.history_window))
            .collect();
        self.step_idx = 0;
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        let k = self.cfg.num_users;
        let dim = self.cfg.observation_dim;
        let mut features = Vec::with_capacity(k * dim);
        for u in 0..k {
            let t = &self.tasks[u];
            let h = &self.histories[u];
            features.push(t.size_bits);
            features.push(t.intensity_cycles_per_bit);
            features.push(t.deadline_s);
            features.extend_from_slice(&h.tx_times);
            features.extend_from_slice(&h.response_times);
            features.extend_from_slice(&h.energies);
        }
        Observation {
            features,
            num_users: k,
            dim,
        }
    }

    pub fn current_tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Replaces the pending tasks (what-if runs and oracle setups).
    pub fn set_tasks(&mut self, tasks: Vec<Task>) {
        assert_eq!(tasks.len(), self.cfg.num_users);
        self.tasks = tasks;
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step_index(&self) -> usize {
        self.step_idx
    }

    fn check_actions(&self, joint: &[Action]) -> Result<(), EnvError> {
        if joint.len() != self.cfg.num_users {
            return Err(EnvError::WrongActionCount {
                expected: self.cfg.num_users,
                got: joint.len(),
            });
        }
        for (u, a) in joint.iter().enumerate() {
            if a.0 > self.cfg.num_channels {
                return Err(EnvError::ActionOutOfRange {
                    user: u,
                    action: a.0,
                    max: self.cfg.num_channels,
                });
            }
        }
        Ok(())
    }

    /// Recent average uplink rate of each channel over the previous epoch's
    /// window (the current window at step 0). Drives rate-aware baselines.
    pub fn recent_uplink_rates(&self) -> Vec<f64> {
        let dt = self.cfg.step_duration_s;
        let t1 = self.step_idx as f64 * dt;
        let t0 = (t1 - dt).max(0.0);
        let (a, b) = if t1 > t0 { (t0, t1) } else { (0.0, dt) };
        (0..self.cfg.num_channels)
            .map(|c| {
                let off = self.ul_offsets[c];
                crate::traces::avg_rate(&self.uplinks[c], off + a, off + b).unwrap_or(0.0)
            })
            .collect()
    }

    /// Outcomes the current joint action would produce, without advancing
    /// state. This is the whole step computation; `step` applies it and then
    /// mutates.
    pub fn evaluate_joint(&self, joint: &[Action]) -> Result<Vec<StepRecord>, EnvError> {
        self.check_actions(joint)?;
        let cfg = &self.cfg;
        let epoch_start = self.step_idx as f64 * cfg.step_duration_s;
        let mut records: Vec<StepRecord> = Vec::with_capacity(cfg.num_users);
        let mut jobs: Vec<MecJob> = Vec::new();
        // Uplink legs first; MEC contention couples the users.
        let mut uplink: Vec<Option<(f64, f64)>> = vec![None; cfg.num_users]; // (tx_time, tx_energy)
        for (u, action) in joint.iter().enumerate() {
            let task = &self.tasks[u];
            if let Some(c) = action.channel_index() {
                let t0 = self.ul_offsets[c] + epoch_start;
                let tx_end = solve_tx_end(&self.uplinks[c], t0, task.size_bits)?;
                let tx_time = tx_end - t0;
                let rate = task.size_bits / tx_time;
                let e_tx = comm_energy(
                    task.size_bits,
                    cfg.channels[c].tx_power_coeff_mw_per_mbps,
                    tx_time,
                    rate,
                );
                uplink[u] = Some((tx_time, e_tx));
                jobs.push(MecJob {
                    user: u,
                    arrival_s: tx_time,
                    work_bits: task.size_bits * task.intensity_cycles_per_bit / self.i_ref,
                });
            }
        }
        let schedule = mec_schedule(&jobs, cfg.compute.mec_total_speed_bps);
        let mut departures: Vec<Option<MecCompletion>> = vec![None; cfg.num_users];
        for comp in schedule.completions {
            departures[comp.user] = Some(comp);
        }

        for (u, action) in joint.iter().enumerate() {
            let task = &self.tasks[u];
            let (tx_time, response_time, energy, mec_share) = if action.is_local() {
                let t = exec_time(
                    task.size_bits,
                    task.intensity_cycles_per_bit,
                    cfg.compute.user_speed_bps,
                    self.i_ref,
                )?;
                let e = local_energy(
                    task.size_bits,
                    task.intensity_cycles_per_bit,
                    cfg.compute.user_cpu_freq_hz,
                    cfg.compute.cpu_capacitance,
                )?;
                (0.0, t, e, 0.0)
            } else {
                let c = action.channel_index().unwrap();
                let (tx_time, e_tx) = uplink[u].unwrap();
                let comp = departures[u].as_ref().expect("offloaded job scheduled");
                let (rx_time, e_rx) = if task.result_size_bits > 0.0 {
                    let dl_start = self.dl_offsets[c] + epoch_start + comp.departure_s;
                    let rx_end =
                        solve_tx_end(&self.downlinks[c], dl_start, task.result_size_bits)?;
                    let rx_time = rx_end - dl_start;
                    let rate = task.result_size_bits / rx_time;
                    let e_rx = comm_energy(
                        task.result_size_bits,
                        cfg.channels[c].rx_coeff(),
                        rx_time,
                        rate,
                    );
                    (rx_time, e_rx)
                } else {
                    (0.0, 0.0)
                };
                (
                    tx_time,
                    comp.departure_s + rx_time,
                    e_tx + e_rx,
                    comp.avg_share_bps,
                )
            };
            let r = reward(
                task.size_bits,
                response_time,
                energy,
                task.deadline_s,
                self.lambdas[u],
                cfg.reward_scale,
            );
            records.push(StepRecord {
                step: self.step_idx,
                user: u,
                action: action.0,
                size_bits: task.size_bits,
                quality_layer: task.quality_layer,
                tx_time_s: tx_time,
                response_time_s: response_time,
                energy_j: energy,
                reward: r,
                deadline_slack_s: task.deadline_s - response_time,
                mec_share_bps: mec_share,
            });
        }
        Ok(records)
    }

    /// Rewards the current joint action would earn; used by the exhaustive
    /// oracle (valid because rewards carry no cross-step dependency).
    pub fn peek_rewards(&self, joint: &[Action]) -> Result<Vec<f64>, EnvError> {
        Ok(self
            .evaluate_joint(joint)?
            .iter()
            .map(|r| r.reward)
            .collect())
    }

    pub fn step(&mut self, joint: &[Action]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        let records = self.evaluate_joint(joint)?;
        for rec in &records {
            self.histories[rec.user].push(rec.tx_time_s, rec.response_time_s, rec.energy_j);
        }
        self.tasks = self
            .task_rngs
            .iter_mut()
            .map(|rng| sample_task(&self.cfg.task_gen, rng))
            .collect();
        self.step_idx += 1;
        self.done = self.step_idx >= self.cfg.episode_len;
        Ok(StepOutcome {
            observation: self.observation(),
            rewards: records.iter().map(|r| r.reward).collect(),
            records,
            done: self.done,
        })
    }
}
