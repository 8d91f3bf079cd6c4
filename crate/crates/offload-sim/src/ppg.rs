//! Phasic policy gradient agents.
//!
//! Two deployments share this module: CPPG, a single centralized actor-critic
//! observing all K users and emitting a joint action, and IPPG, a
//! parameter-shared per-user actor-critic sampled independently for each
//! user. Training runs in three phases per update round: a dual-clip PPO
//! policy phase on minibatches, an auxiliary phase (behavioral-cloning KL
//! plus an auxiliary value regression on the actor, value regression on the
//! critic) over the whole buffer, and a sub-gradient phase on the per-user
//! deadline coefficients. The replay buffer holds exactly one update window
//! of episodes and is cleared after every round.
//!
//! Rewards carry no temporal dependency (see `env`), so value targets are
//! the immediate rewards and the advantage is `r - V(s)`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Action, PpgHyper, SystemConfig};
use crate::env::{Env, EnvError, Observation, StepRecord};
use crate::nn::{
    checkpoint::{self, CheckpointTensor},
    softmax_entropy, Activation, Adam, Network, NetworkSpec, NnError,
};
use crate::stream_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged: {0}")]
    Diverged(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpgKind {
    Cppg,
    Ippg,
}

impl PpgKind {
    pub fn name(self) -> &'static str {
        match self {
            PpgKind::Cppg => "cppg",
            PpgKind::Ippg => "ippg",
        }
    }
}

/// Advantage with gamma fixed at zero: changing V(s') can never matter.
pub fn advantage(reward: f64, value: f64) -> f64 {
    reward - value
}

/// Single-clip surrogate term `min(rho * A, clip(rho, 1 +- eps) * A)`.
pub fn clip_loss(rho: f64, adv: f64, eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    (rho * adv).min(clipped * adv)
}

/// Dual-clip term: on negative advantages the surrogate is floored at
/// `c * A` to bound destructive updates; elsewhere it is the single clip.
pub fn dual_clip_loss(rho: f64, adv: f64, eps: f64, c: f64) -> f64 {
    let t = clip_loss(rho, adv, eps);
    if adv < 0.0 {
        t.max(c * adv)
    } else {
        t
    }
}

/// d(dual_clip)/d(rho), consistent with the branch choices of
/// `dual_clip_loss` (ties resolve toward the unclipped branch).
fn dual_clip_grad_rho(rho: f64, adv: f64, eps: f64, c: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    let t1 = rho * adv;
    let t2 = clipped * adv;
    let min_grad = if t1 <= t2 {
        adv
    } else if rho > 1.0 - eps && rho < 1.0 + eps {
        adv
    } else {
        0.0
    };
    if adv < 0.0 && t1.min(t2) < c * adv {
        0.0
    } else {
        min_grad
    }
}

/// Mean of half squared errors.
pub fn value_loss(pred: &[f64], targ: &[f64]) -> f64 {
    assert_eq!(pred.len(), targ.len());
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(targ)
        .map(|(p, t)| 0.5 * (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Exact categorical KL(p_old || p_new) over the action set.
pub fn categorical_kl(p_old: &[f64], p_new: &[f64]) -> f64 {
    assert_eq!(p_old.len(), p_new.len());
    let mut kl = 0.0;
    for (&po, &pn) in p_old.iter().zip(p_new) {
        if po > 0.0 {
            kl += po * (po.ln() - pn.max(1e-300).ln());
        }
    }
    kl
}

/// Behavioral-cloning KL summed over users plus the auxiliary value
/// regression; `old`/`new` are per-user action distributions.
pub fn joint_aux_loss(old: &[Vec<f64>], new: &[Vec<f64>], v_aux: &[f64], v_targ: &[f64]) -> f64 {
    assert_eq!(old.len(), new.len());
    let kl: f64 = old.iter().zip(new).map(|(o, n)| categorical_kl(o, n)).sum();
    kl + value_loss(v_aux, v_targ)
}

/// Per-user deadline coefficients adapted by sub-gradient steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeadlineCoeffs {
    pub lambda: Vec<f64>,
    pub lr: f64,
}

impl DeadlineCoeffs {
    pub fn new(num_users: usize, init: f64, lr: f64) -> Self {
        Self {
            lambda: vec![init; num_users],
            lr,
        }
    }
}

/// One sub-gradient step on every user's coefficient from that user's mean
/// deadline slack: lambda grows while tasks miss their deadlines and decays
/// (projected at zero) while they meet them.
pub fn lambda_phase(coeffs: &mut DeadlineCoeffs, mean_slack_per_user: &[f64]) {
    assert_eq!(coeffs.lambda.len(), mean_slack_per_user.len());
    for (l, &slack) in coeffs.lambda.iter_mut().zip(mean_slack_per_user) {
        *l = (*l - coeffs.lr * slack).max(0.0);
    }
}

/// Fixed feature scaling applied before the networks. Derived from the
/// config once so checkpoints evaluate identically anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsScale {
    pub size: f64,
    pub intensity: f64,
    pub time: f64,
    pub energy: f64,
}

impl ObsScale {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let tg = &cfg.task_gen;
        let wsum: f64 = tg.layer_weights.iter().sum();
        let mean_size: f64 = tg
            .layer_size_mean_bits
            .iter()
            .zip(&tg.layer_weights)
            .map(|(m, w)| m * w)
            .sum::<f64>()
            / wsum;
        let mean_local_energy = cfg.compute.cpu_capacitance
            * mean_size
            * tg.intensity.mean_cpb
            * cfg.compute.user_cpu_freq_hz
            * cfg.compute.user_cpu_freq_hz;
        Self {
            size: mean_size,
            intensity: tg.intensity.mean_cpb,
            time: tg.deadline_s,
            energy: mean_local_energy.max(1e-12),
        }
    }

    /// Scales one user's raw feature block in place.
    fn apply(&self, user_features: &mut [f64], history: usize) {
        user_features[0] /= self.size;
        user_features[1] /= self.intensity;
        user_features[2] /= self.time;
        for v in &mut user_features[3..3 + 2 * history] {
            *v /= self.time;
        }
        for v in &mut user_features[3 + 2 * history..3 + 3 * history] {
            *v /= self.energy;
        }
    }

    pub fn scale_observation(&self, obs: &Observation, history: usize) -> Vec<f64> {
        let mut out = obs.flat().to_vec();
        let dim = obs.dim();
        for k in 0..obs.num_users() {
            self.apply(&mut out[k * dim..(k + 1) * dim], history);
        }
        out
    }
}

/// One stored decision. CPPG keeps one joint transition per step (slots =
/// users); IPPG appends one single-slot transition per user per step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub users: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Action distributions at collection time, `[slot, num_actions]`.
    pub old_probs: Vec<f64>,
    /// Deadline slack per slot, feeding the coefficient phase.
    pub slacks: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ReplayBuffer {
    pub transitions: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }
}

/// Diagnostics for one training episode (one CSV row).
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_response_time_s: f64,
    pub mean_energy_j: f64,
    pub violation_rate: f64,
    pub mean_entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub aux_kl: f64,
    pub aux_value_loss: f64,
    pub lambda_mean: f64,
    pub lambda_max: f64,
}

struct RoundStats {
    policy_loss: f64,
    value_loss: f64,
    aux_kl: f64,
    aux_value: f64,
}

pub struct PpgAgent {
    pub kind: PpgKind,
    pub hyper: PpgHyper,
    pub actor: Network,
    pub critic: Network,
    pub coeffs: DeadlineCoeffs,
    pub obs_scale: ObsScale,
    num_users: usize,
    num_actions: usize,
    obs_dim: usize,
    history: usize,
    actor_opt: Adam,
    critic_opt: Adam,
    policy_head: usize,
    aux_head: usize,
    value_head: usize,
}

impl PpgAgent {
    pub fn new(kind: PpgKind, cfg: &SystemConfig, seed: u64) -> Result<Self, TrainError> {
        let k = cfg.num_users;
        let a = cfg.num_actions();
        let dim = cfg.observation_dim;
        let hid = cfg.ppg.hidden;
        let (actor_spec, critic_spec) = match kind {
            // Centralized nets see the full K x dim state: per-user feature
            // mixing via kernel-1 conv, then a dense layer over all users,
            // so the heads depend on every user's state.
            PpgKind::Cppg => (
                NetworkSpec::new(k, dim)
                    .conv1d(hid, 1, Activation::Relu)
                    .dense(hid, Activation::Relu)
                    .head("policy", k * a)
                    .head("aux", k),
                NetworkSpec::new(k, dim)
                    .conv1d(hid, 1, Activation::Relu)
                    .dense(hid, Activation::Relu)
                    .head("value", k),
            ),
            // Per-user nets; one parameter set shared by all users.
            PpgKind::Ippg => (
                NetworkSpec::new(1, dim)
                    .dense(hid, Activation::Relu)
                    .dense(hid, Activation::Relu)
                    .head("policy", a)
                    .head("aux", 1),
                NetworkSpec::new(1, dim)
                    .dense(hid, Activation::Relu)
                    .dense(hid, Activation::Relu)
                    .head("value", 1),
            ),
        };
        let actor = Network::new(actor_spec, seed ^ 0xac10)?;
        let critic = Network::new(critic_spec, seed ^ 0xc217)?;
        let actor_opt = Adam::new(&actor, cfg.ppg.learning_rate);
        let critic_opt = Adam::new(&critic, cfg.ppg.learning_rate);
        let policy_head = actor.head_index("policy").unwrap();
        let aux_head = actor.head_index("aux").unwrap();
        let value_head = critic.head_index("value").unwrap();
        Ok(Self {
            kind,
            hyper: cfg.ppg.clone(),
            actor,
            critic,
            coeffs: DeadlineCoeffs::new(k, cfg.lambda_init, cfg.ppg.lambda_lr),
            obs_scale: ObsScale::from_config(cfg),
            num_users: k,
            num_actions: a,
            obs_dim: dim,
            history: cfg.history_window,
            actor_opt,
            critic_opt,
            policy_head,
            aux_head,
            value_head,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Slots per stored transition: CPPG batches all users jointly.
    fn slots(&self) -> usize {
        match self.kind {
            PpgKind::Cppg => self.num_users,
            PpgKind::Ippg => 1,
        }
    }

    fn scaled(&self, obs: &Observation) -> Vec<f64> {
        self.obs_scale.scale_observation(obs, self.history)
    }

    /// Per-user action distributions for the current observation.
    ///
    /// The IPPG actor observes one user at a time; stacking the K rows as a
    /// batch is the same computation.
    pub fn policy_probs(&self, obs: &Observation) -> Result<Vec<Vec<f64>>, TrainError> {
        let scaled = self.scaled(obs);
        let a = self.num_actions;
        let logits: Vec<f64> = match self.kind {
            PpgKind::Cppg => self.actor.forward(&scaled, 1)?.head(self.policy_head).to_vec(),
            PpgKind::Ippg => self
                .actor
                .forward(&scaled, self.num_users)?
                .head(self.policy_head)
                .to_vec(),
        };
        Ok((0..self.num_users)
            .map(|k| softmax_entropy(&logits[k * a..(k + 1) * a]).0)
            .collect())
    }

    /// Samples a joint action; returns per-user log-probabilities and the
    /// full distributions (stored for the ratio and KL terms).
    pub fn act(
        &self,
        obs: &Observation,
        rng: &mut ChaCha12Rng,
    ) -> Result<(Vec<Action>, Vec<f64>, Vec<Vec<f64>>), TrainError> {
        let probs = self.policy_probs(obs)?;
        let mut actions = Vec::with_capacity(self.num_users);
        let mut logps = Vec::with_capacity(self.num_users);
        for p in &probs {
            let dist = WeightedIndex::new(p).expect("valid distribution");
            let a = dist.sample(rng);
            actions.push(Action(a));
            logps.push(p[a].max(1e-300).ln());
        }
        Ok((actions, logps, probs))
    }

    /// Deterministic evaluation policy: per-user argmax, ties to the lowest
    /// action index.
    pub fn greedy(&self, obs: &Observation) -> Result<Vec<Action>, TrainError> {
        let probs = self.policy_probs(obs)?;
        Ok(probs
            .iter()
            .map(|p| {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                Action(best)
            })
            .collect())
    }

    /// Mean per-user policy entropy at an observation.
    pub fn mean_entropy(&self, obs: &Observation) -> Result<f64, TrainError> {
        let probs = self.policy_probs(obs)?;
        let h: f64 = probs
            .iter()
            .map(|p| {
                -p.iter()
                    .filter(|&&x| x > 0.0)
                    .map(|x| x * x.ln())
                    .sum::<f64>()
            })
            .sum();
        Ok(h / probs.len() as f64)
    }

    fn push_transitions(
        &self,
        buf: &mut ReplayBuffer,
        scaled_obs: &[f64],
        actions: &[Action],
        probs: &[Vec<f64>],
        records: &[StepRecord],
    ) {
        match self.kind {
            PpgKind::Cppg => {
                buf.transitions.push(Transition {
                    obs: scaled_obs.to_vec(),
                    users: (0..self.num_users).collect(),
                    actions: actions.iter().map(|a| a.0).collect(),
                    rewards: records.iter().map(|r| r.reward).collect(),
                    old_probs: probs.iter().flatten().copied().collect(),
                    slacks: records.iter().map(|r| r.deadline_slack_s).collect(),
                });
            }
            PpgKind::Ippg => {
                for k in 0..self.num_users {
                    buf.transitions.push(Transition {
                        obs: scaled_obs[k * self.obs_dim..(k + 1) * self.obs_dim].to_vec(),
                        users: vec![k],
                        actions: vec![actions[k].0],
                        rewards: vec![records[k].reward],
                        old_probs: probs[k].clone(),
                        slacks: vec![records[k].deadline_slack_s],
                    });
                }
            }
        }
    }

    /// Recomputed probability ratios against the stored distributions;
    /// exactly one for every slot right after a sync.
    pub fn ratios(&self, buf: &ReplayBuffer) -> Result<Vec<f64>, TrainError> {
        let slots = self.slots();
        let a = self.num_actions;
        let mut out = Vec::new();
        for tr in &buf.transitions {
            let pass = self.actor.forward(&tr.obs, 1)?;
            let logits = pass.head(self.policy_head);
            for s in 0..slots {
                let (p, _) = softmax_entropy(&logits[s * a..(s + 1) * a]);
                let act = tr.actions[s];
                out.push(p[act] / tr.old_probs[s * a + act].max(1e-300));
            }
        }
        Ok(out)
    }

    /// Frozen state values for every transition (one critic pass).
    fn buffer_values(&self, buf: &ReplayBuffer) -> Result<Vec<f64>, TrainError> {
        let n = buf.len();
        let obs_len = buf.transitions[0].obs.len();
        let mut flat = Vec::with_capacity(n * obs_len);
        for tr in &buf.transitions {
            flat.extend_from_slice(&tr.obs);
        }
        let pass = self.critic.forward(&flat, n)?;
        Ok(pass.head(self.value_head).to_vec())
    }

    /// Dual-clip policy objective loss (minimized: `-surrogate - beta H`)
    /// on a batch. With `with_grads` the actor's parameter gradients are
    /// populated (replacing its current ones).
    pub fn policy_loss(
        &mut self,
        buf: &ReplayBuffer,
        advantages: &[f64],
        idxs: &[usize],
        with_grads: bool,
    ) -> Result<f64, TrainError> {
        let slots = self.slots();
        let a = self.num_actions;
        let b = idxs.len();
        let obs_len = buf.transitions[0].obs.len();
        let mut flat = Vec::with_capacity(b * obs_len);
        for &i in idxs {
            flat.extend_from_slice(&buf.transitions[i].obs);
        }
        let actor_pass = self.actor.forward(&flat, b)?;
        let logits = actor_pass.head(self.policy_head);

        let eps = self.hyper.clip_epsilon;
        let c = self.hyper.dual_clip;
        let beta = self.hyper.entropy_weight;
        let denom = (b * slots) as f64;

        let mut policy_grad = vec![0.0; b * slots * a];
        let mut obj_sum = 0.0;
        for (row, &i) in idxs.iter().enumerate() {
            let tr = &buf.transitions[i];
            for s in 0..slots {
                let lo = (row * slots + s) * a;
                let (probs, entropy) = softmax_entropy(&logits[lo..lo + a]);
                let act = tr.actions[s];
                let p_old = tr.old_probs[s * a + act].max(1e-300);
                let rho = probs[act].max(1e-300) / p_old;
                let adv = advantages[i * slots + s];
                obj_sum += dual_clip_loss(rho, adv, eps, c) + beta * entropy;
                if with_grads {
                    // Minimize -objective: chain through rho and the entropy.
                    let dobj_drho = dual_clip_grad_rho(rho, adv, eps, c);
                    for j in 0..a {
                        let indicator = if j == act { 1.0 } else { 0.0 };
                        let drho = rho * (indicator - probs[j]);
                        let dent = -probs[j] * (probs[j].max(1e-300).ln() + entropy);
                        policy_grad[lo + j] = -(dobj_drho * drho + beta * dent) / denom;
                    }
                }
            }
        }
        if with_grads {
            self.actor.zero_grad();
            let empty: &[f64] = &[];
            let mut head_grads: Vec<&[f64]> = vec![empty; self.actor.num_heads()];
            head_grads[self.policy_head] = &policy_grad;
            self.actor.backward(&actor_pass, &head_grads)?;
        }
        Ok(-(obj_sum / denom))
    }

    /// Critic regression loss toward the gamma=0 targets on a batch;
    /// populates the critic's gradients when asked.
    pub fn critic_loss(
        &mut self,
        buf: &ReplayBuffer,
        idxs: &[usize],
        with_grads: bool,
    ) -> Result<f64, TrainError> {
        let slots = self.slots();
        let b = idxs.len();
        let obs_len = buf.transitions[0].obs.len();
        let mut flat = Vec::with_capacity(b * obs_len);
        for &i in idxs {
            flat.extend_from_slice(&buf.transitions[i].obs);
        }
        let critic_pass = self.critic.forward(&flat, b)?;
        let values = critic_pass.head(self.value_head);
        let denom = (b * slots) as f64;
        let mut value_grad = vec![0.0; b * slots];
        let mut vloss_sum = 0.0;
        for (row, &i) in idxs.iter().enumerate() {
            let tr = &buf.transitions[i];
            for s in 0..slots {
                let v = values[row * slots + s];
                let targ = tr.rewards[s];
                vloss_sum += 0.5 * (v - targ) * (v - targ);
                value_grad[row * slots + s] = (v - targ) / denom;
            }
        }
        if with_grads {
            self.critic.zero_grad();
            let empty: &[f64] = &[];
            let mut cgrads: Vec<&[f64]> = vec![empty; self.critic.num_heads()];
            cgrads[self.value_head] = &value_grad;
            self.critic.backward(&critic_pass, &cgrads)?;
        }
        Ok(vloss_sum / denom)
    }

    /// Joint auxiliary loss on the full buffer: behavioral-cloning KL toward
    /// the stored distributions plus the auxiliary value regression, both on
    /// the actor. Returns `(kl, aux_value_loss)`.
    pub fn joint_loss(
        &mut self,
        buf: &ReplayBuffer,
        with_grads: bool,
    ) -> Result<(f64, f64), TrainError> {
        let slots = self.slots();
        let a = self.num_actions;
        let n = buf.len();
        let obs_len = buf.transitions[0].obs.len();
        let mut flat = Vec::with_capacity(n * obs_len);
        for tr in &buf.transitions {
            flat.extend_from_slice(&tr.obs);
        }
        let denom = (n * slots) as f64;
        let n_f = n as f64;
        let actor_pass = self.actor.forward(&flat, n)?;
        let logits = actor_pass.head(self.policy_head);
        let aux = actor_pass.head(self.aux_head);
        let mut policy_grad = vec![0.0; n * slots * a];
        let mut aux_grad = vec![0.0; n * slots];
        let mut kl_sum = 0.0;
        let mut aux_loss_sum = 0.0;
        for (i, tr) in buf.transitions.iter().enumerate() {
            for s in 0..slots {
                let lo = (i * slots + s) * a;
                let (p_new, _) = softmax_entropy(&logits[lo..lo + a]);
                let p_old = &tr.old_probs[s * a..(s + 1) * a];
                kl_sum += categorical_kl(p_old, &p_new);
                let v = aux[i * slots + s];
                aux_loss_sum += 0.5 * (v - tr.rewards[s]) * (v - tr.rewards[s]);
                if with_grads {
                    // d KL(p_old || softmax(z)) / dz_j = p_new_j - p_old_j.
                    for j in 0..a {
                        policy_grad[lo + j] = (p_new[j] - p_old[j]) / n_f;
                    }
                    aux_grad[i * slots + s] = (v - tr.rewards[s]) / denom;
                }
            }
        }
        if with_grads {
            self.actor.zero_grad();
            let empty: &[f64] = &[];
            let mut agrads: Vec<&[f64]> = vec![empty; self.actor.num_heads()];
            agrads[self.policy_head] = &policy_grad;
            agrads[self.aux_head] = &aux_grad;
            self.actor.backward(&actor_pass, &agrads)?;
        }
        Ok((kl_sum / n_f, aux_loss_sum / denom))
    }

    /// One dual-clip policy step plus critic regression on a minibatch.
    /// Returns the minimized policy loss and the value loss.
    fn policy_phase_step(
        &mut self,
        buf: &ReplayBuffer,
        advantages: &[f64],
        idxs: &[usize],
    ) -> Result<(f64, f64), TrainError> {
        let ploss = self.policy_loss(buf, advantages, idxs, true)?;
        self.actor_opt.step(&mut self.actor)?;
        let vloss = self.critic_loss(buf, idxs, true)?;
        self.critic_opt.step(&mut self.critic)?;
        Ok((ploss, vloss))
    }

    /// One auxiliary epoch over the full buffer: value regression on the
    /// critic, then behavioral-cloning KL plus auxiliary value on the actor.
    fn aux_phase_epoch(&mut self, buf: &ReplayBuffer) -> Result<(f64, f64), TrainError> {
        let all: Vec<usize> = (0..buf.len()).collect();
        self.critic_loss(buf, &all, true)?;
        self.critic_opt.step(&mut self.critic)?;
        let (kl, aux) = self.joint_loss(buf, true)?;
        self.actor_opt.step(&mut self.actor)?;
        Ok((kl, aux))
    }

    /// Builds a replay buffer by rolling the current policy through the
    /// environment (exposed for the verification suites).
    pub fn collect(
        &self,
        env: &mut Env,
        episodes: usize,
        seed: u64,
    ) -> Result<ReplayBuffer, TrainError> {
        let mut buf = ReplayBuffer::default();
        let mut rng = stream_rng(seed, 0xAC7);
        for ep in 0..episodes {
            let mut obs = env.reset(episode_seed(seed, ep as u64));
            loop {
                let scaled = self.scaled(&obs);
                let (actions, _, probs) = self.act(&obs, &mut rng)?;
                let out = env.step(&actions)?;
                self.push_transitions(&mut buf, &scaled, &actions, &probs, &out.records);
                obs = out.observation;
                if out.done {
                    break;
                }
            }
        }
        Ok(buf)
    }

    /// Mean deadline slack per user across the buffer.
    fn mean_slacks(&self, buf: &ReplayBuffer) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_users];
        let mut counts = vec![0usize; self.num_users];
        for tr in &buf.transitions {
            for (s, &u) in tr.users.iter().enumerate() {
                sums[u] += tr.slacks[s];
                counts[u] += 1;
            }
        }
        sums.iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect()
    }

    fn update_round(
        &mut self,
        buf: &ReplayBuffer,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundStats, TrainError> {
        let slots = self.slots();
        // Advantages frozen at round start from the current critic.
        let values = self.buffer_values(buf)?;
        let mut advantages = vec![0.0; buf.len() * slots];
        for (i, tr) in buf.transitions.iter().enumerate() {
            for s in 0..slots {
                advantages[i * slots + s] = advantage(tr.rewards[s], values[i * slots + s]);
            }
        }

        let mb = self.hyper.minibatch.min(buf.len());
        let mut policy_loss = 0.0;
        let mut vloss = 0.0;
        for _ in 0..self.hyper.n_policy {
            let idxs = rand::seq::index::sample(rng, buf.len(), mb).into_vec();
            let (pl, vl) = self.policy_phase_step(buf, &advantages, &idxs)?;
            policy_loss = pl;
            vloss = vl;
        }

        let mut aux_kl = 0.0;
        let mut aux_value = 0.0;
        for _ in 0..self.hyper.n_aux {
            let (kl, av) = self.aux_phase_epoch(buf)?;
            aux_kl = kl;
            aux_value = av;
        }

        let slacks = self.mean_slacks(buf);
        for _ in 0..self.hyper.n_lambda {
            lambda_phase(&mut self.coeffs, &slacks);
        }

        Ok(RoundStats {
            policy_loss,
            value_loss: vloss,
            aux_kl,
            aux_value,
        })
    }
}

/// Deterministic per-episode seed derivation (splitmix64 over the base).
pub fn episode_seed(base: u64, episode: u64) -> u64 {
    let mut z = base ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The training loop: rollout collection, and after every `n_update`
/// episodes the policy / auxiliary / coefficient phases followed by a buffer
/// clear. `on_episode` receives one log row per episode.
pub fn train(
    env: &mut Env,
    agent: &mut PpgAgent,
    episodes: usize,
    seed: u64,
    mut on_episode: impl FnMut(&TrainLogRow),
) -> Result<(), TrainError> {
    let mut buf = ReplayBuffer::default();
    let mut act_rng = stream_rng(seed, 0xAC7);
    let mut batch_rng = stream_rng(seed, 0xBA7C);
    let mut last = RoundStats {
        policy_loss: 0.0,
        value_loss: 0.0,
        aux_kl: 0.0,
        aux_value: 0.0,
    };
    for ep in 0..episodes {
        if ep % agent.hyper.n_update == 0 {
            // The lambda snapshot the env rewards with is fixed per window.
            env.set_lambdas(&agent.coeffs.lambda);
        }
        let mut obs = env.reset(episode_seed(seed, ep as u64));
        let mut ep_records: Vec<StepRecord> = Vec::new();
        let mut entropy_sum = 0.0;
        let mut entropy_n = 0usize;
        loop {
            let scaled = agent.scaled(&obs);
            let (actions, _logps, probs) = agent.act(&obs, &mut act_rng)?;
            entropy_sum += probs
                .iter()
                .map(|p| {
                    -p.iter()
                        .filter(|&&x| x > 0.0)
                        .map(|x| x * x.ln())
                        .sum::<f64>()
                })
                .sum::<f64>();
            entropy_n += probs.len();
            let out = env.step(&actions)?;
            agent.push_transitions(&mut buf, &scaled, &actions, &probs, &out.records);
            ep_records.extend(out.records);
            obs = out.observation;
            if out.done {
                break;
            }
        }
        if (ep + 1) % agent.hyper.n_update == 0 && !buf.is_empty() {
            last = agent
                .update_round(&buf, &mut batch_rng)
                .map_err(|e| match e {
                    TrainError::Nn(NnError::NonFinite(p)) => TrainError::Diverged(format!(
                        "non-finite value in `{p}` during update round after episode {ep}"
                    )),
                    other => other,
                })?;
            buf.clear();
        }
        let n = ep_records.len() as f64;
        let row = TrainLogRow {
            episode: ep,
            mean_reward: ep_records.iter().map(|r| r.reward).sum::<f64>() / n,
            mean_response_time_s: ep_records.iter().map(|r| r.response_time_s).sum::<f64>() / n,
            mean_energy_j: ep_records.iter().map(|r| r.energy_j).sum::<f64>() / n,
            violation_rate: ep_records
                .iter()
                .filter(|r| r.deadline_slack_s < 0.0)
                .count() as f64
                / n,
            mean_entropy: entropy_sum / entropy_n.max(1) as f64,
            policy_loss: last.policy_loss,
            value_loss: last.value_loss,
            aux_kl: last.aux_kl,
            aux_value_loss: last.aux_value,
            lambda_mean: agent.coeffs.lambda.iter().sum::<f64>()
                / agent.coeffs.lambda.len() as f64,
            lambda_max: agent.coeffs.lambda.iter().cloned().fold(0.0, f64::max),
        };
        on_episode(&row);
    }
    Ok(())
}

/// Greedy (no-exploration) rollouts; rewards use the agent's trained
/// deadline coefficients.
pub fn evaluate(
    env: &mut Env,
    agent: &PpgAgent,
    episodes: usize,
    seed: u64,
) -> Result<Vec<StepRecord>, TrainError> {
    env.set_lambdas(&agent.coeffs.lambda);
    let mut records = Vec::new();
    for ep in 0..episodes {
        let mut obs = env.reset(episode_seed(seed, ep as u64));
        loop {
            let actions = agent.greedy(&obs)?;
            let out = env.step(&actions)?;
            records.extend(out.records);
            obs = out.observation;
            if out.done {
                break;
            }
        }
    }
    Ok(records)
}

/// Checkpoint header carried alongside the parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpgCheckpointHeader {
    pub kind: PpgKind,
    pub num_users: usize,
    pub num_actions: usize,
    pub observation_dim: usize,
    pub hidden: usize,
    pub history_window: usize,
    pub hyper: PpgHyper,
    pub lambda: Vec<f64>,
    pub lambda_lr: f64,
    pub obs_scale: ObsScale,
}

impl PpgAgent {
    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainError> {
        let header = PpgCheckpointHeader {
            kind: self.kind,
            num_users: self.num_users,
            num_actions: self.num_actions,
            observation_dim: self.obs_dim,
            hidden: self.hyper.hidden,
            history_window: self.history,
            hyper: self.hyper.clone(),
            lambda: self.coeffs.lambda.clone(),
            lambda_lr: self.coeffs.lr,
            obs_scale: self.obs_scale,
        };
        let header_text = toml::to_string(&header)
            .map_err(|e| TrainError::Diverged(format!("header serialize: {e}")))?;
        let mut tensors: Vec<CheckpointTensor> =
            checkpoint::tensors_from_network("actor", &self.actor);
        tensors.extend(checkpoint::tensors_from_network("critic", &self.critic));
        checkpoint::write_checkpoint(path, &header_text, &tensors)?;
        Ok(())
    }

    /// Reads a checkpoint header without constructing an agent.
    pub fn read_header(path: &std::path::Path) -> Result<PpgCheckpointHeader, TrainError> {
        let (header_text, _) = checkpoint::read_checkpoint(path)?;
        toml::from_str(&header_text)
            .map_err(|e| TrainError::Nn(NnError::Checkpoint(format!("bad header: {e}"))))
    }

    /// Restores an agent; `cfg` must agree with the checkpoint dimensions.
    pub fn load(path: &std::path::Path, cfg: &SystemConfig) -> Result<Self, TrainError> {
        let (header_text, tensors) = checkpoint::read_checkpoint(path)?;
        let header: PpgCheckpointHeader = toml::from_str(&header_text)
            .map_err(|e| TrainError::Nn(NnError::Checkpoint(format!("bad header: {e}"))))?;
        let mut cfg = cfg.clone();
        cfg.ppg = header.hyper.clone();
        let mut agent = PpgAgent::new(header.kind, &cfg, 0)?;
        if agent.num_users != header.num_users
            || agent.num_actions != header.num_actions
            || agent.obs_dim != header.observation_dim
        {
            return Err(TrainError::Nn(NnError::Checkpoint(format!(
                "checkpoint dimensions (K={}, A={}, dim={}) do not match config (K={}, A={}, dim={})",
                header.num_users,
                header.num_actions,
                header.observation_dim,
                agent.num_users,
                agent.num_actions,
                agent.obs_dim
            ))));
        }
        checkpoint::load_into_network(&mut agent.actor, "actor", &tensors)?;
        checkpoint::load_into_network(&mut agent.critic, "critic", &tensors)?;
        agent.coeffs.lambda = header.lambda;
        agent.coeffs.lr = header.lambda_lr;
        agent.obs_scale = header.obs_scale;
        Ok(agent)
    }
}
