//! Advantage actor-critic training over the simulator, with epsilon-greedy
//! exploration and a two-phase curriculum (standard traces, then real).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neural::gru::{argmax, softmax, GruCache, GruPolicy};
use crate::neural::{AdamState, Net};
use crate::sim::{Action, Observation, SimConfig, Simulator, ACTIONS, ACTION_COUNT};
use crate::workload::WorkloadTrace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_standard: usize,
    pub epochs_real: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub episodes_per_epoch: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_standard: 1000,
            epochs_real: 1000,
            epsilon: 0.1,
            gamma: 0.99,
            value_coef: 0.5,
            entropy_coef: 0.01,
            episodes_per_epoch: 4,
            eval_every: 25,
            learning_rate: 3e-4,
            clip_norm: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Invariant("epsilon out of [0,1]".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Invariant("gamma out of (0,1]".into()));
        }
        if self.episodes_per_epoch == 0 || self.eval_every == 0 {
            return Err(Error::Invariant(
                "episodes_per_epoch and eval_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub hidden_before: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub makespan: usize,
    pub truncated: bool,
}

impl Trajectory {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        let dones = self.steps.iter().filter(|s| s.done).count();
        if dones != 1 || !self.steps.last().map(|s| s.done).unwrap_or(false) {
            return Err(Error::Invariant(
                "trajectory must end with exactly one done step".into(),
            ));
        }
        if self.makespan < t_len {
            return Err(Error::Invariant("makespan below trace length".into()));
        }
        Ok(())
    }
}

/// Monte-Carlo discounted returns, G_t = r_t + gamma * G_{t+1}.
pub fn discounted_returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; traj.steps.len()];
    let mut acc = 0.0;
    for (i, step) in traj.steps.iter().enumerate().rev() {
        acc = step.reward + gamma * acc;
        returns[i] = acc;
    }
    returns
}

/// How the rollout picks actions.
#[derive(Debug, Clone, Copy)]
pub enum ActionSelect {
    /// Sample from the softmax, but with probability epsilon pick uniformly.
    EpsilonSoftmax(f64),
    /// Deterministic argmax over logits.
    Greedy,
}

/// Runs one episode with the policy and records the training tuple stream.
pub fn rollout(
    policy: &GruPolicy<f64>,
    sim_cfg: &SimConfig,
    trace: &WorkloadTrace,
    select: ActionSelect,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let (mut sim, mut obs) = Simulator::<f64>::new(sim_cfg.clone(), trace.clone())?;
    let mut h = policy.h0();
    let mut steps = Vec::new();
    let mut makespan = 0;
    while !sim.is_done() {
        let (h_new, _) = policy.forward_step(&h, &obs);
        let (logits, _) = policy.heads(&h_new);
        let action_idx = match select {
            ActionSelect::Greedy => argmax(&logits),
            ActionSelect::EpsilonSoftmax(eps) => {
                if rng.random::<f64>() < eps {
                    rng.random_range(0..ACTION_COUNT)
                } else {
                    sample_categorical(&softmax(&logits), rng)
                }
            }
        };
        let result = sim.step(ACTIONS[action_idx])?;
        steps.push(StepRecord {
            obs: obs.to_vec(),
            hidden_before: h.clone(),
            action: action_idx,
            reward: result.reward,
            done: result.done,
        });
        makespan = result.makespan_so_far;
        obs = result.observation;
        h = h_new;
    }
    let traj = Trajectory {
        steps,
        makespan,
        truncated: sim.state.truncated,
    };
    traj.validate(trace.len())?;
    Ok(traj)
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Computes the A2C loss over the trajectories and, when `with_grad`,
/// accumulates parameter gradients (the caller zeroes them).
///
/// total = -sum A_t log pi(a_t) + value_coef * sum (G_t - V_t)^2
///         - entropy_coef * sum H(pi(.|h_t)),
/// with A_t = G_t - V_t treated as constant.
pub fn a2c_loss(
    policy: &mut GruPolicy<f64>,
    trajectories: &[Trajectory],
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<LossReport> {
    a2c_loss_with_advantages(policy, trajectories, cfg, with_grad, None)
}

/// Like [`a2c_loss`], but optionally uses externally fixed advantages in the
/// policy term. Finite-difference checks need this: the analytic gradient
/// detaches A_t, so the differenced loss must hold A_t constant too.
pub fn a2c_loss_with_advantages(
    policy: &mut GruPolicy<f64>,
    trajectories: &[Trajectory],
    cfg: &TrainConfig,
    with_grad: bool,
    frozen_advantages: Option<&[Vec<f64>]>,
) -> Result<LossReport> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let mut report = LossReport::default();
    for (ti, traj) in trajectories.iter().enumerate() {
        let returns = discounted_returns(traj, cfg.gamma);
        // forward pass over the episode, caching activations
        let mut h = policy.h0();
        let mut caches: Vec<GruCache<f64>> = Vec::with_capacity(traj.steps.len());
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(traj.steps.len());
        let mut probs_all = Vec::with_capacity(traj.steps.len());
        let mut values = Vec::with_capacity(traj.steps.len());
        for step in &traj.steps {
            let (h_new, cache) = policy.forward_step(&h, &step.obs);
            let (logits, value) = policy.heads(&h_new);
            probs_all.push(softmax(&logits));
            values.push(value);
            caches.push(cache);
            hs.push(h_new.clone());
            h = h_new;
        }
        let advantage = |t: usize, values: &[f64]| match frozen_advantages {
            Some(adv) => adv[ti][t],
            None => returns[t] - values[t],
        };
        for (t, step) in traj.steps.iter().enumerate() {
            let p = &probs_all[t];
            let adv = advantage(t, &values);
            report.policy_loss -= adv * p[step.action].max(1e-300).ln();
            report.value_loss += cfg.value_coef * (returns[t] - values[t]).powi(2);
            let ent: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
            report.entropy += ent;
        }
        if with_grad {
            let mut d_h_next = vec![0.0; policy.hidden_dim];
            for t in (0..traj.steps.len()).rev() {
                let step = &traj.steps[t];
                let p = &probs_all[t];
                let adv = advantage(t, &values);
                let ent: f64 =
                    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
                let mut d_logits = vec![0.0; policy.action_dim];
                for a in 0..policy.action_dim {
                    // policy-gradient term: adv * (p - onehot)
                    d_logits[a] = adv * (p[a] - if a == step.action { 1.0 } else { 0.0 });
                    // entropy term: -coef * dH/dlogits, dH/dz_j = -p_j(ln p_j + H)
                    if p[a] > 0.0 {
                        d_logits[a] += cfg.entropy_coef * p[a] * (p[a].ln() + ent);
                    }
                }
                let d_value = 2.0 * cfg.value_coef * (values[t] - returns[t]);
                let mut d_h = d_h_next;
                policy.heads_backward(&hs[t], &d_logits, d_value, &mut d_h);
                let (d_h_prev, _) = policy.backward_step(&caches[t], &d_h);
                d_h_next = d_h_prev;
            }
        }
    }
    report.total = report.policy_loss + report.value_loss - cfg.entropy_coef * report.entropy;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("a2c loss".into()));
    }
    Ok(report)
}

/// One optimizer step from a batch of trajectories.
pub fn a2c_update(
    policy: &mut GruPolicy<f64>,
    trajectories: &[Trajectory],
    cfg: &TrainConfig,
    opt: &mut AdamState<f64>,
) -> Result<LossReport> {
    policy.zero_grads();
    let report = a2c_loss(policy, trajectories, cfg, true)?;
    opt.apply(policy)?;
    Ok(report)
}

/// Deterministic controller interface shared by the DRL policy, the
/// extracted FSM, and the baselines.
pub trait Actor {
    fn name(&self) -> &str;
    fn begin_episode(&mut self);
    fn act(&mut self, obs: &Observation<f64>) -> Action;
}

/// Greedy wrapper around a trained policy.
pub struct PolicyActor<'a> {
    pub policy: &'a GruPolicy<f64>,
    h: Vec<f64>,
}

impl<'a> PolicyActor<'a> {
    pub fn new(policy: &'a GruPolicy<f64>) -> Self {
        let h = policy.h0();
        PolicyActor { policy, h }
    }
}

impl Actor for PolicyActor<'_> {
    fn name(&self) -> &str {
        "drl"
    }

    fn begin_episode(&mut self) {
        self.h = self.policy.h0();
    }

    fn act(&mut self, obs: &Observation<f64>) -> Action {
        let (h_new, _) = self.policy.forward_step(&self.h, obs);
        let a = self.policy.greedy_action(&h_new);
        self.h = h_new;
        ACTIONS[a]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_trace_k: Vec<usize>,
    pub mean_k: f64,
    pub truncations: usize,
}

/// Fixed per-trace simulator seed so every actor faces identical
/// environment randomness (paired comparison).
pub fn eval_seed(base: u64, trace_idx: usize) -> u64 {
    base.wrapping_add((trace_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn evaluate_policy(
    actor: &mut dyn Actor,
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    seed_base: u64,
) -> Result<EvalResult> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no evaluation traces".into()));
    }
    let mut per_trace_k = Vec::with_capacity(traces.len());
    let mut truncations = 0;
    for (i, trace) in traces.iter().enumerate() {
        let cfg = SimConfig {
            seed: eval_seed(seed_base, i),
            ..sim_cfg.clone()
        };
        let (mut sim, mut obs) = Simulator::<f64>::new(cfg, trace.clone())?;
        actor.begin_episode();
        let mut k = 0;
        while !sim.is_done() {
            let a = actor.act(&obs);
            let r = sim.step(a)?;
            k = r.makespan_so_far;
            obs = r.observation;
        }
        if sim.state.truncated {
            truncations += 1;
        }
        per_trace_k.push(k);
    }
    let mean_k = per_trace_k.iter().sum::<usize>() as f64 / per_trace_k.len() as f64;
    Ok(EvalResult {
        per_trace_k,
        mean_k,
        truncations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Standard,
    Real,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Standard => f.write_str("standard"),
            Phase::Real => f.write_str("real"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_k: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const EVAL_TRACE_CAP: usize = 8;

/// Two-phase curriculum: `epochs_standard` epochs over the standard traces,
/// then `epochs_real` more epochs over the real traces with the same
/// parameters. Returns the trained policy and the learning curve.
pub fn train_curriculum(
    standard: &[WorkloadTrace],
    real: &[WorkloadTrace],
    sim_cfg: &SimConfig,
    train_cfg: &TrainConfig,
) -> Result<(GruPolicy<f64>, Vec<CurvePoint>)> {
    train_cfg.validate()?;
    if standard.is_empty() && train_cfg.epochs_standard > 0 {
        return Err(Error::InvalidArgument("standard trace set is empty".into()));
    }
    if real.is_empty() && train_cfg.epochs_real > 0 {
        return Err(Error::InvalidArgument("real trace set is empty".into()));
    }
    let mut policy = GruPolicy::new(train_cfg.seed);
    let mut opt = AdamState::new(&policy, train_cfg.learning_rate, train_cfg.clip_norm);
    let mut curve = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    train_phase(
        &mut policy,
        &mut opt,
        standard,
        sim_cfg,
        train_cfg,
        Phase::Standard,
        0,
        train_cfg.epochs_standard,
        &mut rng,
        &mut curve,
        None,
    )?;
    let mut best = None;
    train_phase(
        &mut policy,
        &mut opt,
        real,
        sim_cfg,
        train_cfg,
        Phase::Real,
        train_cfg.epochs_standard,
        train_cfg.epochs_real,
        &mut rng,
        &mut curve,
        Some(&mut best),
    )?;
    // keep the best real-phase evaluation, not the last iterate
    if let Some(snap) = best {
        policy = snap;
    }
    Ok((policy, curve))
}

/// Trains `epochs` epochs of `episodes_per_epoch` rollouts each, recording
/// a curve point every `eval_every` epochs. Exposed so callers can continue
/// training an existing policy (e.g. fine-tuning regimes).
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    policy: &mut GruPolicy<f64>,
    opt: &mut AdamState<f64>,
    traces: &[WorkloadTrace],
    sim_cfg: &SimConfig,
    train_cfg: &TrainConfig,
    phase: Phase,
    epoch_offset: usize,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    curve: &mut Vec<CurvePoint>,
    mut best: Option<&mut Option<GruPolicy<f64>>>,
) -> Result<()> {
    let mut best_k = f64::INFINITY;
    for e in 0..epochs {
        let mut trajectories = Vec::with_capacity(train_cfg.episodes_per_epoch);
        for _ in 0..train_cfg.episodes_per_epoch {
            let trace = &traces[rng.random_range(0..traces.len())];
            let cfg = SimConfig {
                seed: rng.random(),
                ..sim_cfg.clone()
            };
            trajectories.push(rollout(
                policy,
                &cfg,
                trace,
                ActionSelect::EpsilonSoftmax(train_cfg.epsilon),
                rng,
            )?);
        }
        let report = a2c_update(policy, &trajectories, train_cfg, opt)?;
        let epoch = epoch_offset + e;
        if (epoch + 1) % train_cfg.eval_every == 0 {
            let eval_set = &traces[..traces.len().min(EVAL_TRACE_CAP)];
            let mut actor = PolicyActor::new(policy);
            let eval = evaluate_policy(&mut actor, sim_cfg, eval_set, 0xE7A1)?;
            if let Some(slot) = best.as_deref_mut() {
                if eval.mean_k < best_k {
                    best_k = eval.mean_k;
                    *slot = Some(policy.clone());
                }
            }
            curve.push(CurvePoint {
                epoch,
                phase,
                mean_k: eval.mean_k,
                policy_loss: report.policy_loss,
                value_loss: report.value_loss,
                entropy: report.entropy,
            });
        }
    }
    Ok(())
}

/// Learning-curve text export: one line per point.
pub fn write_curve(path: &std::path::Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("epoch phase mean_K policy_loss value_loss entropy\n");
    for p in curve {
        out.push_str(&format!(
            "{} {} {:.6} {:.6} {:.6} {:.6}\n",
            p.epoch, p.phase, p.mean_k, p.policy_loss, p.value_loss, p.entropy
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
