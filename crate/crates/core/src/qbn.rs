//! Quantized bottleneck networks: transition-dataset collection from a
//! trained policy, supervised reconstruction training, ternary encoding,
//! and end-to-end fine-tuning with the bottlenecks inserted.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neural::gru::{argmax, GruCache, GruPolicy};
use crate::neural::{
    matvec, matvec_t_acc, outer_acc, quantize3, quantize3_backward, to_code, AdamState, Net,
    Parameter,
};
use crate::rl::{discounted_returns, eval_seed, LossReport, TrainConfig};
use crate::scalar::Scalar;
use crate::sim::{SimConfig, Simulator, ACTIONS};
use crate::workload::WorkloadTrace;
use crate::{Error, Result};

/// Default latent width of the hidden-state bottleneck.
pub const HIDDEN_LATENT: usize = 64;
/// Default latent width of the observation bottleneck.
pub const OBS_LATENT: usize = 16;
/// Width of the encoder/decoder hidden layers.
pub const QBN_HIDDEN: usize = 64;

/// One simulator step of the trained policy: raw hidden states around the
/// step, the raw observation, and the greedy action.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub h_before: Vec<f64>,
    pub h_after: Vec<f64>,
    pub obs: Vec<f64>,
    pub action: usize,
    pub trace_id: usize,
    pub step_index: usize,
}

/// Ternary-code counterpart of a [`TransitionRecord`]; keeps the raw
/// observation for nearest-observation fallback statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRecord {
    pub h_before_code: Vec<i8>,
    pub h_after_code: Vec<i8>,
    pub obs_code: Vec<i8>,
    pub action: usize,
    pub raw_obs: Vec<f64>,
}

/// Autoencoder with a ternary-quantized latent layer.
///
/// encoder: x -> tanh(enc1 x) -> tanh(enc2 .) -> quantize3
/// decoder: code -> tanh(dec1 code) -> dec2 .
#[derive(Debug, Clone, PartialEq)]
pub struct Qbn<S> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// When false the quantizer is bypassed (smooth surrogate used by the
    /// gradient checks; the straight-through rule makes both paths share
    /// the same backward).
    pub quantize_enabled: bool,
    pub enc1: Parameter<S>,
    pub enc1_b: Parameter<S>,
    pub enc2: Parameter<S>,
    pub enc2_b: Parameter<S>,
    pub dec1: Parameter<S>,
    pub dec1_b: Parameter<S>,
    pub dec2: Parameter<S>,
    pub dec2_b: Parameter<S>,
}

#[derive(Debug, Clone)]
pub struct QbnCache<S> {
    pub x: Vec<S>,
    pub e1: Vec<S>,
    pub pre: Vec<S>,
    pub latent: Vec<S>,
    pub d1: Vec<S>,
    pub out: Vec<S>,
}

impl<S: Scalar> Qbn<S> {
    pub fn new(input_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden_dim = QBN_HIDDEN;
        Qbn {
            input_dim,
            hidden_dim,
            latent_dim,
            quantize_enabled: true,
            enc1: Parameter::uniform("qbn.enc1", hidden_dim, input_dim, input_dim, &mut rng),
            enc1_b: Parameter::zeros("qbn.enc1_b", hidden_dim, 1),
            enc2: Parameter::uniform("qbn.enc2", latent_dim, hidden_dim, hidden_dim, &mut rng),
            enc2_b: Parameter::zeros("qbn.enc2_b", latent_dim, 1),
            dec1: Parameter::uniform("qbn.dec1", hidden_dim, latent_dim, latent_dim, &mut rng),
            dec1_b: Parameter::zeros("qbn.dec1_b", hidden_dim, 1),
            dec2: Parameter::uniform("qbn.dec2", input_dim, hidden_dim, hidden_dim, &mut rng),
            dec2_b: Parameter::zeros("qbn.dec2_b", input_dim, 1),
        }
    }

    pub fn forward(&self, x: &[S]) -> (Vec<S>, QbnCache<S>) {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut e1 = vec![S::zero(); self.hidden_dim];
        matvec(&self.enc1, x, &mut e1);
        for (v, b) in e1.iter_mut().zip(&self.enc1_b.values) {
            *v = (*v + *b).tanh();
        }
        let mut pre = vec![S::zero(); self.latent_dim];
        matvec(&self.enc2, &e1, &mut pre);
        for (v, b) in pre.iter_mut().zip(&self.enc2_b.values) {
            *v = (*v + *b).tanh();
        }
        let latent = if self.quantize_enabled {
            quantize3(&pre)
        } else {
            pre.clone()
        };
        let (out, d1) = self.decode(&latent);
        let cache = QbnCache {
            x: x.to_vec(),
            e1,
            pre,
            latent,
            d1,
            out: out.clone(),
        };
        (out, cache)
    }

    fn decode(&self, latent: &[S]) -> (Vec<S>, Vec<S>) {
        let mut d1 = vec![S::zero(); self.hidden_dim];
        matvec(&self.dec1, latent, &mut d1);
        for (v, b) in d1.iter_mut().zip(&self.dec1_b.values) {
            *v = (*v + *b).tanh();
        }
        let mut out = vec![S::zero(); self.input_dim];
        matvec(&self.dec2, &d1, &mut out);
        for (v, b) in out.iter_mut().zip(&self.dec2_b.values) {
            *v += *b;
        }
        (out, d1)
    }

    /// Deterministic ternary code of an input vector.
    pub fn encode(&self, x: &[S]) -> Result<Vec<i8>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut e1 = vec![S::zero(); self.hidden_dim];
        matvec(&self.enc1, x, &mut e1);
        for (v, b) in e1.iter_mut().zip(&self.enc1_b.values) {
            *v = (*v + *b).tanh();
        }
        let mut pre = vec![S::zero(); self.latent_dim];
        matvec(&self.enc2, &e1, &mut pre);
        for (v, b) in pre.iter_mut().zip(&self.enc2_b.values) {
            *v = (*v + *b).tanh();
        }
        Ok(to_code(&quantize3(&pre)))
    }

    /// Decoder output for an explicit ternary code.
    pub fn decode_code(&self, code: &[i8]) -> Result<Vec<S>> {
        if code.len() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim,
                got: code.len(),
            });
        }
        let latent: Vec<S> = code.iter().map(|&c| S::of(c as f64)).collect();
        Ok(self.decode(&latent).0)
    }

    /// Accumulates parameter gradients for dL/d(out) and returns dL/dx.
    /// The quantizer uses the straight-through rule; its input is a tanh
    /// output, always inside [-1, 1], so the pass-through is exact identity.
    pub fn backward(&mut self, cache: &QbnCache<S>, d_out: &[S]) -> Vec<S> {
        // decoder
        outer_acc(&mut self.dec2, d_out, &cache.d1);
        for (g, d) in self.dec2_b.grad.iter_mut().zip(d_out) {
            *g += *d;
        }
        let mut d_d1 = vec![S::zero(); self.hidden_dim];
        matvec_t_acc(&self.dec2, d_out, &mut d_d1);
        for i in 0..self.hidden_dim {
            d_d1[i] = d_d1[i] * (S::one() - cache.d1[i] * cache.d1[i]);
        }
        outer_acc(&mut self.dec1, &d_d1, &cache.latent);
        for (g, d) in self.dec1_b.grad.iter_mut().zip(&d_d1) {
            *g += *d;
        }
        let mut d_latent = vec![S::zero(); self.latent_dim];
        matvec_t_acc(&self.dec1, &d_d1, &mut d_latent);
        // straight-through quantizer
        let mut d_pre = vec![S::zero(); self.latent_dim];
        if self.quantize_enabled {
            quantize3_backward(&cache.pre, &d_latent, &mut d_pre);
        } else {
            d_pre.copy_from_slice(&d_latent);
        }
        for i in 0..self.latent_dim {
            d_pre[i] = d_pre[i] * (S::one() - cache.pre[i] * cache.pre[i]);
        }
        // encoder
        outer_acc(&mut self.enc2, &d_pre, &cache.e1);
        for (g, d) in self.enc2_b.grad.iter_mut().zip(&d_pre) {
            *g += *d;
        }
        let mut d_e1 = vec![S::zero(); self.hidden_dim];
        matvec_t_acc(&self.enc2, &d_pre, &mut d_e1);
        for i in 0..self.hidden_dim {
            d_e1[i] = d_e1[i] * (S::one() - cache.e1[i] * cache.e1[i]);
        }
        outer_acc(&mut self.enc1, &d_e1, &cache.x);
        for (g, d) in self.enc1_b.grad.iter_mut().zip(&d_e1) {
            *g += *d;
        }
        let mut d_x = vec![S::zero(); self.input_dim];
        matvec_t_acc(&self.enc1, &d_e1, &mut d_x);
        d_x
    }
}

impl<S: Scalar> Net<S> for Qbn<S> {
    fn parameters(&self) -> Vec<&Parameter<S>> {
        vec![
            &self.enc1, &self.enc1_b, &self.enc2, &self.enc2_b, &self.dec1, &self.dec1_b,
            &self.dec2, &self.dec2_b,
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![
            &mut self.enc1,
            &mut self.enc1_b,
            &mut self.enc2,
            &mut self.enc2_b,
            &mut self.dec1,
            &mut self.dec1_b,
            &mut self.dec2,
            &mut self.dec2_b,
        ]
    }
}

/// Runs greedy rollouts of the policy and records one transition per
/// simulator step. With `qbns` present the rollout uses the
/// bottleneck-inserted forward pass (reconstructed observations and hidden
/// states), matching the controller the FSM will mirror.
pub fn collect_dataset(
    policy: &GruPolicy<f64>,
    qbns: Option<(&Qbn<f64>, &Qbn<f64>)>,
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    episodes_per_trace: usize,
    seed_base: u64,
) -> Result<Vec<TransitionRecord>> {
    let mut records = Vec::new();
    for (trace_id, trace) in traces.iter().enumerate() {
        for ep in 0..episodes_per_trace {
            let cfg = SimConfig {
                seed: eval_seed(seed_base, trace_id * 1009 + ep),
                ..sim_cfg.clone()
            };
            let (mut sim, mut obs) = Simulator::<f64>::new(cfg, trace.clone())?;
            let mut h = policy.h0();
            let mut step_index = 0;
            while !sim.is_done() {
                let obs_vec = obs.to_vec();
                let (h_new, action) = match qbns {
                    None => {
                        let (h_new, _) = policy.forward_step(&h, &obs_vec);
                        let a = policy.greedy_action(&h_new);
                        (h_new, a)
                    }
                    Some((qbn_obs, qbn_hidden)) => {
                        let (o_rec, _) = qbn_obs.forward(&obs_vec);
                        let (h_prev_rec, _) = qbn_hidden.forward(&h);
                        let (h_new, _) = policy.forward_step(&h_prev_rec, &o_rec);
                        let (h_rec, _) = qbn_hidden.forward(&h_new);
                        let (logits, _) = policy.heads(&h_rec);
                        (h_new, argmax(&logits))
                    }
                };
                records.push(TransitionRecord {
                    h_before: h.clone(),
                    h_after: h_new.clone(),
                    obs: obs_vec,
                    action,
                    trace_id,
                    step_index,
                });
                let r = sim.step(ACTIONS[action])?;
                obs = r.observation;
                h = h_new;
                step_index += 1;
            }
        }
    }
    Ok(records)
}

/// Which field of the dataset a bottleneck reconstructs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QbnTarget {
    Obs,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QbnTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub latent_hidden: usize,
    pub latent_obs: usize,
    pub seed: u64,
}

impl Default for QbnTrainConfig {
    fn default() -> Self {
        QbnTrainConfig {
            epochs: 200,
            batch: 256,
            learning_rate: 1e-3,
            latent_hidden: HIDDEN_LATENT,
            latent_obs: OBS_LATENT,
            seed: 0,
        }
    }
}

/// Supervised reconstruction training; returns the trained network and the
/// final mean squared error per dimension. Stops early once the relative
/// improvement over the last 10 epochs falls below 1e-4.
pub fn train_qbn(
    target: QbnTarget,
    records: &[TransitionRecord],
    cfg: &QbnTrainConfig,
) -> Result<(Qbn<f64>, f64)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let inputs: Vec<&Vec<f64>> = match target {
        QbnTarget::Obs => records.iter().map(|r| &r.obs).collect(),
        QbnTarget::Hidden => records.iter().map(|r| &r.h_after).collect(),
    };
    let input_dim = inputs[0].len();
    let latent = match target {
        QbnTarget::Obs => cfg.latent_obs,
        QbnTarget::Hidden => cfg.latent_hidden,
    };
    let mut qbn = Qbn::new(input_dim, latent, cfg.seed);
    let mut opt = AdamState::new(&qbn, cfg.learning_rate, f64::INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut last_mse = f64::INFINITY;
    let mut history: Vec<f64> = Vec::new();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_se = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            qbn.zero_grads();
            let scale = 1.0 / (chunk.len() * input_dim) as f64;
            for &idx in chunk {
                let x = inputs[idx];
                let (out, cache) = qbn.forward(x);
                let d_out: Vec<f64> = out
                    .iter()
                    .zip(x)
                    .map(|(o, t)| 2.0 * (o - t) * scale)
                    .collect();
                epoch_se += out.iter().zip(x).map(|(o, t)| (o - t).powi(2)).sum::<f64>();
                qbn.backward(&cache, &d_out);
            }
            opt.apply(&mut qbn)?;
        }
        last_mse = epoch_se / (inputs.len() * input_dim) as f64;
        history.push(last_mse);
        // plateau: the mean MSE of the last 10 epochs no longer improves on
        // the mean of the 10 before. Averaging rides out the transient loss
        // bumps that quantizer code flips cause.
        if history.len() >= 20 {
            let n = history.len();
            let recent: f64 = history[n - 10..].iter().sum::<f64>() / 10.0;
            let prior: f64 = history[n - 20..n - 10].iter().sum::<f64>() / 10.0;
            if recent > prior * (1.0 - 1e-4) {
                break;
            }
        }
    }
    Ok((qbn, last_mse))
}

/// Dataset MSE per dimension without updating anything.
pub fn qbn_mse(qbn: &Qbn<f64>, target: QbnTarget, records: &[TransitionRecord]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for r in records {
        let x = match target {
            QbnTarget::Obs => &r.obs,
            QbnTarget::Hidden => &r.h_after,
        };
        let (out, _) = qbn.forward(x);
        se += out.iter().zip(x).map(|(o, t)| (o - t).powi(2)).sum::<f64>();
        n += x.len();
    }
    se / n as f64
}

/// Maps raw transition records to ternary-code records.
pub fn discretize(
    records: &[TransitionRecord],
    qbn_obs: &Qbn<f64>,
    qbn_hidden: &Qbn<f64>,
) -> Result<Vec<DiscreteRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(DiscreteRecord {
                h_before_code: qbn_hidden.encode(&r.h_before)?,
                h_after_code: qbn_hidden.encode(&r.h_after)?,
                obs_code: qbn_obs.encode(&r.obs)?,
                action: r.action,
                raw_obs: r.obs.clone(),
            })
        })
        .collect()
}

/// Policy with both bottlenecks inserted; trained end-to-end during
/// fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertedPolicy {
    pub policy: GruPolicy<f64>,
    pub qbn_obs: Qbn<f64>,
    pub qbn_hidden: Qbn<f64>,
}

impl Net<f64> for InsertedPolicy {
    fn parameters(&self) -> Vec<&Parameter<f64>> {
        let mut p = self.policy.parameters();
        p.extend(self.qbn_obs.parameters());
        p.extend(self.qbn_hidden.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        let mut p = self.policy.parameters_mut();
        p.extend(self.qbn_obs.parameters_mut());
        p.extend(self.qbn_hidden.parameters_mut());
        p
    }
}

struct InsertedStepCache {
    obs_cache: QbnCache<f64>,
    hidden_in_cache: QbnCache<f64>,
    gru_cache: GruCache<f64>,
    hidden_out_cache: QbnCache<f64>,
    h_rec: Vec<f64>,
}

impl InsertedPolicy {
    /// One composite step: reconstruct the observation and the carried
    /// hidden state through their bottlenecks, advance the GRU, bottleneck
    /// the new hidden state, and read the heads off the reconstruction.
    fn forward_step(&self, h: &[f64], obs: &[f64]) -> (Vec<f64>, Vec<f64>, f64, InsertedStepCache) {
        let (o_rec, obs_cache) = self.qbn_obs.forward(obs);
        let (h_in_rec, hidden_in_cache) = self.qbn_hidden.forward(h);
        let (h_new, gru_cache) = self.policy.forward_step(&h_in_rec, &o_rec);
        let (h_rec, hidden_out_cache) = self.qbn_hidden.forward(&h_new);
        let (logits, value) = self.policy.heads(&h_rec);
        (
            h_new,
            logits,
            value,
            InsertedStepCache {
                obs_cache,
                hidden_in_cache,
                gru_cache,
                hidden_out_cache,
                h_rec,
            },
        )
    }

    pub fn greedy_step(&self, h: &[f64], obs: &[f64]) -> (Vec<f64>, usize) {
        let (h_new, logits, _, _) = self.forward_step(h, obs);
        (h_new, argmax(&logits))
    }

    /// A2C loss over trajectories recorded with this composite forward.
    /// Gradients flow through both bottlenecks (straight-through at the
    /// quantizers) and through time.
    pub fn a2c_loss(
        &mut self,
        trajectories: &[crate::rl::Trajectory],
        cfg: &TrainConfig,
        with_grad: bool,
        frozen_advantages: Option<&[Vec<f64>]>,
    ) -> Result<LossReport> {
        use crate::neural::gru::softmax;
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("no trajectories".into()));
        }
        let mut report = LossReport::default();
        for (ti, traj) in trajectories.iter().enumerate() {
            let returns = discounted_returns(traj, cfg.gamma);
            let mut h = self.policy.h0();
            let mut caches = Vec::with_capacity(traj.steps.len());
            let mut probs_all = Vec::with_capacity(traj.steps.len());
            let mut values = Vec::with_capacity(traj.steps.len());
            for step in &traj.steps {
                let (h_new, logits, value, cache) = self.forward_step(&h, &step.obs);
                probs_all.push(softmax(&logits));
                values.push(value);
                caches.push(cache);
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
                report.entropy -=
                    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
            }
            if with_grad {
                let mut d_h_next = vec![0.0; self.policy.hidden_dim];
                for t in (0..traj.steps.len()).rev() {
                    let step = &traj.steps[t];
                    let p = &probs_all[t];
                    let adv = advantage(t, &values);
                    let ent: f64 =
                        -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
                    let mut d_logits = vec![0.0; self.policy.action_dim];
                    for a in 0..self.policy.action_dim {
                        d_logits[a] = adv * (p[a] - if a == step.action { 1.0 } else { 0.0 });
                        if p[a] > 0.0 {
                            d_logits[a] += cfg.entropy_coef * p[a] * (p[a].ln() + ent);
                        }
                    }
                    let d_value = 2.0 * cfg.value_coef * (values[t] - returns[t]);
                    let cache = &caches[t];
                    // heads read the bottlenecked reconstruction
                    let mut d_h_rec = vec![0.0; self.policy.hidden_dim];
                    self.policy
                        .heads_backward(&cache.h_rec, &d_logits, d_value, &mut d_h_rec);
                    // hidden bottleneck after the GRU
                    let mut d_h_new = self.qbn_hidden.backward(&cache.hidden_out_cache, &d_h_rec);
                    for (a, b) in d_h_new.iter_mut().zip(&d_h_next) {
                        *a += *b;
                    }
                    // GRU step
                    let (d_h_in_rec, d_o_rec) =
                        self.policy.backward_step(&cache.gru_cache, &d_h_new);
                    // bottlenecks on the inputs
                    let d_h_prev = self.qbn_hidden.backward(&cache.hidden_in_cache, &d_h_in_rec);
                    let _ = self.qbn_obs.backward(&cache.obs_cache, &d_o_rec);
                    d_h_next = d_h_prev;
                }
            }
        }
        report.total =
            report.policy_loss + report.value_loss - cfg.entropy_coef * report.entropy;
        if !report.total.is_finite() {
            return Err(Error::NonFinite("inserted a2c loss".into()));
        }
        Ok(report)
    }

    /// One episode with the composite forward, epsilon-greedy.
    pub fn rollout(
        &self,
        sim_cfg: &SimConfig,
        trace: &WorkloadTrace,
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::rl::Trajectory> {
        use crate::neural::gru::softmax;
        use crate::rl::{StepRecord, Trajectory};
        let (mut sim, mut obs) = Simulator::<f64>::new(sim_cfg.clone(), trace.clone())?;
        let mut h = self.policy.h0();
        let mut steps = Vec::new();
        let mut makespan = 0;
        while !sim.is_done() {
            let obs_vec = obs.to_vec();
            let (h_new, logits, _, _) = self.forward_step(&h, &obs_vec);
            let action = if rng.random::<f64>() < epsilon {
                rng.random_range(0..self.policy.action_dim)
            } else {
                let probs = softmax(&logits);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            let r = sim.step(ACTIONS[action])?;
            steps.push(StepRecord {
                obs: obs_vec,
                hidden_before: h.clone(),
                action,
                reward: r.reward,
                done: r.done,
            });
            makespan = r.makespan_so_far;
            obs = r.observation;
            h = h_new;
        }
        Ok(Trajectory {
            steps,
            makespan,
            truncated: sim.state.truncated,
        })
    }
}

/// Greedy wrapper for the bottleneck-inserted controller.
pub struct InsertedActor<'a> {
    pub inserted: &'a InsertedPolicy,
    h: Vec<f64>,
}

impl<'a> InsertedActor<'a> {
    pub fn new(inserted: &'a InsertedPolicy) -> Self {
        let h = inserted.policy.h0();
        InsertedActor { inserted, h }
    }
}

impl crate::rl::Actor for InsertedActor<'_> {
    fn name(&self) -> &str {
        "drl-inserted"
    }

    fn begin_episode(&mut self) {
        self.h = self.inserted.policy.h0();
    }

    fn act(&mut self, obs: &crate::sim::Observation<f64>) -> crate::sim::Action {
        let (h_new, a) = self.inserted.greedy_step(&self.h, obs);
        self.h = h_new;
        ACTIONS[a]
    }
}

/// Continues A2C training with both bottlenecks inserted. Zero epochs
/// returns the components unchanged.
pub fn finetune_with_qbns(
    policy: GruPolicy<f64>,
    qbn_obs: Qbn<f64>,
    qbn_hidden: Qbn<f64>,
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    epochs: usize,
    train_cfg: &TrainConfig,
) -> Result<InsertedPolicy> {
    let mut inserted = InsertedPolicy {
        policy,
        qbn_obs,
        qbn_hidden,
    };
    if epochs == 0 {
        return Ok(inserted);
    }
    let mut opt = AdamState::new(&inserted, train_cfg.learning_rate, train_cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(0xF1E7));
    for _ in 0..epochs {
        let mut trajectories = Vec::with_capacity(train_cfg.episodes_per_epoch);
        for _ in 0..train_cfg.episodes_per_epoch {
            let trace = &traces[rng.random_range(0..traces.len())];
            let cfg = SimConfig {
                seed: rng.random(),
                ..sim_cfg.clone()
            };
            trajectories.push(inserted.rollout(&cfg, trace, train_cfg.epsilon, &mut rng)?);
        }
        inserted.zero_grads();
        inserted.a2c_loss(&trajectories, train_cfg, true, None)?;
        opt.apply(&mut inserted)?;
    }
    Ok(inserted)
}

const DATASET_MAGIC: &str = "# coremig-dataset v1";

/// Line-oriented dataset persistence; values keep full f64 precision.
pub fn write_dataset(
    path: &Path,
    records: &[TransitionRecord],
    policy_fingerprint: &str,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    out.push_str(&format!("# policy_fingerprint {policy_fingerprint}\n"));
    let (hd, od) = records
        .first()
        .map(|r| (r.h_before.len(), r.obs.len()))
        .unwrap_or((0, 0));
    out.push_str(&format!("# dims hidden={hd} obs={od}\n"));
    out.push_str(&format!("# records {}\n", records.len()));
    for r in records {
        out.push_str(&format!("{} {} {}", r.trace_id, r.step_index, r.action));
        for v in r.h_before.iter().chain(&r.obs).chain(&r.h_after) {
            out.push_str(&format!(" {v:.17e}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_dataset(path: &Path) -> Result<(Vec<TransitionRecord>, String)> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut fingerprint = String::new();
    let mut hd = 0usize;
    let mut od = 0usize;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        if lineno == 0 {
            if line != DATASET_MAGIC {
                return Err(Error::parse(&p, n, "missing dataset magic"));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("# policy_fingerprint ") {
            fingerprint = rest.to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("# dims ") {
            for part in rest.split_whitespace() {
                if let Some(v) = part.strip_prefix("hidden=") {
                    hd = v.parse().map_err(|_| Error::parse(&p, n, "bad hidden dim"))?;
                }
                if let Some(v) = part.strip_prefix("obs=") {
                    od = v.parse().map_err(|_| Error::parse(&p, n, "bad obs dim"))?;
                }
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let expected = 3 + 2 * hd + od;
        if fields.len() != expected {
            return Err(Error::parse(
                &p,
                n,
                format!("row has {} fields, expected {expected}", fields.len()),
            ));
        }
        let parse_f = |s: &str, field: usize| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(&p, n, format!("field {field}: invalid value")))
        };
        let trace_id = fields[0]
            .parse()
            .map_err(|_| Error::parse(&p, n, "invalid trace_id"))?;
        let step_index = fields[1]
            .parse()
            .map_err(|_| Error::parse(&p, n, "invalid step_index"))?;
        let action: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(&p, n, "invalid action"))?;
        if action >= crate::sim::ACTION_COUNT {
            return Err(Error::Invariant(format!("{p}:{n}: action {action} out of range")));
        }
        let mut idx = 3;
        let mut h_before = Vec::with_capacity(hd);
        for _ in 0..hd {
            h_before.push(parse_f(fields[idx], idx)?);
            idx += 1;
        }
        let mut obs = Vec::with_capacity(od);
        for _ in 0..od {
            obs.push(parse_f(fields[idx], idx)?);
            idx += 1;
        }
        let mut h_after = Vec::with_capacity(hd);
        for _ in 0..hd {
            h_after.push(parse_f(fields[idx], idx)?);
            idx += 1;
        }
        records.push(TransitionRecord {
            h_before,
            h_after,
            obs,
            action,
            trace_id,
            step_index,
        });
    }
    Ok((records, fingerprint))
}
