//! Fluid-model environment for the three-level storage system.
//!
//! Queued work is continuous volume (KB) processed up to per-level capacity.
//! Read misses are prefetched by KV and RV in parallel, then served at
//! NORMAL; writes are staged at NORMAL first, then written back by KV and RV
//! in parallel. Coupled KV/RV stages complete at the min of their cumulative
//! processed volumes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::workload::{IntervalWorkload, IoCatalog, IoKind, WorkloadTrace, CATALOG_LEN};
use crate::{Error, Result};

/// Observation width: 3 core shares + 3 utilizations + 14 ratios + count.
pub const OBS_DIM: usize = 21;
/// Number of discrete actions.
pub const ACTION_COUNT: usize = 7;

pub type Observation<S> = [S; OBS_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Normal,
    Kv,
    Rv,
}

pub const LEVELS: [Level; 3] = [Level::Normal, Level::Kv, Level::Rv];

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::Normal => 0,
            Level::Kv => 1,
            Level::Rv => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Level::Normal => "N",
            Level::Kv => "K",
            Level::Rv => "R",
        }
    }
}

/// Core migration actions. `Noop` keeps the current placement; `Xy` moves
/// one core from level X to level Y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Noop,
    N2K,
    N2R,
    K2N,
    K2R,
    R2N,
    R2K,
}

pub const ACTIONS: [Action; ACTION_COUNT] = [
    Action::Noop,
    Action::N2K,
    Action::N2R,
    Action::K2N,
    Action::K2R,
    Action::R2N,
    Action::R2K,
];

impl Action {
    pub fn index(self) -> usize {
        ACTIONS.iter().position(|&a| a == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Action> {
        ACTIONS.get(i).copied()
    }

    pub fn move_spec(self) -> Option<(Level, Level)> {
        match self {
            Action::Noop => None,
            Action::N2K => Some((Level::Normal, Level::Kv)),
            Action::N2R => Some((Level::Normal, Level::Rv)),
            Action::K2N => Some((Level::Kv, Level::Normal)),
            Action::K2R => Some((Level::Kv, Level::Rv)),
            Action::R2N => Some((Level::Rv, Level::Normal)),
            Action::R2K => Some((Level::Rv, Level::Kv)),
        }
    }

    /// Display label used in FSM exports, e.g. "N=>R".
    pub fn label(self) -> String {
        match self.move_spec() {
            None => "Noop".to_string(),
            Some((from, to)) => format!("{}=>{}", from.short(), to.short()),
        }
    }

    pub fn from_label(s: &str) -> Option<Action> {
        ACTIONS.iter().copied().find(|a| a.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Per-interval completed-volume fraction; sums to 1 over a full episode.
    Dense,
    /// Zero until done, then 1/K.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_cores: usize,
    pub core_capacity_kb: f64,
    pub cache_miss_rate: f64,
    pub migration_penalty: f64,
    pub idle_lambda: f64,
    pub min_cores_per_level: usize,
    pub horizon_factor: f64,
    pub q_ref: u64,
    pub reward_mode: RewardMode,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_cores: 12,
            core_capacity_kb: 1024.0,
            cache_miss_rate: 0.3,
            migration_penalty: 0.5,
            idle_lambda: 0.5,
            min_cores_per_level: 1,
            horizon_factor: 10.0,
            q_ref: 400,
            reward_mode: RewardMode::Dense,
            gamma: 0.99,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_cores_per_level == 0 {
            return Err(Error::Invariant("min_cores_per_level must be >= 1".into()));
        }
        if self.n_cores < 3 * self.min_cores_per_level {
            return Err(Error::Invariant(format!(
                "n_cores = {} < 3 * min_cores_per_level = {}",
                self.n_cores,
                3 * self.min_cores_per_level
            )));
        }
        if !(0.0..=1.0).contains(&self.cache_miss_rate) {
            return Err(Error::Invariant("cache_miss_rate out of [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.migration_penalty) {
            return Err(Error::Invariant("migration_penalty out of [0,1]".into()));
        }
        if self.idle_lambda < 0.0 {
            return Err(Error::Invariant("idle_lambda must be >= 0".into()));
        }
        if self.horizon_factor <= 1.0 {
            return Err(Error::Invariant("horizon_factor must be > 1".into()));
        }
        if self.core_capacity_kb <= 0.0 {
            return Err(Error::Invariant("core_capacity_kb must be > 0".into()));
        }
        if self.q_ref == 0 {
            return Err(Error::Invariant("q_ref must be > 0".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Invariant("gamma out of (0,1]".into()));
        }
        Ok(())
    }

    pub fn k_max(&self, t_len: usize) -> usize {
        (self.horizon_factor * t_len as f64).ceil() as usize
    }
}

/// Per-stage queue volumes in KB plus cumulative counters for the coupled
/// KV/RV stage pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageQueues<S> {
    pub prefetch_kv: S,
    pub prefetch_rv: S,
    pub prefetch_forwarded: S,
    pub normal_read: S,
    pub normal_write: S,
    pub writeback_kv: S,
    pub writeback_rv: S,
    pub cum_prefetch_kv: S,
    pub cum_prefetch_rv: S,
    pub cum_writeback_kv: S,
    pub cum_writeback_rv: S,
    pub writeback_credited: S,
}

impl<S: Scalar> StageQueues<S> {
    fn zero() -> Self {
        StageQueues {
            prefetch_kv: S::zero(),
            prefetch_rv: S::zero(),
            prefetch_forwarded: S::zero(),
            normal_read: S::zero(),
            normal_write: S::zero(),
            writeback_kv: S::zero(),
            writeback_rv: S::zero(),
            cum_prefetch_kv: S::zero(),
            cum_prefetch_rv: S::zero(),
            cum_writeback_kv: S::zero(),
            cum_writeback_rv: S::zero(),
            writeback_credited: S::zero(),
        }
    }

    pub fn all_empty(&self, eps: S) -> bool {
        self.prefetch_kv <= eps
            && self.prefetch_rv <= eps
            && self.normal_read <= eps
            && self.normal_write <= eps
            && self.writeback_kv <= eps
            && self.writeback_rv <= eps
            && (self.cum_prefetch_kv.min(self.cum_prefetch_rv) - self.prefetch_forwarded) <= eps
            && (self.cum_writeback_kv.min(self.cum_writeback_rv) - self.writeback_credited) <= eps
    }

    pub fn min_queue(&self) -> S {
        [
            self.prefetch_kv,
            self.prefetch_rv,
            self.normal_read,
            self.normal_write,
            self.writeback_kv,
            self.writeback_rv,
        ]
        .into_iter()
        .fold(S::infinity(), |a, b| a.min(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState<S> {
    pub cores: [usize; 3],
    pub queues: StageQueues<S>,
    pub interval: usize,
    pub last_util: [S; 3],
    pub penalized_core_level: Option<Level>,
    pub injected_total_kb: S,
    pub completed_total_kb: S,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S> {
    pub observation: Observation<S>,
    pub reward: S,
    pub done: bool,
    pub makespan_so_far: usize,
}

/// Per-interval demand decomposed by stage: cache-hit read volume served at
/// NORMAL, miss volume prefetched by KV+RV, and write volume.
pub fn decompose_demand<S: Scalar>(
    iw: &IntervalWorkload,
    catalog: &IoCatalog,
    cache_miss_rate: f64,
) -> (S, S, S) {
    let mut hit = 0.0f64;
    let mut miss = 0.0f64;
    let mut write = 0.0f64;
    for i in 0..CATALOG_LEN {
        let requests = (iw.count as f64 * iw.ratios[i]).round();
        let volume = requests * catalog.entry(i).size_kb as f64;
        match catalog.entry(i).kind {
            IoKind::Read => {
                hit += (1.0 - cache_miss_rate) * volume;
                miss += cache_miss_rate * volume;
            }
            IoKind::Write => write += volume,
        }
    }
    (S::of(hit), S::of(miss), S::of(write))
}

/// Total terminal volume of a trace under a given miss rate (hit + miss +
/// write, each request counted once).
pub fn trace_volume<S: Scalar>(trace: &WorkloadTrace, cache_miss_rate: f64) -> S {
    let mut total = S::zero();
    for iw in &trace.intervals {
        let (h, m, w) = decompose_demand::<S>(iw, &trace.catalog, cache_miss_rate);
        total += h + m + w;
    }
    total
}

#[derive(Debug, Clone)]
pub struct Simulator<S: Scalar> {
    pub config: SimConfig,
    pub trace: WorkloadTrace,
    pub state: SimState<S>,
    rng: ChaCha8Rng,
    total_volume: S,
    done: bool,
    empty_eps: S,
}

impl<S: Scalar> Simulator<S> {
    pub fn new(config: SimConfig, trace: WorkloadTrace) -> Result<(Self, Observation<S>)> {
        config.validate()?;
        trace.validate()?;
        let n = config.n_cores;
        let base = n / 3;
        let cores = [n - 2 * base, base, base];
        let state = SimState {
            cores,
            queues: StageQueues::zero(),
            interval: 0,
            last_util: [S::zero(); 3],
            penalized_core_level: None,
            injected_total_kb: S::zero(),
            completed_total_kb: S::zero(),
            truncated: false,
        };
        let total_volume = trace_volume::<S>(&trace, config.cache_miss_rate);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sim = Simulator {
            config,
            trace,
            state,
            rng,
            total_volume,
            done: false,
            empty_eps: S::of(1e-9),
        };
        let obs = sim.observation();
        Ok((sim, obs))
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn t_len(&self) -> usize {
        self.trace.len()
    }

    pub fn total_volume(&self) -> S {
        self.total_volume
    }

    /// Observation for the upcoming interval: core shares, last utilizations,
    /// the next interval's mixture and normalized count.
    pub fn observation(&self) -> Observation<S> {
        let mut obs = [S::zero(); OBS_DIM];
        let n = S::of_usize(self.config.n_cores);
        for l in 0..3 {
            obs[l] = S::of_usize(self.state.cores[l]) / n;
            obs[3 + l] = self.state.last_util[l];
        }
        if self.state.interval < self.trace.len() {
            let iw = &self.trace.intervals[self.state.interval];
            for i in 0..CATALOG_LEN {
                obs[6 + i] = S::of(iw.ratios[i]);
            }
            let q = S::of(iw.count as f64 / self.config.q_ref as f64);
            obs[6 + CATALOG_LEN] = q.min(S::of(2.0));
        }
        obs
    }

    pub fn legal_actions(&self) -> Vec<Action> {
        legal_actions(&self.state.cores, &self.config)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult<S>> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let cfg = &self.config;
        let m = S::of(cfg.core_capacity_kb);
        let n = cfg.n_cores;

        // (1) apply action, coercing illegal moves to Noop; the moved core is
        // penalized for this interval at its destination level
        let mut penalized: Option<Level> = None;
        if let Some((from, to)) = action.move_spec() {
            if self.state.cores[from.index()] > cfg.min_cores_per_level {
                self.state.cores[from.index()] -= 1;
                self.state.cores[to.index()] += 1;
                penalized = Some(to);
            }
        }
        self.state.penalized_core_level = penalized;

        // (2) idle cores: count ~ Poisson(lambda) capped at N, chosen
        // uniformly without replacement; index blocks are [NORMAL | KV | RV]
        let n_idle = if cfg.idle_lambda > 0.0 {
            let draw: f64 = Poisson::new(cfg.idle_lambda)
                .expect("positive lambda")
                .sample(&mut self.rng);
            (draw as usize).min(n)
        } else {
            0
        };
        let idle = rand::seq::index::sample(&mut self.rng, n, n_idle);
        let mut idle_per_level = [0usize; 3];
        let bounds = [
            self.state.cores[0],
            self.state.cores[0] + self.state.cores[1],
        ];
        // the penalized core is the last index of its destination block
        let penalized_idx = penalized.map(|lvl| match lvl {
            Level::Normal => self.state.cores[0] - 1,
            Level::Kv => bounds[1] - 1,
            Level::Rv => n - 1,
        });
        let mut penalized_idle = false;
        for idx in idle.iter() {
            let lvl = if idx < bounds[0] {
                0
            } else if idx < bounds[1] {
                1
            } else {
                2
            };
            idle_per_level[lvl] += 1;
            if Some(idx) == penalized_idx {
                penalized_idle = true;
            }
        }

        // (3) per-level capacity
        let mut cap = [S::zero(); 3];
        for l in 0..3 {
            let active = self.state.cores[l] - idle_per_level[l];
            cap[l] = S::of_usize(active) * m;
        }
        if let (Some(lvl), false) = (penalized, penalized_idle) {
            let l = lvl.index();
            if self.state.cores[l] > idle_per_level[l] {
                cap[l] = cap[l] - S::of(cfg.migration_penalty) * m;
            }
        }

        // (4) inject this interval's demand
        if self.state.interval < self.trace.len() {
            let iw = &self.trace.intervals[self.state.interval];
            let (hit, miss, write) = decompose_demand::<S>(iw, &self.trace.catalog, cfg.cache_miss_rate);
            let q = &mut self.state.queues;
            q.normal_read += hit;
            q.prefetch_kv += miss;
            q.prefetch_rv += miss;
            q.normal_write += write;
            self.state.injected_total_kb += hit + miss + write;
        }

        // (5) process queues, capacity split proportionally to queue volume
        let q = &mut self.state.queues;
        let (pr_read, pr_write) = split_process(q.normal_read, q.normal_write, cap[0]);
        q.normal_read = q.normal_read - pr_read;
        q.normal_write = q.normal_write - pr_write;
        let (pf_kv, wb_kv) = split_process(q.prefetch_kv, q.writeback_kv, cap[1]);
        q.prefetch_kv = q.prefetch_kv - pf_kv;
        q.writeback_kv = q.writeback_kv - wb_kv;
        let (pf_rv, wb_rv) = split_process(q.prefetch_rv, q.writeback_rv, cap[2]);
        q.prefetch_rv = q.prefetch_rv - pf_rv;
        q.writeback_rv = q.writeback_rv - wb_rv;
        q.cum_prefetch_kv += pf_kv;
        q.cum_prefetch_rv += pf_rv;
        q.cum_writeback_kv += wb_kv;
        q.cum_writeback_rv += wb_rv;

        // (6) end-of-interval forwards, visible next interval
        let fwd = q.cum_prefetch_kv.min(q.cum_prefetch_rv) - q.prefetch_forwarded;
        q.normal_read += fwd;
        q.prefetch_forwarded += fwd;
        q.writeback_kv += pr_write;
        q.writeback_rv += pr_write;

        // (7) utilizations
        let processed = [pr_read + pr_write, pf_kv + wb_kv, pf_rv + wb_rv];
        for l in 0..3 {
            self.state.last_util[l] = if cap[l] > S::zero() {
                (processed[l] / cap[l]).min(S::one()).max(S::zero())
            } else {
                S::zero()
            };
        }

        // (8) terminal completions: reads finishing at NORMAL plus coupled
        // write-back completions
        let wb_done = q.cum_writeback_kv.min(q.cum_writeback_rv) - q.writeback_credited;
        q.writeback_credited += wb_done;
        let completed = pr_read + wb_done;
        self.state.completed_total_kb += completed;

        // (9) advance the clock and check termination
        self.state.interval += 1;
        let t_len = self.trace.len();
        let k_max = cfg.k_max(t_len);
        let eps = self.empty_eps;
        let drained = self.state.interval >= t_len && self.state.queues.all_empty(eps);
        if drained {
            self.done = true;
        } else if self.state.interval >= k_max {
            self.done = true;
            self.state.truncated = true;
        }

        // (10) reward
        let reward = match cfg.reward_mode {
            RewardMode::Dense => {
                if self.total_volume > S::zero() {
                    completed / self.total_volume
                } else {
                    S::zero()
                }
            }
            RewardMode::Terminal => {
                if self.done {
                    S::one() / S::of_usize(self.state.interval)
                } else {
                    S::zero()
                }
            }
        };

        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            makespan_so_far: self.state.interval,
        })
    }
}

/// Work-conserving proportional split of `cap` across two queues.
fn split_process<S: Scalar>(q1: S, q2: S, cap: S) -> (S, S) {
    let total = q1 + q2;
    if total <= cap {
        (q1, q2)
    } else if total > S::zero() {
        let f = cap / total;
        (q1 * f, q2 * f)
    } else {
        (S::zero(), S::zero())
    }
}

pub fn legal_actions(cores: &[usize; 3], config: &SimConfig) -> Vec<Action> {
    ACTIONS
        .iter()
        .copied()
        .filter(|a| match a.move_spec() {
            None => true,
            Some((from, _)) => cores[from.index()] > config.min_cores_per_level,
        })
        .collect()
}
