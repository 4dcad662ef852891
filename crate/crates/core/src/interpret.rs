//! State semantics for the extracted machine: per-state Fan-in/Fan-out
//! observation statistics and averaged pre-entry history windows, rendered
//! as a data file plus a plain-text report.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fsm::{fsm_step, Fsm};
use crate::qbn::Qbn;
use crate::rl::eval_seed;
use crate::sim::{Action, SimConfig, Simulator, OBS_DIM};
use crate::workload::WorkloadTrace;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 10;

/// One logged machine step: the state before, the state after, and the raw
/// observation that drove the transition.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    pub state_before: usize,
    pub state_after: usize,
    pub obs: Vec<f64>,
}

/// Closed-loop execution log, one trajectory per trace.
pub type TransitionLog = Vec<Vec<LoggedStep>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStats {
    pub action: usize,
    pub visit_count: u64,
    pub self_loop_count: u64,
    pub fan_in_count: u64,
    pub fan_out_count: u64,
    /// Means over raw observations; absent when the matching count is zero.
    pub fan_in_mean: Option<Vec<f64>>,
    pub fan_out_mean: Option<Vec<f64>>,
    pub entry_count: u64,
    /// W rows ordered oldest to newest; rows with zero samples stay zero.
    pub history_mean: Vec<Vec<f64>>,
    pub history_counts: Vec<u64>,
    /// Mean c_N / (c_K + c_R) per window position.
    pub capacity_ratio_series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretReport {
    pub window: usize,
    pub states: Vec<StateStats>,
}

/// Runs the machine closed-loop on every trace and logs each transition.
pub fn run_and_log(
    fsm: &Fsm,
    qbn_obs: &Qbn<f64>,
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    seed_base: u64,
) -> Result<TransitionLog> {
    let mut log = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        let cfg = SimConfig {
            seed: eval_seed(seed_base, i),
            ..sim_cfg.clone()
        };
        let (mut sim, mut obs) = Simulator::<f64>::new(cfg, trace.clone())?;
        let mut state = fsm.start_state;
        let mut steps = Vec::new();
        while !sim.is_done() {
            let obs_vec = obs.to_vec();
            let (next, action, _) = match fsm_step(fsm, state, &obs_vec, qbn_obs) {
                Ok(r) => r,
                // dead end: hold state, keep emitting its action
                Err(_) => (
                    state,
                    Action::from_index(fsm.action_of[state]).unwrap(),
                    true,
                ),
            };
            steps.push(LoggedStep {
                state_before: state,
                state_after: next,
                obs: obs_vec,
            });
            let r = sim.step(action)?;
            obs = r.observation;
            state = next;
        }
        log.push(steps);
    }
    Ok(log)
}

fn empty_stats(fsm: &Fsm, window: usize) -> Vec<StateStats> {
    (0..fsm.num_states())
        .map(|s| StateStats {
            action: fsm.action_of[s],
            visit_count: 0,
            self_loop_count: 0,
            fan_in_count: 0,
            fan_out_count: 0,
            fan_in_mean: None,
            fan_out_mean: None,
            entry_count: 0,
            history_mean: vec![vec![0.0; OBS_DIM]; window],
            history_counts: vec![0; window],
            capacity_ratio_series: vec![0.0; window],
        })
        .collect()
}

fn capacity_ratio(obs: &[f64]) -> f64 {
    let denom = obs[1] + obs[2];
    if denom == 0.0 {
        0.0
    } else {
        obs[0] / denom
    }
}

/// Fan-in/Fan-out accounting. Self-loop observations are excluded from both
/// means; a non-self transition s -> s' under observation o contributes o
/// to fan_out(s) and fan_in(s').
pub fn fan_stats(fsm: &Fsm, log: &TransitionLog, window: usize) -> InterpretReport {
    let n = fsm.num_states();
    let mut stats = empty_stats(fsm, window);
    let mut in_sum = vec![vec![0.0; OBS_DIM]; n];
    let mut out_sum = vec![vec![0.0; OBS_DIM]; n];
    for traj in log {
        for step in traj {
            stats[step.state_after].visit_count += 1;
            if step.state_before == step.state_after {
                stats[step.state_after].self_loop_count += 1;
                continue;
            }
            stats[step.state_before].fan_out_count += 1;
            stats[step.state_after].fan_in_count += 1;
            for (a, v) in out_sum[step.state_before].iter_mut().zip(&step.obs) {
                *a += *v;
            }
            for (a, v) in in_sum[step.state_after].iter_mut().zip(&step.obs) {
                *a += *v;
            }
        }
    }
    for s in 0..n {
        if stats[s].fan_in_count > 0 {
            let c = stats[s].fan_in_count as f64;
            stats[s].fan_in_mean = Some(in_sum[s].iter().map(|v| v / c).collect());
        }
        if stats[s].fan_out_count > 0 {
            let c = stats[s].fan_out_count as f64;
            stats[s].fan_out_mean = Some(out_sum[s].iter().map(|v| v / c).collect());
        }
    }
    InterpretReport {
        window,
        states: stats,
    }
}

/// Pre-entry history windows. For each entry into s at step t (transition
/// from a different state), the raw observations at steps t-W..t-1 are
/// collected; shorter prefixes are aligned to the window end. The entry
/// step itself is never included.
pub fn history_stats(fsm: &Fsm, log: &TransitionLog, window: usize) -> Result<InterpretReport> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let n = fsm.num_states();
    let mut stats = empty_stats(fsm, window);
    let mut sums = vec![vec![vec![0.0; OBS_DIM]; window]; n];
    let mut ratio_sums = vec![vec![0.0; window]; n];
    for traj in log {
        for (t, step) in traj.iter().enumerate() {
            if step.state_before == step.state_after {
                continue;
            }
            let s = step.state_after;
            stats[s].entry_count += 1;
            let avail = t.min(window);
            for k in 0..avail {
                // observation at step t-1-k lands at window position
                // window-1-k (newest at the end)
                let pos = window - 1 - k;
                let o = &traj[t - 1 - k].obs;
                for (a, v) in sums[s][pos].iter_mut().zip(o) {
                    *a += *v;
                }
                ratio_sums[s][pos] += capacity_ratio(o);
                stats[s].history_counts[pos] += 1;
            }
        }
    }
    for s in 0..n {
        for pos in 0..window {
            let c = stats[s].history_counts[pos];
            if c > 0 {
                stats[s].history_mean[pos] = sums[s][pos].iter().map(|v| v / c as f64).collect();
                stats[s].capacity_ratio_series[pos] = ratio_sums[s][pos] / c as f64;
            }
        }
    }
    Ok(InterpretReport {
        window,
        states: stats,
    })
}

/// Full analysis: closed-loop runs, fan statistics, and history windows
/// merged into one report.
pub fn interpret(
    fsm: &Fsm,
    qbn_obs: &Qbn<f64>,
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    seed_base: u64,
    window: usize,
) -> Result<InterpretReport> {
    let log = run_and_log(fsm, qbn_obs, sim_cfg, traces, seed_base)?;
    let fan = fan_stats(fsm, &log, window);
    let hist = history_stats(fsm, &log, window)?;
    let states = fan
        .states
        .into_iter()
        .zip(hist.states)
        .map(|(f, h)| StateStats {
            entry_count: h.entry_count,
            history_mean: h.history_mean,
            history_counts: h.history_counts,
            capacity_ratio_series: h.capacity_ratio_series,
            ..f
        })
        .collect();
    Ok(InterpretReport { window, states })
}

const COMPONENT_NAMES: [&str; 6] = [
    "share_N", "share_K", "share_R", "util_N", "util_K", "util_R",
];

/// Writes the JSON data file and a plain-text per-state table. Fan-in vs
/// fan-out deltas over the six system components are flagged when their
/// magnitude exceeds 0.05.
pub fn render_report(report: &InterpretReport, data_path: &Path, text_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    fs::write(data_path, json).map_err(|e| Error::io(data_path.display().to_string(), e))?;
    let mut out = String::new();
    let mut order: Vec<usize> = (0..report.states.len()).collect();
    order.sort_by_key(|&s| std::cmp::Reverse(report.states[s].visit_count));
    for &s in &order {
        let st = &report.states[s];
        let action = Action::from_index(st.action)
            .map(|a| a.label())
            .unwrap_or_else(|| "?".into());
        out.push_str(&format!(
            "state S{s}  action {action}  visits {}  self-loops {}\n",
            st.visit_count, st.self_loop_count
        ));
        if st.entry_count == 0 {
            out.push_str("  no entries\n\n");
            continue;
        }
        out.push_str(&format!(
            "  entries {}  fan-in {}  fan-out {}\n",
            st.entry_count, st.fan_in_count, st.fan_out_count
        ));
        match (&st.fan_in_mean, &st.fan_out_mean) {
            (Some(fin), Some(fout)) => {
                out.push_str("  component   fan-in    fan-out   delta\n");
                for (i, name) in COMPONENT_NAMES.iter().enumerate() {
                    let delta = fout[i] - fin[i];
                    let flag = if delta.abs() > 0.05 { "  *" } else { "" };
                    out.push_str(&format!(
                        "  {name:<10} {:>8.4} {:>8.4} {:>8.4}{flag}\n",
                        fin[i], fout[i], delta
                    ));
                }
            }
            _ => out.push_str("  fan means unavailable\n"),
        }
        let ratios: Vec<String> = st
            .capacity_ratio_series
            .iter()
            .map(|r| format!("{r:.3}"))
            .collect();
        out.push_str(&format!("  capacity ratio window: [{}]\n\n", ratios.join(", ")));
    }
    fs::write(text_path, out).map_err(|e| Error::io(text_path.display().to_string(), e))
}

pub fn read_report(path: &Path) -> Result<InterpretReport> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("report parse: {e}")))
}
