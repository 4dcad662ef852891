//! Explicit finite state machine distilled from the quantized policy:
//! extraction from discrete transition records, Moore minimization,
//! standalone execution with nearest-observation fallback, fidelity
//! measurement, and table/graph export.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::neural::gru::GruPolicy;
use crate::qbn::{DiscreteRecord, Qbn};
use crate::rl::{evaluate_policy, eval_seed, Actor, EvalResult};
use crate::sim::{Action, Observation, SimConfig, Simulator, ACTION_COUNT};
use crate::workload::WorkloadTrace;
use crate::{Error, Result};

/// Distance used when an observation code has no transition entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackMetric {
    Euclidean,
    Cosine,
}

/// Raw-observation statistics stored per (state, obs code) so unseen
/// observations can be routed to the nearest known one.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsEntry {
    pub obs_code: usize,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Deterministic Moore machine over ternary hidden codes. The action is a
/// property of the state being entered; a step consumes one observation,
/// follows the transition, and emits the new state's action.
#[derive(Debug, Clone, PartialEq)]
pub struct Fsm {
    pub state_codes: Vec<Vec<i8>>,
    pub obs_codes: Vec<Vec<i8>>,
    pub transitions: HashMap<(usize, usize), usize>,
    pub action_of: Vec<usize>,
    pub start_state: usize,
    pub obs_memory: Vec<Vec<ObsEntry>>,
    pub visit_counts: Vec<u64>,
    pub conflict_rate: f64,
    pub consistency_rate: f64,
    pub metric: FallbackMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub open_loop_agreement: f64,
    pub closed_loop_mean_k_fsm: f64,
    pub closed_loop_mean_k_drl: f64,
    pub fallback_rate: f64,
}

impl Fsm {
    pub fn num_states(&self) -> usize {
        self.state_codes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_codes.len();
        if self.start_state >= n {
            return Err(Error::MalformedMachine("start state out of range".into()));
        }
        if self.action_of.len() != n || self.obs_memory.len() != n || self.visit_counts.len() != n
        {
            return Err(Error::MalformedMachine("per-state table length mismatch".into()));
        }
        for ((s, o), t) in &self.transitions {
            if *s >= n || *t >= n || *o >= self.obs_codes.len() {
                return Err(Error::MalformedMachine("transition index out of range".into()));
            }
        }
        for a in &self.action_of {
            if *a >= ACTION_COUNT {
                return Err(Error::MalformedMachine("action index out of range".into()));
            }
        }
        for (s, entries) in self.obs_memory.iter().enumerate() {
            for e in entries {
                if !self.transitions.contains_key(&(s, e.obs_code)) {
                    return Err(Error::MalformedMachine(
                        "memory entry without matching transition".into(),
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.conflict_rate)
            || !(0.0..=1.0).contains(&self.consistency_rate)
        {
            return Err(Error::MalformedMachine("rate outside [0,1]".into()));
        }
        Ok(())
    }
}

fn intern(index: &mut HashMap<Vec<i8>, usize>, codes: &mut Vec<Vec<i8>>, code: &[i8]) -> usize {
    if let Some(&id) = index.get(code) {
        return id;
    }
    let id = codes.len();
    index.insert(code.to_vec(), id);
    codes.push(code.to_vec());
    id
}

/// Builds the machine from discrete records. Transition and action
/// conflicts (quantized aliasing) are resolved by majority vote; both
/// disagreement rates are reported on the machine.
pub fn extract_fsm(
    records: &[DiscreteRecord],
    policy: &GruPolicy<f64>,
    qbn_hidden: &Qbn<f64>,
) -> Result<Fsm> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no discrete records".into()));
    }
    let start_code = qbn_hidden.encode(&policy.h0())?;
    let mut state_index: HashMap<Vec<i8>, usize> = HashMap::new();
    let mut state_codes: Vec<Vec<i8>> = Vec::new();
    let mut obs_index: HashMap<Vec<i8>, usize> = HashMap::new();
    let mut obs_codes: Vec<Vec<i8>> = Vec::new();
    // votes: (pre, obs) -> target -> count; post -> action -> count
    let mut tvotes: HashMap<(usize, usize), BTreeMap<usize, usize>> = HashMap::new();
    let mut avotes: HashMap<usize, [usize; ACTION_COUNT]> = HashMap::new();
    let mut pre_avotes: HashMap<usize, [usize; ACTION_COUNT]> = HashMap::new();
    let mut obs_acc: HashMap<(usize, usize), (Vec<f64>, usize)> = HashMap::new();
    for r in records {
        let pre = intern(&mut state_index, &mut state_codes, &r.h_before_code);
        let post = intern(&mut state_index, &mut state_codes, &r.h_after_code);
        let oc = intern(&mut obs_index, &mut obs_codes, &r.obs_code);
        *tvotes.entry((pre, oc)).or_default().entry(post).or_insert(0) += 1;
        avotes.entry(post).or_insert([0; ACTION_COUNT])[r.action] += 1;
        pre_avotes.entry(pre).or_insert([0; ACTION_COUNT])[r.action] += 1;
        let acc = obs_acc
            .entry((pre, oc))
            .or_insert_with(|| (vec![0.0; r.raw_obs.len()], 0));
        for (a, v) in acc.0.iter_mut().zip(&r.raw_obs) {
            *a += *v;
        }
        acc.1 += 1;
    }
    let start_state = *state_index
        .get(&start_code)
        .ok_or_else(|| Error::Invariant("start code never observed in records".into()))?;
    let n = state_codes.len();
    let mut transitions = HashMap::new();
    let mut conflicts = 0usize;
    for ((pre, oc), targets) in &tvotes {
        let (&best, &best_n) = targets.iter().max_by_key(|(_, &c)| c).unwrap();
        let total: usize = targets.values().sum();
        conflicts += total - best_n;
        transitions.insert((*pre, *oc), best);
    }
    let mut action_of = vec![0usize; n];
    let mut consistent = 0usize;
    let mut action_votes_total = 0usize;
    for s in 0..n {
        // states only ever seen as a predecessor (the start state,
        // typically) fall back to the majority action taken out of them
        let votes = avotes.get(&s).or_else(|| pre_avotes.get(&s));
        if let Some(v) = votes {
            action_of[s] = v
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
        }
        if let Some(v) = avotes.get(&s) {
            consistent += v[action_of[s]];
            action_votes_total += v.iter().sum::<usize>();
        }
    }
    let mut obs_memory: Vec<Vec<ObsEntry>> = vec![Vec::new(); n];
    for ((pre, oc), (sum, count)) in obs_acc {
        obs_memory[pre].push(ObsEntry {
            obs_code: oc,
            mean: sum.iter().map(|v| v / count as f64).collect(),
            count,
        });
    }
    for entries in &mut obs_memory {
        entries.sort_by_key(|e| e.obs_code);
    }
    let mut visit_counts = vec![0u64; n];
    for r in records {
        visit_counts[state_index[&r.h_after_code]] += 1;
    }
    let fsm = Fsm {
        state_codes,
        obs_codes,
        transitions,
        action_of,
        start_state,
        obs_memory,
        visit_counts,
        conflict_rate: conflicts as f64 / records.len() as f64,
        consistency_rate: if action_votes_total == 0 {
            1.0
        } else {
            consistent as f64 / action_votes_total as f64
        },
        metric: FallbackMetric::Euclidean,
    };
    fsm.validate()?;
    Ok(fsm)
}

fn distance(metric: FallbackMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        FallbackMetric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt(),
        FallbackMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                2.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// One machine step: encode the raw observation, follow the matching
/// transition (or the nearest remembered observation's transition), and
/// emit the entered state's action. The bool reports fallback use.
pub fn fsm_step(
    fsm: &Fsm,
    state_id: usize,
    raw_obs: &[f64],
    qbn_obs: &Qbn<f64>,
) -> Result<(usize, Action, bool)> {
    if state_id >= fsm.num_states() {
        return Err(Error::InvalidArgument(format!("state {state_id} out of range")));
    }
    let code = qbn_obs.encode(raw_obs)?;
    let known = fsm
        .obs_codes
        .iter()
        .position(|c| c == &code)
        .and_then(|oc| fsm.transitions.get(&(state_id, oc)).copied().map(|t| (oc, t)));
    let (next, fallback) = match known {
        Some((_, t)) => (t, false),
        None => {
            let entries = &fsm.obs_memory[state_id];
            let best = entries
                .iter()
                .min_by(|a, b| {
                    distance(fsm.metric, raw_obs, &a.mean)
                        .partial_cmp(&distance(fsm.metric, raw_obs, &b.mean))
                        .unwrap()
                })
                .ok_or_else(|| {
                    Error::MalformedMachine(format!(
                        "state {state_id} has no outgoing transitions or memory"
                    ))
                })?;
            (fsm.transitions[&(state_id, best.obs_code)], true)
        }
    };
    Ok((next, Action::from_index(fsm.action_of[next]).unwrap(), fallback))
}

/// Removes unreachable states and merges Moore-equivalent ones (same
/// action, equivalent transition rows; absent entries are a distinct
/// symbol so merging never invents behavior). States are relabeled in
/// breadth-first order from the start so the result is canonical.
pub fn minimize_fsm(fsm: &Fsm) -> Fsm {
    let n = fsm.num_states();
    // reachable set
    let mut reach = vec![false; n];
    let mut queue = VecDeque::from([fsm.start_state]);
    reach[fsm.start_state] = true;
    while let Some(s) = queue.pop_front() {
        for oc in 0..fsm.obs_codes.len() {
            if let Some(&t) = fsm.transitions.get(&(s, oc)) {
                if !reach[t] {
                    reach[t] = true;
                    queue.push_back(t);
                }
            }
        }
    }
    // partition refinement; class signature = (action, per-symbol target
    // class with usize::MAX for absent)
    let mut class: Vec<usize> = (0..n).map(|s| fsm.action_of[s]).collect();
    loop {
        let mut sig_index: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let mut next_class = vec![0usize; n];
        for s in 0..n {
            if !reach[s] {
                continue;
            }
            let row: Vec<usize> = (0..fsm.obs_codes.len())
                .map(|oc| match fsm.transitions.get(&(s, oc)) {
                    Some(&t) => class[t],
                    None => usize::MAX,
                })
                .collect();
            let next = sig_index.len();
            let id = *sig_index.entry((class[s], row)).or_insert(next);
            next_class[s] = id;
        }
        let stable = (0..n)
            .filter(|&s| reach[s])
            .all(|s| (0..n).filter(|&t| reach[t]).all(|t| {
                (class[s] == class[t]) == (next_class[s] == next_class[t])
            }));
        class = next_class;
        if stable {
            break;
        }
    }
    // canonical order: BFS over classes from the start, symbols ascending
    let mut order: Vec<usize> = Vec::new();
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut queue = VecDeque::from([fsm.start_state]);
    seen.insert(class[fsm.start_state], 0);
    order.push(fsm.start_state);
    while let Some(s) = queue.pop_front() {
        for oc in 0..fsm.obs_codes.len() {
            if let Some(&t) = fsm.transitions.get(&(s, oc)) {
                if !seen.contains_key(&class[t]) {
                    seen.insert(class[t], order.len());
                    order.push(t);
                    queue.push_back(t);
                }
            }
        }
    }
    let m = order.len();
    let new_id = |s: usize| seen[&class[s]];
    let mut state_codes = vec![Vec::new(); m];
    let mut action_of = vec![0usize; m];
    let mut visit_counts = vec![0u64; m];
    let mut memory_acc: Vec<HashMap<usize, (Vec<f64>, usize)>> = vec![HashMap::new(); m];
    let mut transitions = HashMap::new();
    for s in 0..n {
        if !reach[s] {
            continue;
        }
        let id = new_id(s);
        // representative fingerprint: the BFS representative's code
        if state_codes[id].is_empty() {
            state_codes[id] = fsm.state_codes[order[id]].clone();
        }
        action_of[id] = fsm.action_of[s];
        visit_counts[id] += fsm.visit_counts[s];
        for oc in 0..fsm.obs_codes.len() {
            if let Some(&t) = fsm.transitions.get(&(s, oc)) {
                transitions.insert((id, oc), new_id(t));
            }
        }
        for e in &fsm.obs_memory[s] {
            let acc = memory_acc[id]
                .entry(e.obs_code)
                .or_insert_with(|| (vec![0.0; e.mean.len()], 0));
            for (a, v) in acc.0.iter_mut().zip(&e.mean) {
                *a += *v * e.count as f64;
            }
            acc.1 += e.count;
        }
    }
    let obs_memory: Vec<Vec<ObsEntry>> = memory_acc
        .into_iter()
        .map(|acc| {
            let mut entries: Vec<ObsEntry> = acc
                .into_iter()
                .map(|(oc, (sum, count))| ObsEntry {
                    obs_code: oc,
                    mean: sum.iter().map(|v| v / count as f64).collect(),
                    count,
                })
                .collect();
            entries.sort_by_key(|e| e.obs_code);
            entries
        })
        .collect();
    Fsm {
        state_codes,
        obs_codes: fsm.obs_codes.clone(),
        transitions,
        action_of,
        start_state: 0,
        obs_memory,
        visit_counts,
        conflict_rate: fsm.conflict_rate,
        consistency_rate: fsm.consistency_rate,
        metric: fsm.metric,
    }
}

/// Standalone controller; owns its cursor and fallback counter so one
/// machine can back any number of concurrent executors.
pub struct FsmActor<'a> {
    pub fsm: &'a Fsm,
    pub qbn_obs: &'a Qbn<f64>,
    state: usize,
    pub fallbacks: usize,
    pub steps: usize,
}

impl<'a> FsmActor<'a> {
    pub fn new(fsm: &'a Fsm, qbn_obs: &'a Qbn<f64>) -> Self {
        FsmActor {
            fsm,
            qbn_obs,
            state: fsm.start_state,
            fallbacks: 0,
            steps: 0,
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Actor for FsmActor<'_> {
    fn name(&self) -> &str {
        "fsm"
    }

    fn begin_episode(&mut self) {
        self.state = self.fsm.start_state;
    }

    fn act(&mut self, obs: &Observation<f64>) -> Action {
        self.steps += 1;
        match fsm_step(self.fsm, self.state, obs, self.qbn_obs) {
            Ok((next, action, fb)) => {
                if fb {
                    self.fallbacks += 1;
                }
                self.state = next;
                action
            }
            // dead end (state only ever seen at an episode boundary):
            // hold position and emit the current state's action
            Err(_) => {
                self.fallbacks += 1;
                Action::from_index(self.fsm.action_of[self.state]).unwrap()
            }
        }
    }
}

/// Open-loop agreement on the DRL controller's own trajectories plus a
/// paired-seed closed-loop makespan comparison.
pub fn fidelity(
    fsm: &Fsm,
    qbn_obs: &Qbn<f64>,
    drl: &mut dyn Actor,
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    seed_base: u64,
) -> Result<FidelityReport> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for (i, trace) in traces.iter().enumerate() {
        let cfg = SimConfig {
            seed: eval_seed(seed_base, i),
            ..sim_cfg.clone()
        };
        let (mut sim, mut obs) = Simulator::<f64>::new(cfg, trace.clone())?;
        drl.begin_episode();
        let mut mirror = FsmActor::new(fsm, qbn_obs);
        mirror.begin_episode();
        while !sim.is_done() {
            let a_drl = drl.act(&obs);
            let a_fsm = mirror.act(&obs);
            if a_drl == a_fsm {
                agree += 1;
            }
            total += 1;
            let r = sim.step(a_drl)?;
            obs = r.observation;
        }
    }
    let drl_eval: EvalResult = evaluate_policy(drl, sim_cfg, traces, seed_base)?;
    let mut fsm_actor = FsmActor::new(fsm, qbn_obs);
    let fsm_eval = evaluate_policy(&mut fsm_actor, sim_cfg, traces, seed_base)?;
    Ok(FidelityReport {
        open_loop_agreement: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
        closed_loop_mean_k_fsm: fsm_eval.mean_k,
        closed_loop_mean_k_drl: drl_eval.mean_k,
        fallback_rate: if fsm_actor.steps == 0 {
            0.0
        } else {
            fsm_actor.fallbacks as f64 / fsm_actor.steps as f64
        },
    })
}

const FSM_MAGIC: &str = "# coremig-fsm v1";

fn code_str(code: &[i8]) -> String {
    code.iter()
        .map(|&c| match c {
            -1 => '-',
            0 => '0',
            _ => '+',
        })
        .collect()
}

fn parse_code(s: &str, path: &str, line: usize) -> Result<Vec<i8>> {
    s.chars()
        .map(|ch| match ch {
            '-' => Ok(-1),
            '0' => Ok(0),
            '+' => Ok(1),
            _ => Err(Error::parse(path, line, format!("bad code char '{ch}'"))),
        })
        .collect()
}

/// Lossless table export. Layout: header, states (id, action, visits,
/// fingerprint), observation codes, start id, transition triples, memory
/// rows with full-precision means.
pub fn export_fsm_table(fsm: &Fsm, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(FSM_MAGIC);
    out.push('\n');
    let metric = match fsm.metric {
        FallbackMetric::Euclidean => "euclidean",
        FallbackMetric::Cosine => "cosine",
    };
    out.push_str(&format!("# metric {metric}\n"));
    out.push_str(&format!("# conflict_rate {:.17e}\n", fsm.conflict_rate));
    out.push_str(&format!("# consistency_rate {:.17e}\n", fsm.consistency_rate));
    out.push_str(&format!("states {}\n", fsm.num_states()));
    for (i, code) in fsm.state_codes.iter().enumerate() {
        out.push_str(&format!(
            "state {i} {} {} {}\n",
            Action::from_index(fsm.action_of[i]).unwrap().label(),
            fsm.visit_counts[i],
            code_str(code)
        ));
    }
    out.push_str(&format!("obs_codes {}\n", fsm.obs_codes.len()));
    for (i, code) in fsm.obs_codes.iter().enumerate() {
        out.push_str(&format!("obs {i} {}\n", code_str(code)));
    }
    out.push_str(&format!("start {}\n", fsm.start_state));
    let mut trans: Vec<(&(usize, usize), &usize)> = fsm.transitions.iter().collect();
    trans.sort();
    out.push_str(&format!("transitions {}\n", trans.len()));
    for ((s, o), t) in trans {
        out.push_str(&format!("t {s} {o} {t}\n"));
    }
    let mem_rows: usize = fsm.obs_memory.iter().map(|m| m.len()).sum();
    out.push_str(&format!("memory {mem_rows}\n"));
    for (s, entries) in fsm.obs_memory.iter().enumerate() {
        for e in entries {
            out.push_str(&format!("m {s} {} {}", e.obs_code, e.count));
            for v in &e.mean {
                out.push_str(&format!(" {v:.17e}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn import_fsm_table(path: &Path) -> Result<Fsm> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut lines = text.lines().enumerate();
    let mut expect = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::parse(&p, 0, format!("truncated file, expected {what}")))
    };
    let (n1, l1) = expect("magic")?;
    if l1 != FSM_MAGIC {
        return Err(Error::parse(&p, n1, "missing fsm magic"));
    }
    let (n2, l2) = expect("metric")?;
    let metric = match l2.strip_prefix("# metric ") {
        Some("euclidean") => FallbackMetric::Euclidean,
        Some("cosine") => FallbackMetric::Cosine,
        _ => return Err(Error::parse(&p, n2, "bad metric line")),
    };
    let parse_rate = |line: usize, l: &str, key: &str| -> Result<f64> {
        l.strip_prefix(key)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(&p, line, format!("bad {key} line")))
    };
    let (n3, l3) = expect("conflict_rate")?;
    let conflict_rate = parse_rate(n3, l3, "# conflict_rate")?;
    let (n4, l4) = expect("consistency_rate")?;
    let consistency_rate = parse_rate(n4, l4, "# consistency_rate")?;
    let parse_count = |line: usize, l: &str, key: &str| -> Result<usize> {
        l.strip_prefix(key)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(&p, line, format!("bad {key} line")))
    };
    let (n5, l5) = expect("states")?;
    let n_states = parse_count(n5, l5, "states")?;
    let mut state_codes = vec![Vec::new(); n_states];
    let mut action_of = vec![0usize; n_states];
    let mut visit_counts = vec![0u64; n_states];
    for _ in 0..n_states {
        let (ln, l) = expect("state row")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 || f[0] != "state" {
            return Err(Error::parse(&p, ln, "bad state row"));
        }
        let id: usize = f[1].parse().map_err(|_| Error::parse(&p, ln, "bad state id"))?;
        if id >= n_states {
            return Err(Error::parse(&p, ln, "state id out of range"));
        }
        action_of[id] = Action::from_label(f[2])
            .ok_or_else(|| Error::parse(&p, ln, "unknown action label"))?
            .index();
        visit_counts[id] = f[3].parse().map_err(|_| Error::parse(&p, ln, "bad visits"))?;
        state_codes[id] = parse_code(f[4], &p, ln)?;
    }
    let (n6, l6) = expect("obs_codes")?;
    let n_obs = parse_count(n6, l6, "obs_codes")?;
    let mut obs_codes = vec![Vec::new(); n_obs];
    for _ in 0..n_obs {
        let (ln, l) = expect("obs row")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 || f[0] != "obs" {
            return Err(Error::parse(&p, ln, "bad obs row"));
        }
        let id: usize = f[1].parse().map_err(|_| Error::parse(&p, ln, "bad obs id"))?;
        if id >= n_obs {
            return Err(Error::parse(&p, ln, "obs id out of range"));
        }
        obs_codes[id] = parse_code(f[2], &p, ln)?;
    }
    let (n7, l7) = expect("start")?;
    let start_state = parse_count(n7, l7, "start")?;
    let (n8, l8) = expect("transitions")?;
    let n_trans = parse_count(n8, l8, "transitions")?;
    let mut transitions = HashMap::new();
    for _ in 0..n_trans {
        let (ln, l) = expect("transition row")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 4 || f[0] != "t" {
            return Err(Error::parse(&p, ln, "bad transition row"));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::parse(&p, ln, "bad transition index"))
        };
        transitions.insert((parse(f[1])?, parse(f[2])?), parse(f[3])?);
    }
    let (n9, l9) = expect("memory")?;
    let n_mem = parse_count(n9, l9, "memory")?;
    let mut obs_memory: Vec<Vec<ObsEntry>> = vec![Vec::new(); n_states];
    for _ in 0..n_mem {
        let (ln, l) = expect("memory row")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 4 || f[0] != "m" {
            return Err(Error::parse(&p, ln, "bad memory row"));
        }
        let s: usize = f[1].parse().map_err(|_| Error::parse(&p, ln, "bad memory state"))?;
        let oc: usize = f[2].parse().map_err(|_| Error::parse(&p, ln, "bad memory obs"))?;
        let count: usize = f[3].parse().map_err(|_| Error::parse(&p, ln, "bad memory count"))?;
        let mean: Vec<f64> = f[4..]
            .iter()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::parse(&p, ln, "bad memory value"))
            })
            .collect::<Result<_>>()?;
        if s >= n_states {
            return Err(Error::parse(&p, ln, "memory state out of range"));
        }
        obs_memory[s].push(ObsEntry {
            obs_code: oc,
            mean,
            count,
        });
    }
    for entries in &mut obs_memory {
        entries.sort_by_key(|e| e.obs_code);
    }
    let fsm = Fsm {
        state_codes,
        obs_codes,
        transitions,
        action_of,
        start_state,
        obs_memory,
        visit_counts,
        conflict_rate,
        consistency_rate,
        metric,
    };
    fsm.validate()?;
    Ok(fsm)
}

/// DOT graph: node label names the action, pen width scales with visit
/// count, edges are labeled by observation-code id.
pub fn export_fsm_graph(fsm: &Fsm, path: &Path) -> Result<()> {
    let max_visits = fsm.visit_counts.iter().copied().max().unwrap_or(1).max(1);
    let mut out = String::from("digraph fsm {\n  rankdir=LR;\n");
    for s in 0..fsm.num_states() {
        let width = 1.0 + 4.0 * fsm.visit_counts[s] as f64 / max_visits as f64;
        out.push_str(&format!(
            "  s{s} [label=\"S{s}: {}\\nvisits={}\" penwidth={width:.2}{}];\n",
            Action::from_index(fsm.action_of[s]).unwrap().label(),
            fsm.visit_counts[s],
            if s == fsm.start_state { " shape=doublecircle" } else { "" },
        ));
    }
    let mut trans: Vec<(&(usize, usize), &usize)> = fsm.transitions.iter().collect();
    trans.sort();
    for ((s, o), t) in trans {
        out.push_str(&format!("  s{s} -> s{t} [label=\"o{o}\"];\n"));
    }
    out.push_str("}\n");
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Replays an observation-code string through explicit transitions only
/// (no fallback); used by the minimization soundness oracle. Stops at the
/// first absent transition.
pub fn replay_codes(fsm: &Fsm, codes: &[usize]) -> Vec<usize> {
    let mut state = fsm.start_state;
    let mut actions = Vec::new();
    for &oc in codes {
        match fsm.transitions.get(&(state, oc)) {
            Some(&t) => {
                state = t;
                actions.push(fsm.action_of[t]);
            }
            None => break,
        }
    }
    actions
}
