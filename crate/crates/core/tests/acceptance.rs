// Acceptance gate. Each criterion prints exactly one pass/fail line; the
// process exits nonzero when any criterion fails. Criteria 5, 7, 9 and 10
// share one smoke-scale pipeline run in a scratch directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use coremig::fsm::{
    export_fsm_table, import_fsm_table, minimize_fsm, replay_codes, FallbackMetric, Fsm,
};
use coremig::harness::{
    read_comparison, run_pipeline, write_comparison, AppConfig, DefaultActor, ExtractReport,
    HandcraftedActor, StageOutcome, HANDCRAFTED_THRESHOLD,
};
use coremig::interpret::{fan_stats, history_stats, run_and_log, LoggedStep, TransitionLog};
use coremig::neural::gru::{softmax, GruPolicy};
use coremig::neural::{grad_check, load_checkpoint, quantize3_backward, save_checkpoint, Net};
use coremig::qbn::{read_dataset, write_dataset, Qbn};
use coremig::rl::{
    a2c_loss_with_advantages, eval_seed, train_curriculum, Actor, Phase, PolicyActor, StepRecord,
    TrainConfig, Trajectory,
};
use coremig::sim::{
    legal_actions, Action, SimConfig, Simulator, ACTIONS, ACTION_COUNT, OBS_DIM,
};
use coremig::workload::{
    default_profiles, gen_standard_trace, read_trace, write_trace, CATALOG_LEN, IoKind,
    WorkloadTrace,
};

type Verdict = (bool, String);

fn main() {
    let mut results: Vec<Option<Verdict>> = vec![None; 10];
    results[0] = Some(c1_gradient_correctness());
    results[1] = Some(c2_conservation_and_legality());
    results[2] = Some(c3_oracle_equivalence());
    results[3] = Some(c4_brute_force_bound());

    let smoke = run_smoke_pipeline();
    match &smoke {
        Ok(run) => {
            results[4] = Some(c5_ordering(run));
            results[6] = Some(c7_fidelity(run));
            results[8] = Some(c9_interpretation(run));
            results[9] = Some(c10_round_trips(run));
            results[5] = Some(c6_curriculum_effect(run));
        }
        Err(e) => {
            let msg = format!("smoke pipeline failed: {e}");
            for i in [4, 5, 6, 8, 9] {
                results[i] = Some((false, msg.clone()));
            }
        }
    }
    results[7] = Some(c8_minimization_soundness());

    let names = [
        "gradient correctness",
        "simulator conservation and legality",
        "simulator oracle equivalence",
        "brute-force optimality bound",
        "ordering reproduction at desk scale",
        "curriculum effect",
        "fsm fidelity",
        "minimization soundness",
        "interpretation bookkeeping",
        "round-trip integrity",
    ];
    let mut failures = 0;
    for (i, name) in names.iter().enumerate() {
        let (ok, detail) = results[i].clone().unwrap();
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("criterion {:>2} ({name}): {tag} [{detail}]", i + 1);
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: 10 of 10 criteria passed");
}

// ---------------------------------------------------------------- criterion 1

fn c1_gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;

    // GRU cell + heads through a two-step rollout.
    let mut policy = GruPolicy::<f64>::with_dims(5, 6, ACTION_COUNT, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x1: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x2: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gru_loss = move |net: &mut GruPolicy<f64>, with_grad: bool| {
        let h0 = net.h0();
        let (h1, c1) = net.forward_step(&h0, &x1);
        let (h2, c2) = net.forward_step(&h1, &x2);
        let (logits, value) = net.heads(&h2);
        let probs = softmax(&logits);
        let loss = -probs[2].ln() + value * value + h2.iter().sum::<f64>();
        if with_grad {
            net.zero_grads();
            let mut d_logits = probs.clone();
            d_logits[2] -= 1.0;
            let mut d_h2 = vec![1.0; net.hidden_dim];
            net.heads_backward(&h2, &d_logits, 2.0 * value, &mut d_h2);
            let (d_h1, _) = net.backward_step(&c2, &d_h2);
            let _ = net.backward_step(&c1, &d_h1);
        }
        loss
    };
    worst = worst.max(grad_check(&mut policy, gru_loss, 1e-5, 24, 99).max_rel_err);

    // QBN encoder/decoder on the smooth surrogate (quantizer bypassed; the
    // straight-through rule makes both paths share the same backward).
    let mut qbn = Qbn::<f64>::new(9, 4, 43);
    qbn.quantize_enabled = false;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let qbn_loss = move |net: &mut Qbn<f64>, with_grad: bool| {
        let (out, cache) = net.forward(&x);
        let loss: f64 = out.iter().zip(&x).map(|(o, t)| (o - t) * (o - t)).sum();
        if with_grad {
            net.zero_grads();
            let d_out: Vec<f64> = out.iter().zip(&x).map(|(o, t)| 2.0 * (o - t)).collect();
            net.backward(&cache, &d_out);
        }
        loss
    };
    worst = worst.max(grad_check(&mut qbn, qbn_loss, 1e-5, 24, 101).max_rel_err);

    // Straight-through pass-through, by definition: inside (-1, 1) the
    // quantizer backward is the identity.
    let pre = [-0.9, -0.3, 0.2, 0.8];
    let d_out = [1.0, -2.0, 3.0, 4.0];
    let mut d_pre = [0.0; 4];
    quantize3_backward(&pre, &d_out, &mut d_pre);
    let st_ok = d_pre == d_out;

    // A2C loss on a random two-step trajectory with frozen advantages.
    let mut policy = GruPolicy::<f64>::with_dims(4, 6, ACTION_COUNT, 45);
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let steps: Vec<StepRecord> = [1usize, 3]
        .iter()
        .enumerate()
        .map(|(i, &a)| StepRecord {
            obs: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            hidden_before: Vec::new(),
            action: a,
            reward: rng.random_range(0.0..1.0),
            done: i == 1,
        })
        .collect();
    let trajs = vec![Trajectory {
        steps,
        makespan: 2,
        truncated: false,
    }];
    let advs = vec![vec![0.7, -0.4]];
    let cfg = TrainConfig {
        gamma: 0.9,
        entropy_coef: 0.02,
        value_coef: 0.5,
        ..TrainConfig::default()
    };
    let a2c = move |net: &mut GruPolicy<f64>, with_grad: bool| {
        if with_grad {
            net.zero_grads();
        }
        a2c_loss_with_advantages(net, &trajs, &cfg, with_grad, Some(&advs))
            .unwrap()
            .total
    };
    worst = worst.max(grad_check(&mut policy, a2c, 1e-4, 20, 77).max_rel_err);

    let secs = t0.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && st_ok && secs < 60.0;
    (
        ok,
        format!("max_rel_err {worst:.2e}, straight-through identity {st_ok}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn c2_conservation_and_legality() -> Verdict {
    let t0 = Instant::now();
    let profiles = default_profiles();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut truncated = 0usize;
    let mut worst_rel: f64 = 0.0;
    for ep in 0..1000usize {
        let profile = &profiles[ep % profiles.len()];
        let trace = match gen_standard_trace(profile, 8, 9000 + ep as u64) {
            Ok(t) => t,
            Err(e) => return (false, format!("trace generation failed: {e}")),
        };
        let cfg = SimConfig {
            seed: rng.random(),
            ..SimConfig::default()
        };
        let (mut sim, _) = match Simulator::<f64>::new(cfg, trace) {
            Ok(s) => s,
            Err(e) => return (false, format!("simulator init failed: {e}")),
        };
        while !sim.is_done() {
            let a = ACTIONS[rng.random_range(0..ACTION_COUNT)];
            if let Err(e) = sim.step(a) {
                return (false, format!("step failed: {e}"));
            }
            let st = &sim.state;
            if st.queues.min_queue() < -1e-9 {
                return (false, format!("negative queue at interval {}", st.interval));
            }
            let total: usize = st.cores.iter().sum();
            if total != sim.config.n_cores
                || st.cores.iter().any(|&c| c < sim.config.min_cores_per_level)
            {
                return (false, format!("illegal core split {:?}", st.cores));
            }
        }
        if sim.state.truncated {
            truncated += 1;
        } else {
            let inj = sim.state.injected_total_kb;
            let comp = sim.state.completed_total_kb;
            let rel = (inj - comp).abs() / inj.max(1.0);
            worst_rel = worst_rel.max(rel);
            if rel > 1e-6 {
                return (
                    false,
                    format!("conservation violated: injected {inj}, completed {comp}"),
                );
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = secs < 120.0;
    (
        ok,
        format!("1000 episodes, {truncated} truncated, worst rel residual {worst_rel:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- criterion 3

// Independent straight-line recurrence over the six queues; Noop policy,
// no idle cores, no migration. Returns the makespan.
fn oracle_k(trace: &WorkloadTrace, cfg: &SimConfig) -> usize {
    let m = cfg.core_capacity_kb;
    let b = cfg.n_cores / 3;
    let cap = [(cfg.n_cores - 2 * b) as f64 * m, b as f64 * m, b as f64 * m];
    let t_len = trace.intervals.len();
    let k_max = (cfg.horizon_factor * t_len as f64).ceil() as usize;
    let share = |q1: f64, q2: f64, cap: f64| -> (f64, f64) {
        let total = q1 + q2;
        if total <= cap {
            (q1, q2)
        } else if total > 0.0 {
            let f = cap / total;
            (q1 * f, q2 * f)
        } else {
            (0.0, 0.0)
        }
    };
    let (mut nr, mut nw, mut pk, mut pr, mut wk, mut wr) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut cpk, mut cpr, mut fw) = (0.0f64, 0.0, 0.0);
    let (mut cwk, mut cwr, mut cred) = (0.0f64, 0.0, 0.0);
    let eps = 1e-9;
    for k in 1..=k_max {
        let t = k - 1;
        if t < t_len {
            let iw = &trace.intervals[t];
            let (mut hit, mut miss, mut wrt) = (0.0f64, 0.0, 0.0);
            for i in 0..CATALOG_LEN {
                let requests = (iw.count as f64 * iw.ratios[i]).round();
                let volume = requests * trace.catalog.entry(i).size_kb as f64;
                match trace.catalog.entry(i).kind {
                    IoKind::Read => {
                        hit += (1.0 - cfg.cache_miss_rate) * volume;
                        miss += cfg.cache_miss_rate * volume;
                    }
                    IoKind::Write => wrt += volume,
                }
            }
            nr += hit;
            pk += miss;
            pr += miss;
            nw += wrt;
        }
        let (a, bq) = share(nr, nw, cap[0]);
        nr -= a;
        nw -= bq;
        let (c, d) = share(pk, wk, cap[1]);
        pk -= c;
        wk -= d;
        let (e, f) = share(pr, wr, cap[2]);
        pr -= e;
        wr -= f;
        cpk += c;
        cpr += e;
        cwk += d;
        cwr += f;
        let fwd = cpk.min(cpr) - fw;
        nr += fwd;
        fw += fwd;
        wk += bq;
        wr += bq;
        let done_wb = cwk.min(cwr) - cred;
        cred += done_wb;
        if k >= t_len
            && nr <= eps
            && nw <= eps
            && pk <= eps
            && pr <= eps
            && wk <= eps
            && wr <= eps
            && (cpk.min(cpr) - fw) <= eps
            && (cwk.min(cwr) - cred) <= eps
        {
            return k;
        }
    }
    k_max
}

fn c3_oracle_equivalence() -> Verdict {
    let profiles = default_profiles();
    let cfg = SimConfig {
        idle_lambda: 0.0,
        seed: 1,
        ..SimConfig::default()
    };
    let mut checked = 0usize;
    for (ci, profile) in profiles.iter().enumerate() {
        for s in 0..2u64 {
            let trace = match gen_standard_trace(profile, 6, 7000 + ci as u64 * 10 + s) {
                Ok(t) => t,
                Err(e) => return (false, format!("trace generation failed: {e}")),
            };
            let expected = oracle_k(&trace, &cfg);
            let mut actor = DefaultActor;
            let (k, _) = match episode_k(&mut actor, &cfg, &trace) {
                Ok(r) => r,
                Err(e) => return (false, format!("episode failed: {e}")),
            };
            if k != expected {
                return (
                    false,
                    format!("class {ci} seed {s}: simulator K {k} != oracle K {expected}"),
                );
            }
            checked += 1;
        }
    }
    (true, format!("{checked} instances, K exact"))
}

fn episode_k(
    actor: &mut dyn Actor,
    cfg: &SimConfig,
    trace: &WorkloadTrace,
) -> coremig::Result<(usize, bool)> {
    let (mut sim, mut obs) = Simulator::<f64>::new(cfg.clone(), trace.clone())?;
    actor.begin_episode();
    let mut k = 0;
    while !sim.is_done() {
        let a = actor.act(&obs);
        let r = sim.step(a)?;
        k = r.makespan_so_far;
        obs = r.observation;
    }
    Ok((k, sim.state.truncated))
}

// ---------------------------------------------------------------- criterion 4

fn brute_force_k(cfg: &SimConfig, trace: &WorkloadTrace) -> usize {
    fn rec(sim: &Simulator<f64>, depth: usize, best: &mut usize) {
        if depth + 1 >= *best {
            return;
        }
        for a in legal_actions(&sim.state.cores, &sim.config) {
            let mut next = sim.clone();
            let r = next.step(a).expect("step during enumeration");
            if r.done {
                if !next.state.truncated && r.makespan_so_far < *best {
                    *best = r.makespan_so_far;
                }
            } else {
                rec(&next, depth + 1, best);
            }
        }
    }
    let (sim, _) = Simulator::<f64>::new(cfg.clone(), trace.clone()).expect("sim init");
    let mut best = usize::MAX;
    rec(&sim, 0, &mut best);
    best
}

fn c4_brute_force_bound() -> Verdict {
    let t0 = Instant::now();
    let cfg = SimConfig {
        n_cores: 4,
        idle_lambda: 0.0,
        horizon_factor: 2.0,
        q_ref: 50,
        seed: 3,
        ..SimConfig::default()
    };
    let profiles = default_profiles();

    // Tiny instances with a nontrivial optimum: scale interval counts down
    // until exhaustive search drains in 4 or 5 intervals.
    let mut instances: Vec<(WorkloadTrace, usize)> = Vec::new();
    let mut attempt = 0usize;
    while instances.len() < 20 && attempt < 200 {
        let profile = &profiles[attempt % profiles.len()];
        let base = match gen_standard_trace(profile, 3, 4000 + attempt as u64) {
            Ok(t) => t,
            Err(e) => return (false, format!("trace generation failed: {e}")),
        };
        attempt += 1;
        for div in [1u64, 2, 4, 8, 16, 32, 64, 128, 256] {
            let mut t = base.clone();
            for iw in &mut t.intervals {
                iw.count = (iw.count / div).max(1);
            }
            let k_star = brute_force_k(&cfg, &t);
            if (4..=5).contains(&k_star) {
                instances.push((t, k_star));
                break;
            }
        }
    }
    if instances.len() < 20 {
        return (false, format!("only {} usable instances", instances.len()));
    }

    let traces: Vec<WorkloadTrace> = instances.iter().map(|(t, _)| t.clone()).collect();
    let train_cfg = TrainConfig {
        epochs_standard: 0,
        epochs_real: 3000,
        gamma: 0.9,
        entropy_coef: 0.002,
        learning_rate: 1e-3,
        eval_every: 500,
        seed: 7,
        ..TrainConfig::default()
    };
    let (policy, _) = match train_curriculum(&[], &traces, &cfg, &train_cfg) {
        Ok(r) => r,
        Err(e) => return (false, format!("training failed: {e}")),
    };

    let mut within = 0usize;
    for (trace, k_star) in &instances {
        for (name, actor) in [
            ("default", &mut DefaultActor as &mut dyn Actor),
            (
                "handcrafted",
                &mut HandcraftedActor {
                    threshold: HANDCRAFTED_THRESHOLD,
                },
            ),
            ("drl", &mut PolicyActor::new(&policy)),
        ] {
            let (k, _) = match episode_k(actor, &cfg, trace) {
                Ok(r) => r,
                Err(e) => return (false, format!("episode failed: {e}")),
            };
            if k < *k_star {
                return (false, format!("{name} beat exhaustive optimum: {k} < {k_star}"));
            }
            if name == "drl" && (k as f64) <= 1.25 * *k_star as f64 + 1e-9 {
                within += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = within * 5 >= instances.len() * 4;
    (
        ok,
        format!(
            "{within}/{} instances with DRL K <= 1.25 K*, {secs:.1}s",
            instances.len()
        ),
    )
}

// ------------------------------------------------------------ smoke pipeline

struct SmokeRun {
    cfg: AppConfig,
    dir: PathBuf,
    secs: f64,
}

fn run_smoke_pipeline() -> Result<SmokeRun, String> {
    let manifest_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let cfg_path = manifest_dir.join("../../config/smoke.toml");
    let cfg = AppConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let dir = std::env::temp_dir().join("coremig-acceptance-run");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    }
    let t0 = Instant::now();
    run_pipeline(&cfg, &dir, None).map_err(|e| e.to_string())?;
    Ok(SmokeRun {
        cfg,
        dir,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn load_prefix(dir: &Path, prefix: &str) -> Result<Vec<WorkloadTrace>, String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join("workloads"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(prefix) && n.ends_with(".txt"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| read_trace(p).map_err(|e| e.to_string()))
        .collect()
}

// ---------------------------------------------------------------- criterion 5

fn c5_ordering(run: &SmokeRun) -> Verdict {
    let table = match read_comparison(&run.dir.join("evaluate/comparison.json")) {
        Ok(t) => t,
        Err(e) => return (false, format!("comparison read failed: {e}")),
    };
    let mean = |name: &str| table.mean_of(name);
    let (d, h, drl, fsm) = match (
        mean("default"),
        mean("handcrafted"),
        mean("drl"),
        mean("fsm"),
    ) {
        (Some(d), Some(h), Some(r), Some(f)) => (d, h, r, f),
        _ => return (false, "comparison table missing a policy row".into()),
    };
    let ordering = d > h && h > drl;
    let drl_gap = drl <= 0.95 * h;
    let fsm_gap = fsm <= 1.03 * drl;
    let budget = run.secs < 1800.0;
    (
        ordering && drl_gap && fsm_gap && budget,
        format!(
            "default {d:.2} > handcrafted {h:.2} > drl {drl:.2} ({:+.1}% vs handcrafted), fsm {fsm:.2} ({:+.1}% vs drl), pipeline {:.0}s",
            (drl / h - 1.0) * 100.0,
            (fsm / drl - 1.0) * 100.0,
            run.secs
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn c6_curriculum_effect(run: &SmokeRun) -> Verdict {
    let t0 = Instant::now();
    let standard = match load_prefix(&run.dir, "standard_") {
        Ok(t) => t,
        Err(e) => return (false, e),
    };
    let real = match load_prefix(&run.dir, "real_") {
        Ok(t) => t,
        Err(e) => return (false, e),
    };
    let epochs_standard = run.cfg.train.epochs_standard.min(2000);
    let epochs_real = run.cfg.train.epochs_real.min(2000);
    let mut ratios = Vec::new();
    for seed in [21u64, 22, 23] {
        let scratch_cfg = TrainConfig {
            epochs_standard: 0,
            epochs_real,
            seed,
            ..run.cfg.train.clone()
        };
        let (_, scratch_curve) = match train_curriculum(&[], &real, &run.cfg.sim, &scratch_cfg) {
            Ok(r) => r,
            Err(e) => return (false, format!("scratch training failed: {e}")),
        };
        let scratch_final = match scratch_curve.last() {
            Some(p) => p.mean_k,
            None => return (false, "scratch curve empty".into()),
        };
        let curr_cfg = TrainConfig {
            epochs_standard,
            epochs_real,
            seed,
            ..run.cfg.train.clone()
        };
        let (_, curve) = match train_curriculum(&standard, &real, &run.cfg.sim, &curr_cfg) {
            Ok(r) => r,
            Err(e) => return (false, format!("curriculum training failed: {e}")),
        };
        let used = curve
            .iter()
            .filter(|p| p.phase == Phase::Real)
            .find(|p| p.mean_k <= scratch_final + 1e-9)
            .map(|p| p.epoch - epochs_standard + 1)
            .unwrap_or(epochs_real);
        ratios.push(used as f64 / epochs_real as f64);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    (
        mean_ratio <= 0.5,
        format!(
            "mean real-epoch ratio {:.2} (per seed {:?}), {secs:.0}s",
            mean_ratio,
            ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn c7_fidelity(run: &SmokeRun) -> Verdict {
    let path = run.dir.join("fsm/fidelity.json");
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return (false, format!("fidelity.json read failed: {e}")),
    };
    let report: ExtractReport = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(e) => return (false, format!("fidelity.json parse failed: {e}")),
    };
    let f = &report.fidelity;
    let ok = f.open_loop_agreement >= 0.90
        && report.conflict_rate <= 0.05
        && report.consistency_rate >= 0.95;
    (
        ok,
        format!(
            "agreement {:.3}, conflict {:.3}, consistency {:.3}, fallback {:.3}, finetuned {}",
            f.open_loop_agreement,
            report.conflict_rate,
            report.consistency_rate,
            f.fallback_rate,
            report.finetuned
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn random_machine(rng: &mut ChaCha8Rng) -> Fsm {
    let n_states = rng.random_range(3..12usize);
    let n_obs = rng.random_range(2..6usize);
    let code = |mut v: usize, width: usize| -> Vec<i8> {
        let mut c = Vec::with_capacity(width);
        for _ in 0..width {
            c.push((v % 3) as i8 - 1);
            v /= 3;
        }
        c
    };
    let mut transitions = HashMap::new();
    for s in 0..n_states {
        for o in 0..n_obs {
            if rng.random_range(0.0..1.0) < 0.85 {
                transitions.insert((s, o), rng.random_range(0..n_states));
            }
        }
    }
    Fsm {
        state_codes: (0..n_states).map(|i| code(i + 1, 4)).collect(),
        obs_codes: (0..n_obs).map(|i| code(i + 1, 3)).collect(),
        transitions,
        action_of: (0..n_states).map(|_| rng.random_range(0..ACTION_COUNT)).collect(),
        start_state: rng.random_range(0..n_states),
        obs_memory: vec![Vec::new(); n_states],
        visit_counts: vec![0; n_states],
        conflict_rate: 0.0,
        consistency_rate: 1.0,
        metric: FallbackMetric::Euclidean,
    }
}

fn c8_minimization_soundness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for machine_idx in 0..50usize {
        let fsm = random_machine(&mut rng);
        if let Err(e) = fsm.validate() {
            return (false, format!("machine {machine_idx} invalid: {e}"));
        }
        let min = minimize_fsm(&fsm);
        if let Err(e) = min.validate() {
            return (false, format!("minimized machine {machine_idx} invalid: {e}"));
        }
        if min.num_states() > fsm.num_states() {
            return (
                false,
                format!(
                    "machine {machine_idx}: minimized {} > original {}",
                    min.num_states(),
                    fsm.num_states()
                ),
            );
        }
        let twice = minimize_fsm(&min);
        if twice.num_states() != min.num_states() {
            return (false, format!("machine {machine_idx}: minimize not idempotent"));
        }
        let n_obs = fsm.obs_codes.len();
        for string_idx in 0..1000usize {
            let len = rng.random_range(1..30usize);
            let codes: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_obs)).collect();
            let a = replay_codes(&fsm, &codes);
            let b = replay_codes(&min, &codes);
            let c = replay_codes(&twice, &codes);
            if a != b || b != c {
                return (
                    false,
                    format!("machine {machine_idx} string {string_idx}: replay mismatch"),
                );
            }
        }
    }
    (true, "50 machines x 1000 strings, behavior preserved".into())
}

// ---------------------------------------------------------------- criterion 9

fn c9_interpretation(run: &SmokeRun) -> Verdict {
    // Synthetic check that the window excludes the entry step: the entry
    // observation is a sentinel that must not appear in the history mean.
    let mut fsm = random_machine(&mut ChaCha8Rng::seed_from_u64(9));
    fsm.state_codes.truncate(2);
    fsm.action_of.truncate(2);
    fsm.obs_memory.truncate(2);
    fsm.visit_counts.truncate(2);
    fsm.transitions.clear();
    fsm.start_state = 0;
    let before = vec![1.0; OBS_DIM];
    let entry = vec![5.0; OBS_DIM];
    let log: TransitionLog = vec![vec![
        LoggedStep {
            state_before: 0,
            state_after: 0,
            obs: before.clone(),
        },
        LoggedStep {
            state_before: 0,
            state_after: 1,
            obs: entry.clone(),
        },
    ]];
    let hist = match history_stats(&fsm, &log, 2) {
        Ok(h) => h,
        Err(e) => return (false, format!("history_stats failed: {e}")),
    };
    let s1 = &hist.states[1];
    if s1.entry_count != 1
        || s1.history_counts != vec![0, 1]
        || s1.history_mean[1] != before
        || s1.history_mean[1].contains(&5.0)
    {
        return (false, "history window did not exclude the entry step".into());
    }

    // Real artifacts: bookkeeping identity plus the Noop-dominance check.
    let fsm = match import_fsm_table(&run.dir.join("fsm/fsm_min.txt")) {
        Ok(f) => f,
        Err(e) => return (false, format!("fsm import failed: {e}")),
    };
    let mut qbn_obs = Qbn::<f64>::new(
        OBS_DIM,
        run.cfg.qbn.train.latent_obs,
        run.cfg.qbn.train.seed,
    );
    if let Err(e) = load_checkpoint(&mut qbn_obs, &run.dir.join("fsm/qbn_obs_final.ckpt")) {
        return (false, format!("qbn load failed: {e}"));
    }
    let holdout = match load_prefix(&run.dir, "holdout_") {
        Ok(t) => t,
        Err(e) => return (false, e),
    };
    let mut noop_dominant = 0usize;
    let mut combined: TransitionLog = Vec::new();
    for (i, trace) in holdout.iter().enumerate() {
        let log = match run_and_log(
            &fsm,
            &qbn_obs,
            &run.cfg.sim,
            std::slice::from_ref(trace),
            eval_seed(0xE7A1, i),
        ) {
            Ok(l) => l,
            Err(e) => return (false, format!("run_and_log failed: {e}")),
        };
        let mut visits = vec![0usize; fsm.num_states()];
        for step in &log[0] {
            visits[step.state_after] += 1;
        }
        let top = visits
            .iter()
            .enumerate()
            .max_by_key(|(_, &v)| v)
            .map(|(s, _)| s)
            .unwrap();
        if fsm.action_of[top] == Action::Noop.index() {
            noop_dominant += 1;
        }
        combined.extend(log);
    }
    let report = fan_stats(&fsm, &combined, run.cfg.interpret.window);
    let fan_in: u64 = report.states.iter().map(|s| s.fan_in_count).sum();
    let fan_out: u64 = report.states.iter().map(|s| s.fan_out_count).sum();
    let non_self: u64 = combined
        .iter()
        .flatten()
        .filter(|s| s.state_before != s.state_after)
        .count() as u64;
    let books = fan_in == fan_out && fan_out == non_self;
    let ok = books && noop_dominant >= 8;
    (
        ok,
        format!(
            "fan-in {fan_in} = fan-out {fan_out} = non-self {non_self}: {books}; Noop most visited on {noop_dominant}/10 traces"
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn c10_round_trips(run: &SmokeRun) -> Verdict {
    let tmp = std::env::temp_dir().join("coremig-acceptance-roundtrip");
    if tmp.exists() {
        if let Err(e) = std::fs::remove_dir_all(&tmp) {
            return (false, format!("scratch cleanup failed: {e}"));
        }
    }
    if let Err(e) = std::fs::create_dir_all(&tmp) {
        return (false, format!("scratch dir failed: {e}"));
    }

    // Workload trace.
    let trace = match read_trace(&run.dir.join("workloads/holdout_000.txt")) {
        Ok(t) => t,
        Err(e) => return (false, format!("trace read failed: {e}")),
    };
    let p = tmp.join("trace.txt");
    if let Err(e) = write_trace(&p, &trace) {
        return (false, format!("trace write failed: {e}"));
    }
    match read_trace(&p) {
        Ok(t) if t == trace => {}
        Ok(_) => return (false, "trace round-trip changed the trace".into()),
        Err(e) => return (false, format!("trace reread failed: {e}")),
    }

    // Policy checkpoint, bit-exact.
    let mut policy = GruPolicy::<f64>::new(run.cfg.train.seed);
    if let Err(e) = load_checkpoint(&mut policy, &run.dir.join("train/policy.ckpt")) {
        return (false, format!("policy load failed: {e}"));
    }
    let p = tmp.join("policy.ckpt");
    if let Err(e) = save_checkpoint(&policy, "roundtrip", &p) {
        return (false, format!("policy save failed: {e}"));
    }
    let mut policy2 = GruPolicy::<f64>::new(run.cfg.train.seed.wrapping_add(1));
    if let Err(e) = load_checkpoint(&mut policy2, &p) {
        return (false, format!("policy reload failed: {e}"));
    }
    for (a, b) in policy.parameters().iter().zip(policy2.parameters().iter()) {
        let same = a
            .values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return (false, format!("checkpoint block {} not bit-exact", a.name));
        }
    }

    // Dataset.
    let (records, fp) = match read_dataset(&run.dir.join("collect/dataset.txt")) {
        Ok(r) => r,
        Err(e) => return (false, format!("dataset read failed: {e}")),
    };
    let p = tmp.join("dataset.txt");
    if let Err(e) = write_dataset(&p, &records, &fp) {
        return (false, format!("dataset write failed: {e}"));
    }
    match read_dataset(&p) {
        Ok((r2, fp2)) if r2 == records && fp2 == fp => {}
        Ok(_) => return (false, "dataset round-trip changed records".into()),
        Err(e) => return (false, format!("dataset reread failed: {e}")),
    }

    // FSM table.
    let fsm = match import_fsm_table(&run.dir.join("fsm/fsm_min.txt")) {
        Ok(f) => f,
        Err(e) => return (false, format!("fsm import failed: {e}")),
    };
    let p = tmp.join("fsm.txt");
    if let Err(e) = export_fsm_table(&fsm, &p) {
        return (false, format!("fsm export failed: {e}"));
    }
    match import_fsm_table(&p) {
        Ok(f2) if f2 == fsm => {}
        Ok(_) => return (false, "fsm round-trip changed the machine".into()),
        Err(e) => return (false, format!("fsm reimport failed: {e}")),
    }

    // Comparison and interpretation reports.
    let table = match read_comparison(&run.dir.join("evaluate/comparison.json")) {
        Ok(t) => t,
        Err(e) => return (false, format!("comparison read failed: {e}")),
    };
    let pj = tmp.join("comparison.json");
    let pt = tmp.join("comparison.txt");
    if let Err(e) = write_comparison(&table, &pj, &pt) {
        return (false, format!("comparison write failed: {e}"));
    }
    match read_comparison(&pj) {
        Ok(t2) if t2 == table => {}
        Ok(_) => return (false, "comparison round-trip changed the table".into()),
        Err(e) => return (false, format!("comparison reread failed: {e}")),
    }
    let report = match coremig::interpret::read_report(&run.dir.join("interpret/report.json")) {
        Ok(r) => r,
        Err(e) => return (false, format!("interpret report read failed: {e}")),
    };
    let pj = tmp.join("report.json");
    let pt = tmp.join("report.txt");
    if let Err(e) = coremig::interpret::render_report(&report, &pj, &pt) {
        return (false, format!("interpret report write failed: {e}"));
    }
    match coremig::interpret::read_report(&pj) {
        Ok(r2) if r2 == report => {}
        Ok(_) => return (false, "interpret report round-trip changed".into()),
        Err(e) => return (false, format!("interpret report reread failed: {e}")),
    }

    // Rerunning the completed pipeline must be a checksum no-op.
    let manifest_before = match std::fs::read(run.dir.join("manifest.json")) {
        Ok(b) => b,
        Err(e) => return (false, format!("manifest read failed: {e}")),
    };
    let outcomes = match run_pipeline(&run.cfg, &run.dir, None) {
        Ok(o) => o,
        Err(e) => return (false, format!("pipeline rerun failed: {e}")),
    };
    let all_skipped = outcomes.iter().all(|(_, o)| *o == StageOutcome::Skipped);
    let manifest_after = match std::fs::read(run.dir.join("manifest.json")) {
        Ok(b) => b,
        Err(e) => return (false, format!("manifest reread failed: {e}")),
    };
    if !all_skipped || manifest_before != manifest_after {
        return (false, "pipeline rerun was not a no-op".into());
    }

    (true, "traces, checkpoints, datasets, fsm tables, reports lossless; rerun skipped all stages".into())
}
