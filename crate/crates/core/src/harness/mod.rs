//! Baseline policies, paired comparison, workload calibration, and the
//! staged pipeline (generate, calibrate, train, collect, train-qbn,
//! extract, evaluate, interpret) with a checksummed run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsm::{
    export_fsm_graph, export_fsm_table, extract_fsm, fidelity, import_fsm_table, minimize_fsm,
    FidelityReport, FsmActor,
};
use crate::interpret::{interpret, render_report, DEFAULT_WINDOW};
use crate::neural::gru::{GruPolicy, HIDDEN_DIM};
use crate::neural::{load_checkpoint, save_checkpoint};
use crate::qbn::{
    collect_dataset, discretize, finetune_with_qbns, read_dataset, train_qbn, write_dataset,
    InsertedActor, InsertedPolicy, Qbn, QbnTarget, QbnTrainConfig,
};
use crate::rl::{
    evaluate_policy, train_curriculum, write_curve, Actor, PolicyActor, TrainConfig,
};
use crate::sim::{Action, Observation, SimConfig, ACTIONS, OBS_DIM};
use crate::workload::{
    default_profiles, gen_real_trace, gen_standard_trace, read_profiles, read_trace,
    write_profiles, write_trace, ClassProfile, WorkloadTrace,
};
use crate::{Error, Result};

/// The paper's "default setting": no migration, ever.
pub fn default_action(_obs: &Observation<f64>) -> Action {
    Action::Noop
}

/// Utilization-balancing rule: when the utilization spread exceeds the
/// threshold, move one core from the least to the most utilized level.
/// Ties break by fixed level order N < K < R.
pub fn handcrafted_action(obs: &Observation<f64>, threshold: f64) -> Action {
    let utils = &obs[3..6];
    let mut lo = 0;
    let mut hi = 0;
    for i in 1..3 {
        if utils[i] < utils[lo] {
            lo = i;
        }
        if utils[i] > utils[hi] {
            hi = i;
        }
    }
    if utils[hi] - utils[lo] <= threshold || lo == hi {
        return Action::Noop;
    }
    let (from, to) = (crate::sim::LEVELS[lo], crate::sim::LEVELS[hi]);
    ACTIONS
        .iter()
        .copied()
        .find(|a| a.move_spec() == Some((from, to)))
        .unwrap_or(Action::Noop)
}

pub const HANDCRAFTED_THRESHOLD: f64 = 0.2;

pub struct DefaultActor;

impl Actor for DefaultActor {
    fn name(&self) -> &str {
        "default"
    }
    fn begin_episode(&mut self) {}
    fn act(&mut self, obs: &Observation<f64>) -> Action {
        default_action(obs)
    }
}

pub struct HandcraftedActor {
    pub threshold: f64,
}

impl Actor for HandcraftedActor {
    fn name(&self) -> &str {
        "handcrafted"
    }
    fn begin_episode(&mut self) {}
    fn act(&mut self, obs: &Observation<f64>) -> Action {
        handcrafted_action(obs, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub names: Vec<String>,
    pub per_trace_k: Vec<Vec<usize>>,
    pub mean_k: Vec<f64>,
    /// Percent reduction of each policy's mean K vs the "default" row.
    pub reduction_vs_default_pct: Vec<f64>,
    /// Percent by which the "fsm" row exceeds the "drl" row.
    pub fsm_vs_drl_gap_pct: Option<f64>,
}

impl ComparisonTable {
    pub fn mean_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.mean_k[i])
    }

    /// Percent fields must recompute exactly from the K columns.
    pub fn validate(&self) -> Result<()> {
        for (i, ks) in self.per_trace_k.iter().enumerate() {
            let mean = ks.iter().sum::<usize>() as f64 / ks.len() as f64;
            if mean != self.mean_k[i] {
                return Err(Error::Invariant(format!(
                    "mean K mismatch for {}",
                    self.names[i]
                )));
            }
        }
        if let Some(base) = self.mean_of("default") {
            for i in 0..self.names.len() {
                let expect = 100.0 * (base - self.mean_k[i]) / base;
                if expect != self.reduction_vs_default_pct[i] {
                    return Err(Error::Invariant("reduction percent mismatch".into()));
                }
            }
        }
        if let (Some(drl), Some(fsm)) = (self.mean_of("drl"), self.mean_of("fsm")) {
            let expect = 100.0 * (fsm - drl) / drl;
            if self.fsm_vs_drl_gap_pct != Some(expect) {
                return Err(Error::Invariant("fsm-vs-drl percent mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Paired-seed evaluation of several controllers over the same traces.
pub fn compare(
    actors: &mut [(&str, &mut dyn Actor)],
    sim_cfg: &SimConfig,
    traces: &[WorkloadTrace],
    seed_base: u64,
) -> Result<ComparisonTable> {
    if actors.len() < 2 {
        return Err(Error::InvalidArgument("need at least two policies".into()));
    }
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let mut names = Vec::new();
    let mut per_trace_k = Vec::new();
    let mut mean_k = Vec::new();
    for (name, actor) in actors.iter_mut() {
        let eval = evaluate_policy(*actor, sim_cfg, traces, seed_base)?;
        names.push(name.to_string());
        per_trace_k.push(eval.per_trace_k);
        mean_k.push(eval.mean_k);
    }
    let base = names
        .iter()
        .position(|n| n == "default")
        .map(|i| mean_k[i]);
    let reduction_vs_default_pct = mean_k
        .iter()
        .map(|&m| base.map(|b| 100.0 * (b - m) / b).unwrap_or(0.0))
        .collect();
    let drl = names.iter().position(|n| n == "drl").map(|i| mean_k[i]);
    let fsm = names.iter().position(|n| n == "fsm").map(|i| mean_k[i]);
    let fsm_vs_drl_gap_pct = match (drl, fsm) {
        (Some(d), Some(f)) => Some(100.0 * (f - d) / d),
        _ => None,
    };
    Ok(ComparisonTable {
        names,
        per_trace_k,
        mean_k,
        reduction_vs_default_pct,
        fsm_vs_drl_gap_pct,
    })
}

pub fn write_comparison(
    table: &ComparisonTable,
    json_path: &Path,
    text_path: &Path,
) -> Result<()> {
    let json = serde_json::to_string_pretty(table)
        .map_err(|e| Error::Config(format!("comparison serialization: {e}")))?;
    fs::write(json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let mut out = String::from("policy        mean_K   vs_default%   per-trace K\n");
    for i in 0..table.names.len() {
        let ks: Vec<String> = table.per_trace_k[i].iter().map(|k| k.to_string()).collect();
        out.push_str(&format!(
            "{:<12} {:>8.3} {:>12.2}   [{}]\n",
            table.names[i],
            table.mean_k[i],
            table.reduction_vs_default_pct[i],
            ks.join(", ")
        ));
    }
    if let Some(gap) = table.fsm_vs_drl_gap_pct {
        out.push_str(&format!("fsm vs drl gap: {gap:.2}%\n"));
    }
    fs::write(text_path, out).map_err(|e| Error::io(text_path.display().to_string(), e))
}

pub fn read_comparison(path: &Path) -> Result<ComparisonTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("comparison parse: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration {
    pub name: String,
    pub mean_k: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub t_len: usize,
    pub classes: Vec<ClassCalibration>,
}

/// Runs the no-migration policy on each class and checks that the mean
/// makespan lands in [1.2 T, 3 T]; out-of-band classes are flagged so the
/// profile intensities can be adjusted before experiments.
pub fn calibrate(
    profiles: &[ClassProfile],
    sim_cfg: &SimConfig,
    t_len: usize,
    episodes_per_class: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no profiles".into()));
    }
    let band_low = 1.2 * t_len as f64;
    let band_high = 3.0 * t_len as f64;
    let mut classes = Vec::with_capacity(profiles.len());
    for (ci, profile) in profiles.iter().enumerate() {
        let traces: Vec<WorkloadTrace> = (0..episodes_per_class.max(1))
            .map(|i| {
                gen_standard_trace(profile, t_len, seed.wrapping_add((ci * 131 + i) as u64))
            })
            .collect::<Result<_>>()?;
        let mut actor = DefaultActor;
        let eval = evaluate_policy(&mut actor, sim_cfg, &traces, seed)?;
        classes.push(ClassCalibration {
            name: profile.name.clone(),
            mean_k: eval.mean_k,
            band_low,
            band_high,
            in_band: eval.mean_k >= band_low && eval.mean_k <= band_high,
        });
    }
    Ok(CalibrationReport { t_len, classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadStageConfig {
    pub t_len: usize,
    pub snippet_len: usize,
    pub standard_per_class: usize,
    pub real_count: usize,
    pub holdout_count: usize,
}

impl Default for WorkloadStageConfig {
    fn default() -> Self {
        WorkloadStageConfig {
            t_len: 64,
            snippet_len: 16,
            standard_per_class: 2,
            real_count: 50,
            holdout_count: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QbnStageConfig {
    pub train: QbnTrainConfig,
    pub collect_episodes_per_trace: usize,
    pub collect_trace_cap: usize,
    pub finetune_epochs: usize,
    /// Learning rate for the fine-tuning phase; 0 inherits the train rate.
    pub finetune_learning_rate: f64,
    pub fidelity_threshold: f64,
}

impl Default for QbnStageConfig {
    fn default() -> Self {
        QbnStageConfig {
            train: QbnTrainConfig::default(),
            collect_episodes_per_trace: 1,
            collect_trace_cap: 8,
            finetune_epochs: 50,
            finetune_learning_rate: 0.0,
            fidelity_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretStageConfig {
    pub window: usize,
}

impl Default for InterpretStageConfig {
    fn default() -> Self {
        InterpretStageConfig {
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub workload: WorkloadStageConfig,
    pub qbn: QbnStageConfig,
    pub interpret: InterpretStageConfig,
    pub calibrate_episodes_per_class: usize,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: AppConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.normalize();
        Ok(cfg)
    }

    /// Cascades the top-level seed into stage seeds that were left at
    /// their defaults, so `--seed` changes the whole run coherently.
    pub fn normalize(&mut self) {
        if self.calibrate_episodes_per_class == 0 {
            self.calibrate_episodes_per_class = 3;
        }
        if self.train.seed == 0 {
            self.train.seed = self.seed;
        }
        if self.qbn.train.seed == 0 {
            self.qbn.train.seed = self.seed.wrapping_add(0x0B17);
        }
        if self.sim.seed == 0 {
            self.sim.seed = self.seed;
        }
    }

    pub fn fingerprint(&self) -> String {
        let canon = toml::to_string(self).unwrap_or_default();
        hex_digest(canon.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex_digest(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenWorkloads,
    Calibrate,
    Train,
    Collect,
    TrainQbn,
    Extract,
    Evaluate,
    Interpret,
}

pub const ALL_STAGES: [Stage; 8] = [
    Stage::GenWorkloads,
    Stage::Calibrate,
    Stage::Train,
    Stage::Collect,
    Stage::TrainQbn,
    Stage::Extract,
    Stage::Evaluate,
    Stage::Interpret,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorkloads => "gen-workloads",
            Stage::Calibrate => "calibrate",
            Stage::Train => "train",
            Stage::Collect => "collect",
            Stage::TrainQbn => "train-qbn",
            Stage::Extract => "extract",
            Stage::Evaluate => "evaluate",
            Stage::Interpret => "interpret",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        ALL_STAGES
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    input_fingerprint: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct Manifest {
    config_fingerprint: String,
    seed: u64,
    stages: BTreeMap<String, StageRecord>,
}

const MANIFEST_FILE: &str = "manifest.json";

fn load_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
}

fn save_manifest(run_dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = run_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct RunContext<'a> {
    pub cfg: &'a AppConfig,
    pub run_dir: &'a Path,
}

impl RunContext<'_> {
    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.run_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(d.display().to_string(), e))?;
        Ok(d)
    }

    fn artifact(&self, stage: Stage, rel: &str) -> Result<PathBuf> {
        let path = self.run_dir.join(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: stage.name().to_string(),
                artifact: rel.to_string(),
            });
        }
        Ok(path)
    }

    fn list_traces(&self, stage: Stage, prefix: &str) -> Result<Vec<PathBuf>> {
        let dir = self.run_dir.join("workloads");
        let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| n.starts_with(prefix) && n.ends_with(".txt"))
                        .unwrap_or(false)
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        files.sort();
        if files.is_empty() {
            return Err(Error::MissingArtifact {
                stage: stage.name().to_string(),
                artifact: format!("workloads/{prefix}*.txt"),
            });
        }
        Ok(files)
    }

    fn load_traces(&self, stage: Stage, prefix: &str) -> Result<Vec<WorkloadTrace>> {
        self.list_traces(stage, prefix)?
            .iter()
            .map(|p| read_trace(p))
            .collect()
    }

    fn load_policy(&self, stage: Stage) -> Result<GruPolicy<f64>> {
        let path = self.artifact(stage, "train/policy.ckpt")?;
        let mut policy = GruPolicy::new(self.cfg.train.seed);
        load_checkpoint(&mut policy, &path)?;
        Ok(policy)
    }

    fn load_qbns(&self, stage: Stage, obs_rel: &str, hidden_rel: &str) -> Result<(Qbn<f64>, Qbn<f64>)> {
        let obs_path = self.artifact(stage, obs_rel)?;
        let hidden_path = self.artifact(stage, hidden_rel)?;
        let mut qbn_obs = Qbn::new(OBS_DIM, self.cfg.qbn.train.latent_obs, self.cfg.qbn.train.seed);
        let mut qbn_hidden = Qbn::new(
            HIDDEN_DIM,
            self.cfg.qbn.train.latent_hidden,
            self.cfg.qbn.train.seed.wrapping_add(1),
        );
        load_checkpoint(&mut qbn_obs, &obs_path)?;
        load_checkpoint(&mut qbn_hidden, &hidden_path)?;
        Ok((qbn_obs, qbn_hidden))
    }

    fn collect_traces(&self, stage: Stage) -> Result<Vec<WorkloadTrace>> {
        let all = self.load_traces(stage, "real_")?;
        let cap = self.cfg.qbn.collect_trace_cap.max(1);
        Ok(all.into_iter().take(cap).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub fidelity: FidelityReport,
    pub states_original: usize,
    pub states_minimized: usize,
    pub conflict_rate: f64,
    pub consistency_rate: f64,
    pub finetuned: bool,
}

fn stage_gen_workloads(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let dir = ctx.dir("workloads")?;
    let cfg = ctx.cfg;
    let profiles = default_profiles();
    let mut outputs = Vec::new();
    let profiles_path = dir.join("profiles.toml");
    write_profiles(&profiles_path, &profiles)?;
    outputs.push(profiles_path);
    for (ci, profile) in profiles.iter().enumerate() {
        for i in 0..cfg.workload.standard_per_class {
            let seed = cfg.seed.wrapping_add((1000 + ci * 100 + i) as u64);
            let trace = gen_standard_trace(profile, cfg.workload.t_len, seed)?;
            let path = dir.join(format!("standard_{ci:02}_{i:02}.txt"));
            write_trace(&path, &trace)?;
            outputs.push(path);
        }
    }
    for i in 0..cfg.workload.real_count {
        let seed = cfg.seed.wrapping_add(0x5EA1_0000 + i as u64);
        let trace = gen_real_trace(&profiles, cfg.workload.t_len, cfg.workload.snippet_len, seed)?;
        let path = dir.join(format!("real_{i:03}.txt"));
        write_trace(&path, &trace)?;
        outputs.push(path);
    }
    for i in 0..cfg.workload.holdout_count {
        let seed = cfg.seed.wrapping_add(0x401D_0000 + i as u64);
        let trace = gen_real_trace(&profiles, cfg.workload.t_len, cfg.workload.snippet_len, seed)?;
        let path = dir.join(format!("holdout_{i:03}.txt"));
        write_trace(&path, &trace)?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn stage_calibrate(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let profiles_path = ctx.artifact(Stage::Calibrate, "workloads/profiles.toml")?;
    let profiles = read_profiles(&profiles_path)?;
    let report = calibrate(
        &profiles,
        &ctx.cfg.sim,
        ctx.cfg.workload.t_len,
        ctx.cfg.calibrate_episodes_per_class,
        ctx.cfg.seed.wrapping_add(0xCA11),
    )?;
    let dir = ctx.dir("calibrate")?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("calibration serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let text_path = dir.join("report.txt");
    let mut out = format!(
        "class calibration, T={} band=[{:.1}, {:.1}]\n",
        report.t_len,
        1.2 * report.t_len as f64,
        3.0 * report.t_len as f64
    );
    for c in &report.classes {
        out.push_str(&format!(
            "{:<20} mean_K {:>8.2}  {}\n",
            c.name,
            c.mean_k,
            if c.in_band { "ok" } else { "OUT OF BAND" }
        ));
    }
    fs::write(&text_path, out).map_err(|e| Error::io(text_path.display().to_string(), e))?;
    Ok(vec![json_path, text_path])
}

fn stage_train(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let standard = ctx.load_traces(Stage::Train, "standard_")?;
    let real = ctx.load_traces(Stage::Train, "real_")?;
    let (policy, curve) = train_curriculum(&standard, &real, &ctx.cfg.sim, &ctx.cfg.train)?;
    let dir = ctx.dir("train")?;
    let ckpt = dir.join("policy.ckpt");
    save_checkpoint(&policy, &ctx.cfg.fingerprint(), &ckpt)?;
    let curve_path = dir.join("curve.txt");
    write_curve(&curve_path, &curve)?;
    Ok(vec![ckpt, curve_path])
}

fn stage_collect(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let policy = ctx.load_policy(Stage::Collect)?;
    let traces = ctx.collect_traces(Stage::Collect)?;
    let records = collect_dataset(
        &policy,
        None,
        &ctx.cfg.sim,
        &traces,
        ctx.cfg.qbn.collect_episodes_per_trace.max(1),
        ctx.cfg.seed.wrapping_add(0xC011),
    )?;
    let dir = ctx.dir("collect")?;
    let path = dir.join("dataset.txt");
    write_dataset(&path, &records, &ctx.cfg.fingerprint())?;
    Ok(vec![path])
}

fn stage_train_qbn(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let ds_path = ctx.artifact(Stage::TrainQbn, "collect/dataset.txt")?;
    let (records, _) = read_dataset(&ds_path)?;
    let mut obs_cfg = ctx.cfg.qbn.train.clone();
    let (qbn_obs, mse_obs) = train_qbn(QbnTarget::Obs, &records, &obs_cfg)?;
    obs_cfg.seed = obs_cfg.seed.wrapping_add(1);
    let (qbn_hidden, mse_hidden) = train_qbn(QbnTarget::Hidden, &records, &obs_cfg)?;
    let dir = ctx.dir("qbn")?;
    let obs_path = dir.join("qbn_obs.ckpt");
    let hidden_path = dir.join("qbn_hidden.ckpt");
    save_checkpoint(&qbn_obs, &ctx.cfg.fingerprint(), &obs_path)?;
    save_checkpoint(&qbn_hidden, &ctx.cfg.fingerprint(), &hidden_path)?;
    let metrics_path = dir.join("metrics.json");
    let metrics = serde_json::json!({ "mse_obs": mse_obs, "mse_hidden": mse_hidden });
    fs::write(&metrics_path, serde_json::to_string_pretty(&metrics).unwrap())
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    Ok(vec![obs_path, hidden_path, metrics_path])
}

fn stage_extract(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let policy = ctx.load_policy(Stage::Extract)?;
    let (qbn_obs, qbn_hidden) =
        ctx.load_qbns(Stage::Extract, "qbn/qbn_obs.ckpt", "qbn/qbn_hidden.ckpt")?;
    let ds_path = ctx.artifact(Stage::Extract, "collect/dataset.txt")?;
    let (records, _) = read_dataset(&ds_path)?;
    let traces = ctx.collect_traces(Stage::Extract)?;
    let fid_seed = ctx.cfg.seed.wrapping_add(0xF1DE);

    let discrete = discretize(&records, &qbn_obs, &qbn_hidden)?;
    let mut fsm = extract_fsm(&discrete, &policy, &qbn_hidden)?;
    let mut fsm_min = minimize_fsm(&fsm);
    let mut drl = PolicyActor::new(&policy);
    let mut report = fidelity(&fsm_min, &qbn_obs, &mut drl, &ctx.cfg.sim, &traces, fid_seed)?;
    drop(drl);

    let mut finetuned = false;
    let mut final_policy = policy;
    let mut final_obs = qbn_obs;
    let mut final_hidden = qbn_hidden;
    if report.open_loop_agreement < ctx.cfg.qbn.fidelity_threshold
        && ctx.cfg.qbn.finetune_epochs > 0
    {
        // continue A2C with the bottlenecks inserted, then rebuild the
        // machine against the controller it now mirrors exactly
        let mut ft_cfg = ctx.cfg.train.clone();
        if ctx.cfg.qbn.finetune_learning_rate > 0.0 {
            ft_cfg.learning_rate = ctx.cfg.qbn.finetune_learning_rate;
        }
        let inserted = finetune_with_qbns(
            final_policy,
            final_obs,
            final_hidden,
            &ctx.cfg.sim,
            &traces,
            ctx.cfg.qbn.finetune_epochs,
            &ft_cfg,
        )?;
        let records2 = collect_dataset(
            &inserted.policy,
            Some((&inserted.qbn_obs, &inserted.qbn_hidden)),
            &ctx.cfg.sim,
            &traces,
            ctx.cfg.qbn.collect_episodes_per_trace.max(1),
            ctx.cfg.seed.wrapping_add(0xC012),
        )?;
        let discrete2 = discretize(&records2, &inserted.qbn_obs, &inserted.qbn_hidden)?;
        fsm = extract_fsm(&discrete2, &inserted.policy, &inserted.qbn_hidden)?;
        fsm_min = minimize_fsm(&fsm);
        let mut drl2 = InsertedActor::new(&inserted);
        report = fidelity(
            &fsm_min,
            &inserted.qbn_obs,
            &mut drl2,
            &ctx.cfg.sim,
            &traces,
            fid_seed,
        )?;
        drop(drl2);
        finetuned = true;
        final_policy = inserted.policy;
        final_obs = inserted.qbn_obs;
        final_hidden = inserted.qbn_hidden;
    }

    let dir = ctx.dir("fsm")?;
    let fp = ctx.cfg.fingerprint();
    let table_path = dir.join("fsm.txt");
    export_fsm_table(&fsm, &table_path)?;
    let min_path = dir.join("fsm_min.txt");
    export_fsm_table(&fsm_min, &min_path)?;
    let dot_path = dir.join("fsm.dot");
    export_fsm_graph(&fsm_min, &dot_path)?;
    let policy_path = dir.join("policy_final.ckpt");
    save_checkpoint(&final_policy, &fp, &policy_path)?;
    let obs_path = dir.join("qbn_obs_final.ckpt");
    save_checkpoint(&final_obs, &fp, &obs_path)?;
    let hidden_path = dir.join("qbn_hidden_final.ckpt");
    save_checkpoint(&final_hidden, &fp, &hidden_path)?;
    let extract_report = ExtractReport {
        fidelity: report,
        states_original: fsm.num_states(),
        states_minimized: fsm_min.num_states(),
        conflict_rate: fsm.conflict_rate,
        consistency_rate: fsm.consistency_rate,
        finetuned,
    };
    let report_path = dir.join("fidelity.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&extract_report).unwrap(),
    )
    .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    Ok(vec![
        table_path,
        min_path,
        dot_path,
        policy_path,
        obs_path,
        hidden_path,
        report_path,
    ])
}

fn load_extract_report(ctx: &RunContext, stage: Stage) -> Result<ExtractReport> {
    let path = ctx.artifact(stage, "fsm/fidelity.json")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("fidelity parse: {e}")))
}

fn load_final_controller(
    ctx: &RunContext,
    stage: Stage,
) -> Result<(InsertedPolicy, bool, crate::fsm::Fsm)> {
    let report = load_extract_report(ctx, stage)?;
    let policy_path = ctx.artifact(stage, "fsm/policy_final.ckpt")?;
    let mut policy = GruPolicy::new(ctx.cfg.train.seed);
    load_checkpoint(&mut policy, &policy_path)?;
    let (qbn_obs, qbn_hidden) = ctx.load_qbns(
        stage,
        "fsm/qbn_obs_final.ckpt",
        "fsm/qbn_hidden_final.ckpt",
    )?;
    let fsm = import_fsm_table(&ctx.artifact(stage, "fsm/fsm_min.txt")?)?;
    Ok((
        InsertedPolicy {
            policy,
            qbn_obs,
            qbn_hidden,
        },
        report.finetuned,
        fsm,
    ))
}

fn stage_evaluate(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let holdout = ctx.load_traces(Stage::Evaluate, "holdout_")?;
    let (controller, _, fsm) = load_final_controller(ctx, Stage::Evaluate)?;
    let mut default = DefaultActor;
    let mut handcrafted = HandcraftedActor {
        threshold: HANDCRAFTED_THRESHOLD,
    };
    // the DRL row is the original trained policy; the fsm-vs-drl gap then
    // measures the full cost of distillation (quantization + fine-tuning
    // drift + tabulation), not just the last step
    let mut policy = GruPolicy::new(ctx.cfg.train.seed);
    load_checkpoint(&mut policy, &ctx.artifact(Stage::Evaluate, "train/policy.ckpt")?)?;
    let mut drl = PolicyActor::new(&policy);
    let mut fsm_actor = FsmActor::new(&fsm, &controller.qbn_obs);
    let mut actors: Vec<(&str, &mut dyn Actor)> = vec![
        ("default", &mut default),
        ("handcrafted", &mut handcrafted),
        ("drl", &mut drl),
        ("fsm", &mut fsm_actor),
    ];
    let table = compare(
        &mut actors,
        &ctx.cfg.sim,
        &holdout,
        ctx.cfg.seed.wrapping_add(0xE7A1),
    )?;
    let dir = ctx.dir("evaluate")?;
    let json_path = dir.join("comparison.json");
    let text_path = dir.join("comparison.txt");
    write_comparison(&table, &json_path, &text_path)?;
    Ok(vec![json_path, text_path])
}

fn stage_interpret(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let holdout = ctx.load_traces(Stage::Interpret, "holdout_")?;
    let (controller, _, fsm) = load_final_controller(ctx, Stage::Interpret)?;
    let report = interpret(
        &fsm,
        &controller.qbn_obs,
        &ctx.cfg.sim,
        &holdout,
        ctx.cfg.seed.wrapping_add(0xE7A1),
        ctx.cfg.interpret.window,
    )?;
    let dir = ctx.dir("interpret")?;
    let data_path = dir.join("report.json");
    let text_path = dir.join("report.txt");
    render_report(&report, &data_path, &text_path)?;
    Ok(vec![data_path, text_path])
}

fn stage_prereqs(ctx: &RunContext, stage: Stage) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    match stage {
        Stage::GenWorkloads => {}
        Stage::Calibrate => {
            v.push(ctx.artifact(stage, "workloads/profiles.toml")?);
        }
        Stage::Train => {
            v.extend(ctx.list_traces(stage, "standard_")?);
            v.extend(ctx.list_traces(stage, "real_")?);
        }
        Stage::Collect => {
            v.push(ctx.artifact(stage, "train/policy.ckpt")?);
            v.extend(ctx.list_traces(stage, "real_")?);
        }
        Stage::TrainQbn => {
            v.push(ctx.artifact(stage, "collect/dataset.txt")?);
        }
        Stage::Extract => {
            v.push(ctx.artifact(stage, "collect/dataset.txt")?);
            v.push(ctx.artifact(stage, "train/policy.ckpt")?);
            v.push(ctx.artifact(stage, "qbn/qbn_obs.ckpt")?);
            v.push(ctx.artifact(stage, "qbn/qbn_hidden.ckpt")?);
            v.extend(ctx.list_traces(stage, "real_")?);
        }
        Stage::Evaluate => {
            v.push(ctx.artifact(stage, "train/policy.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/fsm_min.txt")?);
            v.push(ctx.artifact(stage, "fsm/policy_final.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/qbn_obs_final.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/qbn_hidden_final.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/fidelity.json")?);
            v.extend(ctx.list_traces(stage, "holdout_")?);
        }
        Stage::Interpret => {
            v.push(ctx.artifact(stage, "fsm/fsm_min.txt")?);
            v.push(ctx.artifact(stage, "fsm/policy_final.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/qbn_obs_final.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/qbn_hidden_final.ckpt")?);
            v.push(ctx.artifact(stage, "fsm/fidelity.json")?);
            v.extend(ctx.list_traces(stage, "holdout_")?);
        }
    }
    Ok(v)
}

fn run_stage_fn(ctx: &RunContext, stage: Stage) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::GenWorkloads => stage_gen_workloads(ctx),
        Stage::Calibrate => stage_calibrate(ctx),
        Stage::Train => stage_train(ctx),
        Stage::Collect => stage_collect(ctx),
        Stage::TrainQbn => stage_train_qbn(ctx),
        Stage::Extract => stage_extract(ctx),
        Stage::Evaluate => stage_evaluate(ctx),
        Stage::Interpret => stage_interpret(ctx),
    }
}

/// Outcome of one stage within a pipeline invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Runs one stage, skipping it when the manifest shows the same inputs
/// already produced outputs that still match their checksums.
pub fn run_stage(cfg: &AppConfig, run_dir: &Path, stage: Stage) -> Result<StageOutcome> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    let ctx = RunContext { cfg, run_dir };
    let mut manifest = load_manifest(run_dir)?;
    manifest.config_fingerprint = cfg.fingerprint();
    manifest.seed = cfg.seed;
    let prereqs = stage_prereqs(&ctx, stage)?;
    let mut input = format!("{} {} {}", cfg.fingerprint(), cfg.seed, stage.name());
    for p in &prereqs {
        input.push(' ');
        input.push_str(&file_digest(p)?);
    }
    let input_fingerprint = hex_digest(input.as_bytes());
    if let Some(rec) = manifest.stages.get(stage.name()) {
        if rec.input_fingerprint == input_fingerprint {
            let unchanged = rec.outputs.iter().all(|(rel, digest)| {
                let p = run_dir.join(rel);
                p.exists() && file_digest(&p).map(|d| &d == digest).unwrap_or(false)
            });
            if unchanged && !rec.outputs.is_empty() {
                return Ok(StageOutcome::Skipped);
            }
        }
    }
    let outputs = run_stage_fn(&ctx, stage)?;
    let mut recorded = BTreeMap::new();
    for p in &outputs {
        let rel = p
            .strip_prefix(run_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .to_string();
        recorded.insert(rel, file_digest(p)?);
    }
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            input_fingerprint,
            outputs: recorded,
        },
    );
    save_manifest(run_dir, &manifest)?;
    Ok(StageOutcome::Ran)
}

/// Runs all stages in order, optionally stopping after `through`.
pub fn run_pipeline(
    cfg: &AppConfig,
    run_dir: &Path,
    through: Option<Stage>,
) -> Result<Vec<(Stage, StageOutcome)>> {
    let mut results = Vec::new();
    for stage in ALL_STAGES {
        let outcome = run_stage(cfg, run_dir, stage)?;
        results.push((stage, outcome));
        if Some(stage) == through {
            break;
        }
    }
    Ok(results)
}
