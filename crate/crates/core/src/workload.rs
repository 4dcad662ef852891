//! IO catalog, synthetic workload classes, and trace persistence.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of IO types in the catalog: 7 read sizes plus 7 write sizes.
pub const CATALOG_LEN: usize = 14;

/// Power-of-two request sizes shared by reads and writes, in KB.
pub const SIZES_KB: [u32; 7] = [4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IoKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoType {
    pub size_kb: u32,
    pub kind: IoKind,
}

/// The fixed 14-entry catalog: reads ascending by size, then writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoCatalog {
    entries: [IoType; CATALOG_LEN],
}

impl IoCatalog {
    pub fn entries(&self) -> &[IoType; CATALOG_LEN] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> IoType {
        self.entries[i]
    }

    /// Column name for entry `i` in trace files, e.g. `r4` or `w256`.
    pub fn column_name(&self, i: usize) -> String {
        let e = self.entries[i];
        match e.kind {
            IoKind::Read => format!("r{}", e.size_kb),
            IoKind::Write => format!("w{}", e.size_kb),
        }
    }
}

pub fn make_catalog() -> IoCatalog {
    let mut entries = [IoType {
        size_kb: 0,
        kind: IoKind::Read,
    }; CATALOG_LEN];
    for (i, &s) in SIZES_KB.iter().enumerate() {
        entries[i] = IoType {
            size_kb: s,
            kind: IoKind::Read,
        };
        entries[i + 7] = IoType {
            size_kb: s,
            kind: IoKind::Write,
        };
    }
    IoCatalog { entries }
}

/// One interval's IO mixture and request count.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalWorkload {
    pub ratios: [f64; CATALOG_LEN],
    pub count: u64,
}

impl IntervalWorkload {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(Error::Invariant("interval ratios must be non-negative".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if self.count > 0 {
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "interval ratios sum to {sum}, expected 1 (count > 0)"
                )));
            }
        } else if sum != 0.0 && (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "interval ratios sum to {sum}, expected 0 or 1 (count = 0)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    pub catalog: IoCatalog,
    pub intervals: Vec<IntervalWorkload>,
    pub label: String,
    pub seed: u64,
}

impl WorkloadTrace {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::Invariant("trace must have T >= 1 intervals".into()));
        }
        for (t, iw) in self.intervals.iter().enumerate() {
            iw.validate()
                .map_err(|e| Error::Invariant(format!("interval {t}: {e}")))?;
        }
        Ok(())
    }
}

/// Temporal intensity pattern of a workload class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Constant,
    Square,
    Sawtooth,
    Sine,
    Burst,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pattern::Constant => "constant",
            Pattern::Square => "square",
            Pattern::Sawtooth => "sawtooth",
            Pattern::Sine => "sine",
            Pattern::Burst => "burst",
        };
        f.write_str(s)
    }
}

impl Pattern {
    /// Multiplicative intensity at interval `t`; always within `[1-a, 1+a]`.
    pub fn value(self, t: usize, period: usize, amplitude: f64) -> f64 {
        let p = period.max(2);
        let phase = t % p;
        match self {
            Pattern::Constant => 1.0,
            Pattern::Square => {
                if phase < p / 2 {
                    1.0 + amplitude
                } else {
                    1.0 - amplitude
                }
            }
            Pattern::Sawtooth => 1.0 - amplitude + 2.0 * amplitude * phase as f64 / (p - 1) as f64,
            Pattern::Sine => {
                1.0 + amplitude * (2.0 * std::f64::consts::PI * phase as f64 / p as f64).sin()
            }
            Pattern::Burst => {
                if phase < (p + 4) / 5 {
                    1.0 + amplitude
                } else {
                    1.0 - amplitude
                }
            }
        }
    }
}

/// A synthetic workload class: a fixed IO mixture plus a count pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    pub mixture: Vec<f64>,
    pub pattern: Pattern,
    pub base_count: u64,
    pub amplitude: f64,
    pub period: usize,
}

impl ClassProfile {
    pub fn validate(&self) -> Result<()> {
        if self.mixture.len() != CATALOG_LEN {
            return Err(Error::Invariant(format!(
                "profile {}: mixture has {} entries, expected {CATALOG_LEN}",
                self.name,
                self.mixture.len()
            )));
        }
        if self.mixture.iter().any(|&m| m < 0.0) {
            return Err(Error::Invariant(format!(
                "profile {}: negative mixture weight",
                self.name
            )));
        }
        let sum: f64 = self.mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "profile {}: mixture sums to {sum}, expected 1",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Invariant(format!(
                "profile {}: amplitude out of [0,1]",
                self.name
            )));
        }
        if self.pattern != Pattern::Constant && self.period < 2 {
            return Err(Error::Invariant(format!(
                "profile {}: periodic pattern needs period >= 2",
                self.name
            )));
        }
        Ok(())
    }
}

fn mixture(weights: &[(usize, f64)]) -> Vec<f64> {
    let mut m = vec![0.0; CATALOG_LEN];
    for &(i, w) in weights {
        m[i] = w;
    }
    let s: f64 = m.iter().sum();
    for v in &mut m {
        *v /= s;
    }
    m
}

/// The 12 shipped workload classes. Catalog indices 0..=6 are reads
/// (4..256 KB ascending), 7..=13 the same sizes as writes. Intensities are
/// calibrated so the default no-migration policy lands in K ∈ [1.2T, 3T]
/// under the default simulator config (checked by `harness::calibrate`).
pub fn default_profiles() -> Vec<ClassProfile> {
    vec![
        ClassProfile {
            name: "oltp-small-read".into(),
            mixture: mixture(&[(0, 0.5), (1, 0.3), (2, 0.1), (7, 0.1)]),
            pattern: Pattern::Sine,
            base_count: 1000,
            amplitude: 0.3,
            period: 16,
        },
        ClassProfile {
            name: "olap-large-read".into(),
            mixture: mixture(&[(4, 0.2), (5, 0.4), (6, 0.4)]),
            pattern: Pattern::Sawtooth,
            base_count: 38,
            amplitude: 0.4,
            period: 12,
        },
        ClassProfile {
            name: "backup-write".into(),
            mixture: mixture(&[(12, 0.5), (13, 0.5)]),
            pattern: Pattern::Constant,
            base_count: 33,
            amplitude: 0.0,
            period: 2,
        },
        ClassProfile {
            name: "log-write-small".into(),
            mixture: mixture(&[(7, 0.6), (8, 0.4)]),
            pattern: Pattern::Square,
            base_count: 1300,
            amplitude: 0.25,
            period: 10,
        },
        ClassProfile {
            name: "mixed-burst".into(),
            mixture: vec![1.0 / CATALOG_LEN as f64; CATALOG_LEN],
            pattern: Pattern::Burst,
            base_count: 70,
            amplitude: 0.8,
            period: 12,
        },
        ClassProfile {
            name: "vod-stream-read".into(),
            mixture: mixture(&[(4, 0.5), (5, 0.5)]),
            pattern: Pattern::Sine,
            base_count: 72,
            amplitude: 0.2,
            period: 20,
        },
        ClassProfile {
            name: "db-checkpoint".into(),
            mixture: mixture(&[(0, 0.3), (1, 0.2), (12, 0.25), (13, 0.25)]),
            pattern: Pattern::Square,
            base_count: 62,
            amplitude: 0.5,
            period: 16,
        },
        ClassProfile {
            name: "vm-boot-read".into(),
            mixture: mixture(&[(2, 0.4), (3, 0.4), (4, 0.2)]),
            pattern: Pattern::Sawtooth,
            base_count: 250,
            amplitude: 0.6,
            period: 8,
        },
        ClassProfile {
            name: "archive-write".into(),
            mixture: mixture(&[(11, 0.5), (12, 0.5)]),
            pattern: Pattern::Constant,
            base_count: 56,
            amplitude: 0.0,
            period: 2,
        },
        ClassProfile {
            name: "web-cache-read".into(),
            mixture: mixture(&[(0, 0.4), (1, 0.4), (2, 0.2)]),
            pattern: Pattern::Burst,
            base_count: 900,
            amplitude: 0.6,
            period: 10,
        },
        ClassProfile {
            name: "sync-mirror-write".into(),
            mixture: mixture(&[(9, 0.5), (10, 0.5)]),
            pattern: Pattern::Sine,
            base_count: 270,
            amplitude: 0.4,
            period: 14,
        },
        ClassProfile {
            name: "hpc-scratch-mixed".into(),
            mixture: mixture(&[(5, 0.25), (6, 0.25), (12, 0.25), (13, 0.25)]),
            pattern: Pattern::Square,
            base_count: 34,
            amplitude: 0.3,
            period: 12,
        },
    ]
}

/// Seeded Dirichlet-style jitter: gamma draws with concentration
/// `100 * mixture`, renormalized. Zero-weight components stay zero.
fn jitter_mixture(mixture: &[f64], rng: &mut ChaCha8Rng) -> [f64; CATALOG_LEN] {
    let mut out = [0.0; CATALOG_LEN];
    let mut sum = 0.0;
    for (i, &m) in mixture.iter().enumerate() {
        if m > 0.0 {
            let g = Gamma::new(100.0 * m, 1.0).expect("gamma shape > 0");
            out[i] = g.sample(rng);
            sum += out[i];
        }
    }
    if sum > 0.0 {
        for v in &mut out {
            *v /= sum;
        }
    }
    out
}

pub fn gen_standard_trace(profile: &ClassProfile, t_len: usize, seed: u64) -> Result<WorkloadTrace> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("trace length T must be >= 1".into()));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut intervals = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let count =
            (profile.base_count as f64 * profile.pattern.value(t, profile.period, profile.amplitude))
                .round() as u64;
        let ratios = jitter_mixture(&profile.mixture, &mut rng);
        let ratios = if count == 0 { [0.0; CATALOG_LEN] } else { ratios };
        intervals.push(IntervalWorkload { ratios, count });
    }
    let trace = WorkloadTrace {
        catalog: make_catalog(),
        intervals,
        label: profile.name.clone(),
        seed,
    };
    trace.validate()?;
    Ok(trace)
}

/// Concatenates seeded snippets of freshly generated standard traces,
/// one uniformly chosen class per snippet, truncated to `t_len`.
pub fn gen_real_trace(
    profiles: &[ClassProfile],
    t_len: usize,
    snippet_len: usize,
    seed: u64,
) -> Result<WorkloadTrace> {
    if snippet_len == 0 {
        return Err(Error::InvalidArgument("snippet_len must be >= 1".into()));
    }
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("profiles must be non-empty".into()));
    }
    if snippet_len > t_len {
        return Err(Error::InvalidArgument(
            "snippet_len must not exceed trace length".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut intervals = Vec::with_capacity(t_len);
    while intervals.len() < t_len {
        let class = rng.random_range(0..profiles.len());
        let snippet_seed: u64 = rng.random();
        let snippet = gen_standard_trace(&profiles[class], snippet_len, snippet_seed)?;
        for iw in snippet.intervals {
            if intervals.len() == t_len {
                break;
            }
            intervals.push(iw);
        }
    }
    Ok(WorkloadTrace {
        catalog: make_catalog(),
        intervals,
        label: "real".into(),
        seed,
    })
}

const TRACE_MAGIC: &str = "# coremig-trace v1";

/// Writes a trace as line-oriented text. Ratios are printed with 18
/// significant digits so parsing restores the exact f64 bits.
pub fn write_trace(path: &Path, trace: &WorkloadTrace) -> Result<()> {
    trace.validate()?;
    let mut out = String::new();
    out.push_str(TRACE_MAGIC);
    out.push('\n');
    out.push_str(&format!("# label {}\n", trace.label));
    out.push_str(&format!("# seed {}\n", trace.seed));
    out.push_str("interval count");
    for i in 0..CATALOG_LEN {
        out.push(' ');
        out.push_str(&trace.catalog.column_name(i));
    }
    out.push('\n');
    for (t, iw) in trace.intervals.iter().enumerate() {
        out.push_str(&format!("{t} {}", iw.count));
        for r in iw.ratios.iter() {
            out.push_str(&format!(" {r:.17e}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<WorkloadTrace> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut label = String::new();
    let mut seed = 0u64;
    let mut intervals = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        if lineno == 0 {
            if line != TRACE_MAGIC {
                return Err(Error::parse(&p, n, "missing trace magic line"));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("# label ") {
            label = rest.to_string();
            continue;
        }
        if let Some(rest) = line.strip_prefix("# seed ") {
            seed = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(&p, n, "invalid seed"))?;
            continue;
        }
        if line.starts_with("interval ") {
            let cols = line.split_whitespace().count();
            if cols != 2 + CATALOG_LEN {
                return Err(Error::parse(
                    &p,
                    n,
                    format!("header names {cols} columns, expected {}", 2 + CATALOG_LEN),
                ));
            }
            saw_header = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            return Err(Error::parse(&p, n, "data row before column header"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + CATALOG_LEN {
            return Err(Error::parse(
                &p,
                n,
                format!(
                    "row has {} fields, expected {} (interval, count, 14 ratios)",
                    fields.len(),
                    2 + CATALOG_LEN
                ),
            ));
        }
        let count: u64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(&p, n, "field 2: invalid count"))?;
        let mut ratios = [0.0; CATALOG_LEN];
        for (i, r) in ratios.iter_mut().enumerate() {
            *r = fields[2 + i]
                .parse()
                .map_err(|_| Error::parse(&p, n, format!("field {}: invalid ratio", 3 + i)))?;
        }
        let iw = IntervalWorkload { ratios, count };
        iw.validate()
            .map_err(|e| Error::Invariant(format!("{p}:{n}: {e}")))?;
        intervals.push(iw);
    }
    let trace = WorkloadTrace {
        catalog: make_catalog(),
        intervals,
        label,
        seed,
    };
    trace.validate()?;
    Ok(trace)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfilesFile {
    profiles: Vec<ClassProfile>,
}

pub fn write_profiles(path: &Path, profiles: &[ClassProfile]) -> Result<()> {
    let file = ProfilesFile {
        profiles: profiles.to_vec(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_profiles(path: &Path) -> Result<Vec<ClassProfile>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: ProfilesFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for prof in &file.profiles {
        prof.validate()?;
    }
    Ok(file.profiles)
}
