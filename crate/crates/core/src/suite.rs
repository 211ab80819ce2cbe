//! Experiment suites: the configuration file, fan-out of independent
//! (point, seed) runs over a worker pool, CSV tables and threshold checks.
//!
//! Every task is a pure function of the configuration and its seed, and
//! rows are emitted in configuration order, so tables are byte-identical
//! for any worker count.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::allocation::Budgets;
use crate::error::{Error, Result};
use crate::hashing::NodeRef;
use crate::routing::PolicyKind;
use crate::selftest::Check;
use crate::sim::{
    self, find_saturation, HotSetMode, LoadSignal, SaturationSearch, ServiceMode, SimConfig,
    Topology,
};
use crate::theory::{self, TheoryConfig};
use crate::workload::{zipf_probs, QueryDistribution};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "DISTCACHE_WORKERS";

pub const SUITES: [&str; 7] = [
    "fig8a",
    "fig8b",
    "fig8c",
    "fig9",
    "fig10",
    "feasibility",
    "stationarity",
];

/// Half-open seed interval written `a..b`; `a..=b` and a single `n` are
/// also accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if end <= start {
            return Err(Error::invalid(format!("empty seed range {start}..{end}")));
        }
        Ok(SeedRange { start, end })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (self.start..self.end).collect()
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl FromStr for SeedRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid(format!("bad seed `{x}` in `{s}`")))
        };
        if let Some((a, b)) = s.split_once("..=") {
            SeedRange::new(num(a)?, num(b)?.saturating_add(1))
        } else if let Some((a, b)) = s.split_once("..") {
            SeedRange::new(num(a)?, num(b)?)
        } else {
            let n = num(s)?;
            SeedRange::new(n, n + 1)
        }
    }
}

impl TryFrom<String> for SeedRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SeedRange> for String {
    fn from(r: SeedRange) -> Self {
        r.to_string()
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WriteSweep {
    pub skew: f64,
    pub cache_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    /// Seeds of the throughput suites.
    pub seeds: SeedRange,
    /// Seeds of the theory probes.
    pub theory_seeds: SeedRange,
    pub out: PathBuf,
    pub universe: u64,
    pub policies: Vec<PolicyKind>,
    /// Skew of the cache-size, scale and failure suites.
    pub skew: f64,
    pub skews: Vec<f64>,
    /// Slots per cache node outside the cache-size sweep.
    pub cache_size: usize,
    pub cache_sizes: Vec<usize>,
    pub rack_counts: Vec<u32>,
    pub write_ratios: Vec<f64>,
    pub write_sweeps: Vec<WriteSweep>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "desk".into(),
            seeds: SeedRange { start: 0, end: 3 },
            theory_seeds: SeedRange { start: 0, end: 100 },
            out: PathBuf::from("results"),
            universe: 1_000_000,
            policies: vec![
                PolicyKind::NoCache,
                PolicyKind::PartitionOnly,
                PolicyKind::Replication,
                PolicyKind::Pot,
            ],
            skew: 0.99,
            skews: vec![0.0, 0.9, 0.95, 0.99],
            cache_size: 100,
            cache_sizes: vec![10, 50, 100, 200],
            rack_counts: vec![2, 4, 6, 8],
            write_ratios: vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.5],
            write_sweeps: vec![
                WriteSweep {
                    skew: 0.9,
                    cache_size: 10,
                },
                WriteSweep {
                    skew: 0.99,
                    cache_size: 100,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub horizon: f64,
    pub warmup: f64,
    pub load_signal: LoadSignal,
    pub hot_set: HotSetMode,
    pub queue_limit: u32,
    pub detection_delay: f64,
    pub vnodes: u32,
    pub saturation_iterations: u32,
    pub max_drop: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            horizon: 10.0,
            warmup: 1.0,
            load_signal: LoadSignal::CurrentWindow,
            hot_set: HotSetMode::Oracle,
            queue_limit: 32,
            detection_delay: 1.0,
            vnodes: crate::allocation::DEFAULT_VNODES,
            saturation_iterations: 12,
            max_drop: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureSection {
    pub spines: u32,
    pub racks: u32,
    /// Spines failed together at `fail_at`.
    pub failed: u32,
    pub fail_at: f64,
    pub recover_at: f64,
    pub horizon: f64,
    /// Offered load of the recovery run, as a fraction of saturation.
    pub load_fraction: f64,
}

impl Default for FailureSection {
    fn default() -> Self {
        FailureSection {
            spines: 16,
            racks: 16,
            failed: 4,
            fail_at: 4.0,
            recover_at: 9.0,
            horizon: 14.0,
            load_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub topology: Topology,
    pub sim: SimSection,
    pub failure: FailureSection,
    pub theory: TheoryConfig,
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line assigning `key`, or 0 when the key is absent.
fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

type FieldError = (&'static str, String);

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_at(text, s.start)),
            msg: e.message().trim().to_string(),
        })?;
        cfg.check().map_err(|(field, msg)| Error::Parse {
            line: line_of_key(text, field),
            msg: format!("{field}: {msg}"),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| Error::Config(format!("{field}: {msg}")))
    }

    fn check(&self) -> std::result::Result<(), FieldError> {
        let e = &self.experiment;
        let nonempty = |field: &'static str, len: usize| {
            if len == 0 {
                Err((field, "must not be empty".to_string()))
            } else {
                Ok(())
            }
        };
        nonempty("policies", e.policies.len())?;
        nonempty("skews", e.skews.len())?;
        nonempty("cache_sizes", e.cache_sizes.len())?;
        nonempty("rack_counts", e.rack_counts.len())?;
        nonempty("write_ratios", e.write_ratios.len())?;
        nonempty("write_sweeps", e.write_sweeps.len())?;
        if e.universe == 0 {
            return Err(("universe", "must be at least 1".into()));
        }
        let skews = e
            .skews
            .iter()
            .chain([&e.skew])
            .chain(e.write_sweeps.iter().map(|w| &w.skew));
        if let Some(s) = skews.into_iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(("skews", format!("skew {s} must be finite and >= 0")));
        }
        if e.cache_size == 0
            || e.cache_sizes.contains(&0)
            || e.write_sweeps.iter().any(|w| w.cache_size == 0)
        {
            return Err(("cache_sizes", "cache sizes must be at least 1".into()));
        }
        if e.rack_counts.contains(&0) {
            return Err(("rack_counts", "rack counts must be at least 1".into()));
        }
        if let Some(w) = e.write_ratios.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(("write_ratios", format!("write ratio {w} not in [0, 1]")));
        }
        self.topology
            .validate()
            .map_err(|err| ("topology", err.to_string()))?;
        let s = &self.sim;
        if !(s.horizon > 0.0) || !(0.0..s.horizon).contains(&s.warmup) {
            return Err((
                "horizon",
                format!(
                    "need 0 <= warmup < horizon, got {} and {}",
                    s.warmup, s.horizon
                ),
            ));
        }
        if s.queue_limit == 0 {
            return Err(("queue_limit", "must be at least 1".into()));
        }
        if !(1..=40).contains(&s.saturation_iterations) {
            return Err(("saturation_iterations", "must be in 1..=40".into()));
        }
        if !(s.max_drop > 0.0 && s.max_drop < 1.0) {
            return Err(("max_drop", "must be in (0, 1)".into()));
        }
        if !(s.detection_delay >= 0.0) {
            return Err(("detection_delay", "must be >= 0".into()));
        }
        let f = &self.failure;
        if f.failed == 0 || f.failed >= f.spines {
            return Err((
                "failed",
                format!("need 1 <= failed < spines ({})", f.spines),
            ));
        }
        if f.racks == 0 {
            return Err(("racks", "must be at least 1".into()));
        }
        if !(f.fail_at > s.warmup
            && f.fail_at + s.detection_delay < f.recover_at
            && f.recover_at < f.horizon)
        {
            return Err((
                "fail_at",
                "need warmup < fail_at, fail_at + detection_delay < recover_at < horizon".into(),
            ));
        }
        if !(f.load_fraction > 0.0 && f.load_fraction <= 1.0) {
            return Err(("load_fraction", "must be in (0, 1]".into()));
        }
        self.theory
            .validate()
            .map_err(|err| ("theory", err.to_string()))?;
        Ok(())
    }

    /// Stable digest of everything that affects results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.out = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        format!("{:016x}", xxh3_64(text.as_bytes()))
    }
}

/// One CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: &str, headers: &[&str]) -> Self {
        Table {
            file: file.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutput {
    pub suite: String,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Coefficient of determination of the least-squares line through the
/// points.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return if syy == 0.0 { 1.0 } else { 0.0 };
    }
    sxy * sxy / (sxx * syy)
}

/// `(max - min) / max`.
pub fn relative_spread(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::MIN, f64::max);
    let min = xs.iter().copied().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Axis values, topology, workload, slots per node and write ratio.
type SweepPoint = (Vec<f64>, Topology, Arc<QueryDistribution>, usize, f64);

#[derive(Clone, Debug)]
struct ThroughputTask {
    axis: Vec<f64>,
    topology: Topology,
    policy: PolicyKind,
    dist: Arc<QueryDistribution>,
    cache_size: usize,
    write_ratio: f64,
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct ThroughputResult {
    offered: f64,
    throughput: f64,
    hit_ratio: f64,
    drop_fraction: f64,
}

/// Mean throughput per (axis point, policy), in task order.
#[derive(Clone, Debug, Default)]
pub struct Means {
    pub points: Vec<(Vec<f64>, PolicyKind, f64)>,
}

impl Means {
    pub fn get(&self, axis: &[f64], policy: PolicyKind) -> Option<f64> {
        self.points
            .iter()
            .find(|(a, p, _)| a.as_slice() == axis && *p == policy)
            .map(|x| x.2)
    }

    pub fn axes(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for (a, _, _) in &self.points {
            if !out.contains(a) {
                out.push(a.clone());
            }
        }
        out
    }
}

/// Runs suites over a dedicated worker pool.
pub struct Runner {
    cfg: ExperimentConfig,
    pool: rayon::ThreadPool,
    hash: String,
}

/// Worker count: one when deterministic scheduling is forced, otherwise
/// the environment variable or the machine's parallelism.
pub fn worker_count(deterministic: bool) -> Result<usize> {
    if deterministic {
        return Ok(1);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, workers: usize) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let hash = cfg.hash();
        Ok(Runner { cfg, pool, hash })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn run(&self, suite: &str) -> Result<SuiteOutput> {
        match suite {
            "fig8a" => self.fig8a(),
            "fig8b" => self.fig8b(),
            "fig8c" => self.fig8c(),
            "fig9" => self.fig9(),
            "fig10" => self.fig10(),
            "feasibility" => self.feasibility(),
            "stationarity" => self.stationarity(),
            other => Err(Error::invalid(format!(
                "unknown suite `{other}`; expected one of {}",
                SUITES.join(", ")
            ))),
        }
    }

    fn par_map<T: Sync, R: Send>(
        &self,
        items: &[T],
        f: impl Fn(&T) -> Result<R> + Sync + Send,
    ) -> Result<Vec<R>> {
        self.pool
            .install(|| items.par_iter().map(f).collect::<Vec<_>>())
            .into_iter()
            .collect()
    }

    fn distribution(&self, skew: f64) -> Result<Arc<QueryDistribution>> {
        Ok(Arc::new(zipf_probs(self.cfg.experiment.universe, skew)?))
    }

    fn sim_config(
        &self,
        topology: Topology,
        policy: PolicyKind,
        dist: Arc<QueryDistribution>,
        seed: u64,
    ) -> SimConfig {
        let s = &self.cfg.sim;
        let mut c = SimConfig::new(topology, policy, dist);
        c.budgets = Budgets::per_node(self.cfg.experiment.cache_size);
        c.horizon = s.horizon;
        c.warmup = s.warmup;
        c.seed = seed;
        c.service = ServiceMode::Loss {
            queue_limit: s.queue_limit,
        };
        c.load_signal = s.load_signal;
        c.hot_set = s.hot_set;
        c.detection_delay = s.detection_delay;
        c.vnodes = s.vnodes;
        c
    }

    fn search(&self) -> SaturationSearch {
        SaturationSearch {
            iterations: self.cfg.sim.saturation_iterations,
            max_drop: self.cfg.sim.max_drop,
            ceiling: None,
        }
    }

    fn throughput(&self, t: &ThroughputTask) -> Result<ThroughputResult> {
        let mut c = self.sim_config(t.topology.clone(), t.policy, t.dist.clone(), t.seed);
        c.budgets = Budgets::per_node(t.cache_size);
        c.write_ratio = t.write_ratio;
        let sat = find_saturation(&c, &self.search())?;
        let r = sat.report.as_ref();
        Ok(ThroughputResult {
            offered: sat.offered,
            throughput: sat.normalized_throughput,
            hit_ratio: r.map_or(0.0, |r| r.hit_ratio()),
            drop_fraction: r.map_or(0.0, |r| r.drop_fraction()),
        })
    }

    fn sweep(
        &self,
        name: &str,
        axis_names: &[&str],
        tasks: Vec<ThroughputTask>,
    ) -> Result<(Vec<Table>, Means)> {
        let results = self.par_map(&tasks, |t| self.throughput(t))?;
        let mut head: Vec<&str> = axis_names.to_vec();
        head.extend([
            "policy",
            "seed",
            "offered",
            "throughput",
            "hit_ratio",
            "drop_fraction",
            "config_hash",
        ]);
        let mut runs = Table::new(&format!("{name}_runs.csv"), &head);
        let mut head: Vec<&str> = axis_names.to_vec();
        head.extend(["policy", "mean", "stderr", "n", "seeds", "config_hash"]);
        let mut summary = Table::new(&format!("{name}.csv"), &head);
        let mut means = Means::default();
        let mut i = 0;
        while i < tasks.len() {
            let mut j = i;
            while j < tasks.len()
                && tasks[j].axis == tasks[i].axis
                && tasks[j].policy == tasks[i].policy
            {
                j += 1;
            }
            let xs: Vec<f64> = results[i..j].iter().map(|r| r.throughput).collect();
            let (mean, stderr) = mean_stderr(&xs);
            let axis: Vec<String> = tasks[i].axis.iter().map(|a| a.to_string()).collect();
            for (t, r) in tasks[i..j].iter().zip(&results[i..j]) {
                let mut row = axis.clone();
                row.extend([
                    t.policy.to_string(),
                    t.seed.to_string(),
                    num(r.offered),
                    num(r.throughput),
                    num(r.hit_ratio),
                    num(r.drop_fraction),
                    self.hash.clone(),
                ]);
                runs.rows.push(row);
            }
            let seeds = format!("{}..{}", tasks[i].seed, tasks[j - 1].seed + 1);
            let mut row = axis;
            row.extend([
                tasks[i].policy.to_string(),
                num(mean),
                num(stderr),
                (j - i).to_string(),
                seeds,
                self.hash.clone(),
            ]);
            summary.rows.push(row);
            means
                .points
                .push((tasks[i].axis.clone(), tasks[i].policy, mean));
            i = j;
        }
        Ok((vec![summary, runs], means))
    }

    fn tasks_for(&self, points: Vec<SweepPoint>) -> Vec<ThroughputTask> {
        let e = &self.cfg.experiment;
        let mut tasks = Vec::new();
        for (axis, topology, dist, cache_size, write_ratio) in points {
            for &policy in &e.policies {
                for seed in e.seeds.seeds() {
                    tasks.push(ThroughputTask {
                        axis: axis.clone(),
                        topology: topology.clone(),
                        policy,
                        dist: dist.clone(),
                        cache_size,
                        write_ratio,
                        seed,
                    });
                }
            }
        }
        tasks
    }

    fn fig8a(&self) -> Result<SuiteOutput> {
        let e = &self.cfg.experiment;
        let mut points = Vec::new();
        for &skew in &e.skews {
            points.push((
                vec![skew],
                self.cfg.topology.clone(),
                self.distribution(skew)?,
                e.cache_size,
                0.0,
            ));
        }
        let (tables, means) = self.sweep("fig8a", &["skew"], self.tasks_for(points))?;
        Ok(SuiteOutput {
            suite: "fig8a".into(),
            tables,
            checks: skew_checks(&means),
        })
    }

    fn fig8b(&self) -> Result<SuiteOutput> {
        let e = &self.cfg.experiment;
        let dist = self.distribution(e.skew)?;
        let points = e
            .cache_sizes
            .iter()
            .map(|&c| {
                (
                    vec![c as f64],
                    self.cfg.topology.clone(),
                    dist.clone(),
                    c,
                    0.0,
                )
            })
            .collect();
        let (tables, _) = self.sweep("fig8b", &["cache_size"], self.tasks_for(points))?;
        Ok(SuiteOutput {
            suite: "fig8b".into(),
            tables,
            checks: Vec::new(),
        })
    }

    fn fig8c(&self) -> Result<SuiteOutput> {
        let e = &self.cfg.experiment;
        let dist = self.distribution(e.skew)?;
        let points = e
            .rack_counts
            .iter()
            .map(|&m| {
                let t = Topology {
                    spines: m,
                    racks: m,
                    ..self.cfg.topology.clone()
                };
                (vec![m as f64], t, dist.clone(), e.cache_size, 0.0)
            })
            .collect();
        let (tables, means) = self.sweep("fig8c", &["racks"], self.tasks_for(points))?;
        Ok(SuiteOutput {
            suite: "fig8c".into(),
            tables,
            checks: scale_checks(&means),
        })
    }

    fn fig9(&self) -> Result<SuiteOutput> {
        let e = &self.cfg.experiment;
        let mut points = Vec::new();
        for sweep in &e.write_sweeps {
            let dist = self.distribution(sweep.skew)?;
            for &w in &e.write_ratios {
                points.push((
                    vec![sweep.skew, sweep.cache_size as f64, w],
                    self.cfg.topology.clone(),
                    dist.clone(),
                    sweep.cache_size,
                    w,
                ));
            }
        }
        let (tables, means) = self.sweep(
            "fig9",
            &["skew", "cache_size", "write_ratio"],
            self.tasks_for(points),
        )?;
        Ok(SuiteOutput {
            suite: "fig9".into(),
            tables,
            checks: write_checks(&means),
        })
    }

    fn fig10(&self) -> Result<SuiteOutput> {
        let seeds = self.cfg.experiment.seeds.seeds();
        let runs = self.par_map(&seeds, |&seed| self.failure_run(seed))?;
        let mut series = Table::new(
            "fig10_timeseries.csv",
            &["load", "seed", "time", "throughput", "config_hash"],
        );
        let mut phases = Table::new(
            "fig10.csv",
            &[
                "load",
                "phase",
                "mean",
                "stderr",
                "n",
                "seeds",
                "config_hash",
            ],
        );
        let loads = ["partial", "saturated"];
        let names = ["pre", "failed", "remapped", "recovered"];
        for (li, load) in loads.iter().enumerate() {
            for (seed, run) in seeds.iter().zip(&runs) {
                for &(t, x) in &run.series[li] {
                    series.rows.push(vec![
                        load.to_string(),
                        seed.to_string(),
                        num(t),
                        num(x),
                        self.hash.clone(),
                    ]);
                }
            }
            for (pi, phase) in names.iter().enumerate() {
                let xs: Vec<f64> = runs.iter().map(|r| r.phases[li][pi]).collect();
                let (mean, stderr) = mean_stderr(&xs);
                phases.rows.push(vec![
                    load.to_string(),
                    phase.to_string(),
                    num(mean),
                    num(stderr),
                    xs.len().to_string(),
                    self.cfg.experiment.seeds.to_string(),
                    self.hash.clone(),
                ]);
            }
        }
        let f = &self.cfg.failure;
        let phase_mean = |li: usize, pi: usize| {
            mean_stderr(&runs.iter().map(|r| r.phases[li][pi]).collect::<Vec<_>>()).0
        };
        let (pre, failed, remapped) = (phase_mean(0, 0), phase_mean(0, 1), phase_mean(0, 2));
        let recovery = (remapped - pre).abs() / pre;
        let expected = (f.spines - f.failed) as f64 / f.spines as f64;
        let sat_ratio = phase_mean(1, 1) / phase_mean(1, 0);
        let checks = vec![
            check(
                "fig10: partial load drops on failure and recovers after remap",
                failed < 0.99 * pre && recovery <= 0.02,
                format!(
                    "pre {pre:.3}, failed {failed:.3}, remapped {remapped:.3} ({:.2}% off)",
                    100.0 * recovery
                ),
            ),
            check(
                "fig10: saturated throughput before remap tracks surviving spines",
                (sat_ratio - expected).abs() <= 0.03,
                format!("ratio {sat_ratio:.3}, expected {expected:.3} +- 0.03"),
            ),
        ];
        Ok(SuiteOutput {
            suite: "fig10".into(),
            tables: vec![phases, series],
            checks,
        })
    }

    fn failure_run(&self, seed: u64) -> Result<FailureRun> {
        let f = &self.cfg.failure;
        let topology = Topology {
            spines: f.spines,
            racks: f.racks,
            ..self.cfg.topology.clone()
        };
        let dist = self.distribution(self.cfg.experiment.skew)?;
        let base = self.sim_config(topology, PolicyKind::Pot, dist, seed);
        let sat = find_saturation(&base, &self.search())?;
        let mut out = FailureRun {
            series: Vec::new(),
            phases: Vec::new(),
        };
        for fraction in [f.load_fraction, 1.0] {
            let mut c = base.clone();
            c.horizon = f.horizon;
            c.offered_rate = sat.offered * fraction * c.topology.server_rate;
            for i in 0..f.failed {
                let a = i * f.spines / f.failed;
                c = c.with_failure(NodeRef::Upper(a), f.fail_at, Some(f.recover_at));
            }
            let report = sim::run(&c)?;
            let series = report.throughput_series(c.sample_interval);
            let d = c.detection_delay;
            let windows = [
                (c.warmup, f.fail_at),
                (f.fail_at + c.sample_interval, f.fail_at + d),
                (f.fail_at + d + 1.0, f.recover_at),
                (f.recover_at + d + 1.0, f.horizon),
            ];
            let dt = c.sample_interval;
            let phases = windows
                .iter()
                .map(|&(a, b)| {
                    let xs: Vec<f64> = series
                        .iter()
                        .filter(|(t, _)| *t - dt >= a - 1e-9 && *t <= b + 1e-9)
                        .map(|x| x.1)
                        .collect();
                    mean_stderr(&xs).0
                })
                .collect();
            out.series.push(series);
            out.phases.push(phases);
        }
        Ok(out)
    }

    fn feasibility(&self) -> Result<SuiteOutput> {
        let t = &self.cfg.theory;
        let seeds = self.cfg.experiment.theory_seeds.seeds();
        let rows = self.par_map(&seeds, |&s| theory::feasibility_probe(t, s))?;
        let mut runs = Table::new(
            "feasibility_runs.csv",
            &[
                "seed",
                "objects",
                "utilization",
                "max_object_rate",
                "feasible",
                "config_hash",
            ],
        );
        for r in &rows {
            runs.rows.push(vec![
                r.seed.to_string(),
                r.objects.to_string(),
                num(r.utilization),
                num(r.max_object_rate),
                r.feasible.to_string(),
                self.hash.clone(),
            ]);
        }
        let feasible = rows.iter().filter(|r| r.feasible).count();
        let mut summary = Table::new(
            "feasibility.csv",
            &[
                "nodes_per_layer",
                "objects",
                "utilization",
                "feasible",
                "runs",
                "config_hash",
            ],
        );
        summary.rows.push(vec![
            t.nodes_per_layer.to_string(),
            t.object_count().to_string(),
            num(t.utilization),
            feasible.to_string(),
            rows.len().to_string(),
            self.hash.clone(),
        ]);
        let mut checks = vec![check(
            "feasibility: random two-layer placements admit a perfect matching",
            feasible as f64 >= 0.95 * rows.len() as f64,
            format!("{feasible}/{} feasible (need 95%)", rows.len()),
        )];
        checks.extend(
            t.warnings()
                .into_iter()
                .map(|w| check("feasibility: object count", true, format!("warning: {w}"))),
        );
        Ok(SuiteOutput {
            suite: "feasibility".into(),
            tables: vec![summary, runs],
            checks,
        })
    }

    fn stationarity(&self) -> Result<SuiteOutput> {
        let t = &self.cfg.theory;
        let seeds = self.cfg.experiment.theory_seeds.seeds();
        let rows = self.par_map(&seeds, |&s| {
            Ok((
                theory::two_choice_stationarity(t, s)?,
                theory::single_hash_stationarity(t, s)?,
            ))
        })?;
        let mut runs = Table::new(
            "stationarity_runs.csv",
            &[
                "policy",
                "seed",
                "feasible",
                "max_node_rate",
                "capacity",
                "overloaded",
                "stationary",
                "trend",
                "config_hash",
            ],
        );
        for (pot, single) in &rows {
            for r in [pot, single] {
                runs.rows.push(vec![
                    r.policy.clone(),
                    r.seed.to_string(),
                    r.feasible.to_string(),
                    num(r.max_node_rate),
                    num(r.capacity),
                    r.overloaded.to_string(),
                    r.stationary.to_string(),
                    num(r.trend),
                    self.hash.clone(),
                ]);
            }
        }
        let feasible: Vec<_> = rows.iter().map(|r| &r.0).filter(|r| r.feasible).collect();
        let stationary = feasible.iter().filter(|r| r.stationary).count();
        let unstable = rows
            .iter()
            .filter(|r| r.1.overloaded && !r.1.stationary)
            .count();
        let overloaded = rows.iter().filter(|r| r.1.overloaded).count();
        let mut summary = Table::new(
            "stationarity.csv",
            &[
                "policy",
                "runs",
                "feasible",
                "overloaded",
                "stationary",
                "config_hash",
            ],
        );
        summary.rows.push(vec![
            PolicyKind::Pot.to_string(),
            rows.len().to_string(),
            feasible.len().to_string(),
            rows.iter().filter(|r| r.0.overloaded).count().to_string(),
            stationary.to_string(),
            self.hash.clone(),
        ]);
        summary.rows.push(vec![
            PolicyKind::SingleHashUniform.to_string(),
            rows.len().to_string(),
            rows.iter().filter(|r| r.1.feasible).count().to_string(),
            overloaded.to_string(),
            rows.iter().filter(|r| r.1.stationary).count().to_string(),
            self.hash.clone(),
        ]);
        let checks = vec![
            check(
                "stationarity: two choices keep queues stationary on feasible placements",
                !feasible.is_empty() && stationary as f64 >= 0.95 * feasible.len() as f64,
                format!(
                    "{stationary}/{} feasible seeds stationary (need 95%)",
                    feasible.len()
                ),
            ),
            check(
                "stationarity: single hash overloads a node and loses stationarity",
                unstable as f64 >= 0.30 * rows.len() as f64,
                format!(
                    "{unstable}/{} seeds overloaded and non-stationary (need 30%)",
                    rows.len()
                ),
            ),
        ];
        Ok(SuiteOutput {
            suite: "stationarity".into(),
            tables: vec![summary, runs],
            checks,
        })
    }
}

struct FailureRun {
    /// Per load: normalized throughput per sample.
    series: Vec<Vec<(f64, f64)>>,
    /// Per load: mean of each phase.
    phases: Vec<Vec<f64>>,
}

/// Ordering under skew and parity without it.
pub fn skew_checks(means: &Means) -> Vec<Check> {
    use PolicyKind::*;
    let mut checks = Vec::new();
    let axes = means.axes();
    if let Some(top) = axes
        .iter()
        .filter(|a| a[0] > 0.0)
        .max_by(|a, b| a[0].total_cmp(&b[0]))
    {
        let get = |p| means.get(top, p);
        if let (Some(n), Some(c), Some(r), Some(d)) =
            (get(NoCache), get(PartitionOnly), get(Replication), get(Pot))
        {
            checks.push(check(
                "fig8a: skewed ordering nocache < cache-partition < distcache",
                n < c && c < d,
                format!("skew {}: {n:.2} < {c:.2} < {d:.2}", top[0]),
            ));
            checks.push(check(
                "fig8a: distcache within 5% of cache-replication",
                d >= 0.95 * r,
                format!("skew {}: {d:.2} vs {r:.2} (ratio {:.3})", top[0], d / r),
            ));
        }
    }
    if let Some(flat) = axes.iter().find(|a| a[0] == 0.0) {
        let xs: Vec<f64> = means
            .points
            .iter()
            .filter(|p| &p.0 == flat)
            .map(|p| p.2)
            .collect();
        let spread = relative_spread(&xs);
        checks.push(check(
            "fig8a: uniform workload gives equal throughput",
            spread <= 0.02,
            format!("spread {:.2}% across {} policies", 100.0 * spread, xs.len()),
        ));
    }
    checks
}

/// Linear scaling of two-choice caching, diminishing returns without caches.
pub fn scale_checks(means: &Means) -> Vec<Check> {
    let mut checks = Vec::new();
    let series = |p| {
        means
            .points
            .iter()
            .filter(|x| x.1 == p)
            .map(|x| (x.0[0], x.2))
            .collect::<Vec<(f64, f64)>>()
    };
    let d = series(PolicyKind::Pot);
    if d.len() >= 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = d.iter().copied().unzip();
        let r2 = r_squared(&xs, &ys);
        checks.push(check(
            "fig8c: distcache scales linearly",
            r2 >= 0.98,
            format!("R^2 = {r2:.4}"),
        ));
    }
    let n = series(PolicyKind::NoCache);
    if n.len() >= 3 {
        let gains: Vec<f64> = n.windows(2).map(|w| w[1].1 - w[0].1).collect();
        let concave = gains.windows(2).all(|g| g[1] < g[0]);
        let shown: Vec<String> = gains.iter().map(|g| format!("{g:.2}")).collect();
        checks.push(check(
            "fig8c: nocache has diminishing marginal gain",
            concave,
            format!("gains {}", shown.join(", ")),
        ));
    }
    checks
}

/// Write-ratio checks on the most skewed sweep.
pub fn write_checks(means: &Means) -> Vec<Check> {
    use PolicyKind::*;
    let axes = means.axes();
    let Some(top) = axes.iter().map(|a| a[0]).max_by(f64::total_cmp) else {
        return Vec::new();
    };
    let mut sweep: Vec<Vec<f64>> = axes.into_iter().filter(|a| a[0] == top).collect();
    sweep.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let get = |a: &Vec<f64>, p| means.get(a, p);
    let mut checks = Vec::new();
    let writes: Vec<&Vec<f64>> = sweep.iter().filter(|a| a[2] > 0.0).collect();
    let pairs: Vec<(f64, f64, f64)> = writes
        .iter()
        .filter_map(|a| Some((a[2], get(a, Replication)?, get(a, Pot)?)))
        .collect();
    if !pairs.is_empty() {
        let shown: Vec<String> = pairs
            .iter()
            .map(|(w, r, d)| format!("{w}: {r:.2}/{d:.2}"))
            .collect();
        checks.push(check(
            "fig9: cache-replication at or below distcache with writes",
            pairs.iter().all(|(_, r, d)| r <= d),
            format!("skew {top}, replication/distcache {}", shown.join(", ")),
        ));
        let gaps: Vec<f64> = pairs.iter().map(|(_, r, d)| d - r).collect();
        let widening = gaps.windows(2).all(|g| g[1] >= g[0]);
        let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.2}")).collect();
        checks.push(check(
            "fig9: gap to cache-replication widens with write ratio",
            widening,
            format!("gaps {}", shown.join(", ")),
        ));
    }
    let below: Vec<f64> = sweep
        .iter()
        .filter(|a| {
            let Some(n) = get(a, NoCache) else {
                return false;
            };
            [PartitionOnly, Replication, Pot]
                .iter()
                .all(|&p| get(a, p).is_some_and(|x| x < n))
        })
        .map(|a| a[2])
        .collect();
    checks.push(check(
        "fig9: caching falls below nocache at high write ratios",
        !below.is_empty(),
        format!("write ratios below nocache: {below:?}"),
    ));
    checks
}

/// Writes a suite's tables into `dir`.
pub fn write_tables(dir: &Path, out: &SuiteOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in &out.tables {
        let path = dir.join(&t.file);
        fs::write(&path, t.to_csv()?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn summary_text(outputs: &[SuiteOutput]) -> String {
    let mut s = String::new();
    for o in outputs {
        for c in &o.checks {
            s.push_str(&format!(
                "{} {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
    }
    s
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    config_hash: &'a str,
    suites: Vec<SuiteRecord<'a>>,
    passed: bool,
}

#[derive(Serialize)]
struct SuiteRecord<'a> {
    suite: &'a str,
    files: Vec<&'a str>,
    checks: &'a [Check],
}

/// `summary.txt` and `summary.json` for the suites run so far.
pub fn write_summary(dir: &Path, config_hash: &str, outputs: &[SuiteOutput]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = summary_text(outputs);
    let path = dir.join("summary.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let record = SummaryRecord {
        config_hash,
        suites: outputs
            .iter()
            .map(|o| SuiteRecord {
                suite: &o.suite,
                files: o.tables.iter().map(|t| t.file.as_str()).collect(),
                checks: &o.checks,
            })
            .collect(),
        passed: outputs.iter().all(|o| o.checks.iter().all(|c| c.passed)),
    };
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&record).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}
