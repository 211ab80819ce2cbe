//! Discrete-event simulation of a leaf-spine storage deployment: spine
//! switches form the upper cache layer, rack ToRs the lower one, and
//! each rack holds a row of rate-limited storage servers.
//!
//! Every station serves FIFO. Service is deterministic with a bounded
//! queue in loss mode and exponential with an unbounded queue in queue
//! mode. A read is routed when issued, using the load table of its client
//! rack; replies carry the load of each cache node they crossed.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::allocation::{
    refresh_hot_set, Budgets, HotSet, NodeReport, PartitionMap, UpperBudget, DEFAULT_VNODES,
};
use crate::cache_node::{CacheConfig, CacheNode, Lookup};
use crate::error::{Error, Result};
use crate::hashing::{NodeRef, ObjectId, Partitioner};
use crate::routing::{Destination, HotSetView, LoadTable, PolicyKind, Router};
use crate::workload::{Arrivals, Op, Query, QueryDistribution, QueryStream, StreamConfig};

const NS: f64 = 1e9;

fn ns(secs: f64) -> u64 {
    (secs * NS).round() as u64
}

/// Independent sub-seed for one consumer of a run's seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    xxh3_64_with_seed(&tag.to_le_bytes(), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub spines: u32,
    pub racks: u32,
    pub servers_per_rack: u32,
    /// Queries per second of one storage server.
    pub server_rate: f64,
    /// Queries per second of one cache node.
    pub cache_rate: f64,
    pub client_racks: u32,
    /// Reads for lower-layer cached keys skip the spine.
    pub bypass_upper_on_lower_hit: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            spines: 8,
            racks: 8,
            servers_per_rack: 8,
            server_rate: 100.0,
            cache_rate: 800.0,
            client_racks: 4,
            bypass_upper_on_lower_hit: false,
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        if self.spines == 0
            || self.racks == 0
            || self.servers_per_rack == 0
            || self.client_racks == 0
        {
            return Err(Error::Config("topology counts must be at least 1".into()));
        }
        for (name, r) in [
            ("server_rate", self.server_rate),
            ("cache_rate", self.cache_rate),
        ] {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {r}")));
            }
        }
        if self.spines > u16::MAX as u32 / 2 || self.racks > u16::MAX as u32 / 2 {
            return Err(Error::Config("too many cache nodes".into()));
        }
        Ok(())
    }

    pub fn cache_nodes(&self) -> usize {
        (self.spines + self.racks) as usize
    }

    pub fn servers(&self) -> usize {
        (self.racks * self.servers_per_rack) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceMode {
    /// Deterministic service; arrivals beyond `queue_limit` jobs are dropped.
    Loss { queue_limit: u32 },
    /// Exponential service, unbounded queues.
    Queue,
}

/// Which load figure routing compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadSignal {
    /// Packet count of the last completed one-second window, via replies.
    LastWindow,
    /// Packet count of the running window, via replies.
    CurrentWindow,
    /// Live number of jobs at the node when the read is routed.
    QueueLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HotSetMode {
    /// Hottest keys per partition from the known distribution.
    Oracle,
    /// Start empty; refresh every second from heavy-hitter reports.
    Detected,
    /// Every object of the distribution at all its cache nodes.
    AllObjects,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeEventKind {
    Fail,
    Recover,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeEvent {
    pub at: f64,
    pub node: NodeRef,
    pub kind: NodeEventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalKind {
    Fixed,
    Poisson,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub topology: Topology,
    pub policy: PolicyKind,
    pub budgets: Budgets,
    pub distribution: Arc<QueryDistribution>,
    pub write_ratio: f64,
    /// Client queries per second; zero disables arrivals.
    pub offered_rate: f64,
    pub arrivals: ArrivalKind,
    pub horizon: f64,
    /// Metrics ignore everything before this time.
    pub warmup: f64,
    pub seed: u64,
    pub service: ServiceMode,
    pub load_signal: LoadSignal,
    pub hot_set: HotSetMode,
    pub detection_delay: f64,
    pub events: Vec<NodeEvent>,
    pub sample_interval: f64,
    pub vnodes: u32,
    pub cache: CacheConfig,
}

impl SimConfig {
    pub fn new(
        topology: Topology,
        policy: PolicyKind,
        distribution: Arc<QueryDistribution>,
    ) -> Self {
        SimConfig {
            topology,
            policy,
            budgets: Budgets::per_node(100),
            distribution,
            write_ratio: 0.0,
            offered_rate: 0.0,
            arrivals: ArrivalKind::Fixed,
            horizon: 10.0,
            warmup: 1.0,
            seed: 0,
            service: ServiceMode::Loss { queue_limit: 32 },
            load_signal: LoadSignal::CurrentWindow,
            hot_set: HotSetMode::Oracle,
            detection_delay: 1.0,
            events: Vec::new(),
            sample_interval: 0.1,
            vnodes: DEFAULT_VNODES,
            cache: CacheConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let t = &self.topology;
        if !(self.horizon > 0.0) || !(0.0..self.horizon).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "need 0 <= warmup < horizon, got {} and {}",
                self.warmup, self.horizon
            )));
        }
        if !(self.sample_interval > 0.0) {
            return Err(Error::Config("sample interval must be positive".into()));
        }
        if !(self.offered_rate >= 0.0) || !self.offered_rate.is_finite() {
            return Err(Error::Config(format!(
                "offered rate must be >= 0, got {}",
                self.offered_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.write_ratio) {
            return Err(Error::Config(format!(
                "write ratio {} not in [0, 1]",
                self.write_ratio
            )));
        }
        if self.detection_delay < 0.0 {
            return Err(Error::Config("detection delay must be >= 0".into()));
        }
        if let ServiceMode::Loss { queue_limit: 0 } = self.service {
            return Err(Error::Config(
                "loss-mode queue limit must be at least 1".into(),
            ));
        }
        if self.distribution.is_empty() {
            return Err(Error::Config("workload has no objects".into()));
        }
        let upper = match self.budgets.upper {
            UpperBudget::PerNode(n) | UpperBudget::Total(n) => n,
        };
        let slots = match self.policy {
            PolicyKind::NoCache => usize::MAX,
            PolicyKind::PartitionOnly => self.budgets.lower_per_node,
            PolicyKind::Replication => upper,
            PolicyKind::Pot | PolicyKind::SingleHashUniform => {
                upper.max(self.budgets.lower_per_node)
            }
        };
        if slots == 0 && self.hot_set != HotSetMode::AllObjects {
            return Err(Error::Config(format!(
                "policy {} needs cache slots",
                self.policy
            )));
        }
        if self.hot_set == HotSetMode::Detected && self.policy == PolicyKind::SingleHashUniform {
            return Err(Error::Config(
                "detected hot sets need a two-layer or replicated policy".into(),
            ));
        }
        for e in &self.events {
            let known = match e.node {
                NodeRef::Upper(a) => a < t.spines,
                NodeRef::Lower(b) => b < t.racks,
            };
            if !known {
                return Err(Error::invalid(format!("unknown node {}", e.node)));
            }
            if !(e.at >= 0.0) {
                return Err(Error::invalid(format!("event time {} must be >= 0", e.at)));
            }
        }
        Ok(())
    }

    /// Hash functions of both layers, derived from the run seed.
    pub fn partitioner(&self) -> Result<Partitioner> {
        let t = &self.topology;
        Partitioner::new(
            derive_seed(self.seed, 5),
            derive_seed(self.seed, 6),
            t.spines,
            t.racks,
        )
    }

    pub fn partition_map(&self) -> Result<PartitionMap> {
        Ok(PartitionMap::compute(
            &self.partitioner()?,
            self.vnodes,
            derive_seed(self.seed, 7),
        ))
    }

    /// Fails `node` at `at` and, if given, recovers it at `until`.
    pub fn with_failure(mut self, node: NodeRef, at: f64, until: Option<f64>) -> Self {
        self.events.push(NodeEvent {
            at,
            node,
            kind: NodeEventKind::Fail,
        });
        if let Some(t) = until {
            self.events.push(NodeEvent {
                at: t,
                node,
                kind: NodeEventKind::Recover,
            });
        }
        self
    }
}

/// One 100 ms (by default) sampling interval.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Sample {
    /// End of the interval, seconds.
    pub time: f64,
    pub issued: u64,
    pub completed: u64,
    pub dropped: u64,
    pub hits: u64,
    /// Jobs in the system at the end of the interval.
    pub queue_total: u64,
    /// Largest single-station queue seen during the interval.
    pub queue_max: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NodeSample {
    pub served: u32,
    pub dropped: u32,
    pub queue_max: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StationTotals {
    pub arrived: u64,
    pub served: u64,
    pub dropped: u64,
    pub in_system: u64,
    /// Arrivals after warmup.
    pub arrived_window: u64,
}

impl StationTotals {
    pub fn conserved(&self) -> bool {
        self.arrived == self.served + self.dropped + self.in_system
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    /// Client completions per second after warmup, in units of one server.
    pub normalized_throughput: f64,
    pub server_rate: f64,
    pub window: f64,
    pub issued: u64,
    pub completed: u64,
    pub dropped: u64,
    /// Counts restricted to queries issued after warmup.
    pub issued_window: u64,
    pub dropped_window: u64,
    pub reads: u64,
    pub hits: u64,
    pub coherence_messages: u64,
    pub samples: Vec<Sample>,
    /// `node_samples[s][i]` is station `i` during sample `s`.
    pub node_samples: Vec<Vec<NodeSample>>,
    pub stations: Vec<StationTotals>,
    pub station_names: Vec<String>,
    /// Whether conservation held at every sampling instant.
    pub conserved: bool,
}

impl SimReport {
    pub fn hit_ratio(&self) -> f64 {
        if self.reads == 0 {
            0.0
        } else {
            self.hits as f64 / self.reads as f64
        }
    }

    pub fn drop_fraction(&self) -> f64 {
        if self.issued_window == 0 {
            0.0
        } else {
            self.dropped_window as f64 / self.issued_window as f64
        }
    }

    /// Mean arrivals per second at station `i` after warmup.
    pub fn arrival_rate(&self, i: usize) -> f64 {
        self.stations[i].arrived_window as f64 / self.window
    }

    /// Normalized throughput of each sample interval.
    pub fn throughput_series(&self, interval: f64) -> Vec<(f64, f64)> {
        self.samples
            .iter()
            .map(|s| (s.time, s.completed as f64 / interval / self.server_rate))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Node(usize),
    Remap(NodeRef, bool),
    Complete { station: u32, job: u32 },
    Arrival,
    Tick,
    Sample,
}

impl EventKind {
    fn priority(self) -> u8 {
        match self {
            EventKind::Node(_) | EventKind::Remap(..) => 0,
            EventKind::Complete { .. } => 1,
            EventKind::Arrival => 2,
            EventKind::Tick => 3,
            EventKind::Sample => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    priority: u8,
    seq: u64,
    kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Pass,
    Lookup,
    Serve,
    Coherence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum JobKind {
    Read,
    Write,
    Coherence,
}

#[derive(Clone, Debug)]
struct Job {
    kind: JobKind,
    key: ObjectId,
    client: u32,
    rack: u32,
    server: u32,
    path: [(u32, Act); 3],
    len: u8,
    hop: u8,
    /// Service multiple at the serving hop.
    weight: u32,
    issued: u64,
    version: u64,
    stamps: [(u16, u32); 2],
    stamped: u8,
}

#[derive(Clone, Debug)]
struct Station {
    base: u64,
    rate: f64,
    last_finish: u64,
    failed: bool,
    totals: StationTotals,
    interval: NodeSample,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    now: u64,
    horizon: u64,
    warmup: u64,
    seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    stations: Vec<Station>,
    nodes: Vec<CacheNode>,
    node_cfg: CacheConfig,
    jobs: Vec<Job>,
    free: Vec<u32>,
    router: Router,
    tables: Vec<LoadTable>,
    map: PartitionMap,
    hot: HotSet,
    stream: Option<QueryStream>,
    pending: Option<Query>,
    rng: ChaCha8Rng,
    service_rng: ChaCha8Rng,
    committed: HashMap<ObjectId, u64>,
    next_version: HashMap<ObjectId, u64>,
    report: SimReport,
    current: Sample,
}

/// Runs one simulation to its horizon.
pub fn run(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    sim.run();
    Ok(sim.report)
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self> {
        let t = &cfg.topology;
        let partitioner = cfg.partitioner()?;
        let map = cfg.partition_map()?;
        let router = Router::new(
            cfg.policy,
            partitioner,
            t.servers_per_rack,
            derive_seed(cfg.seed, 1),
        )?;

        let mut node_cfg = cfg.cache.clone();
        node_cfg.slots = match cfg.hot_set {
            HotSetMode::AllObjects => cfg.distribution.len(),
            _ => match cfg.budgets.upper {
                UpperBudget::PerNode(n) | UpperBudget::Total(n) => {
                    n.max(cfg.budgets.lower_per_node)
                }
            },
        };
        if cfg.hot_set != HotSetMode::Detected {
            // Sketches only steer eviction here; keep them small.
            node_cfg.cms_width = node_cfg.cms_width.min(1024);
            node_cfg.bloom_bits = node_cfg.bloom_bits.min(4096);
        }
        let cache_nodes = t.cache_nodes();
        let nodes = (0..cache_nodes)
            .map(|i| CacheNode::new(i as u16, node_cfg.clone()))
            .collect();
        let station = |rate: f64| Station {
            base: ns(1.0 / rate).max(1),
            rate,
            last_finish: 0,
            failed: false,
            totals: StationTotals::default(),
            interval: NodeSample::default(),
        };
        let mut stations: Vec<Station> = (0..cache_nodes).map(|_| station(t.cache_rate)).collect();
        stations.extend((0..t.servers()).map(|_| station(t.server_rate)));
        let mut names: Vec<String> = (0..t.spines).map(|a| format!("spine{a}")).collect();
        names.extend((0..t.racks).map(|b| format!("tor{b}")));
        names.extend((0..t.servers()).map(|s| format!("server{s}")));

        let stream = if cfg.offered_rate > 0.0 {
            let arrivals = match cfg.arrivals {
                ArrivalKind::Fixed => Arrivals::Fixed {
                    rate: cfg.offered_rate,
                },
                ArrivalKind::Poisson => Arrivals::Poisson {
                    rate: cfg.offered_rate,
                },
            };
            let sc = StreamConfig {
                seed: derive_seed(cfg.seed, 4),
                write_ratio: cfg.write_ratio,
                arrivals,
                client_racks: t.client_racks,
                value_len: 16,
            };
            Some(QueryStream::new(&cfg.distribution, sc)?)
        } else {
            None
        };

        let hot = match cfg.hot_set {
            HotSetMode::Oracle => HotSet::oracle(cfg.policy, &map, &cfg.distribution, &cfg.budgets),
            HotSetMode::AllObjects => {
                HotSet::all_objects(cfg.policy, map.partitioner(), &cfg.distribution)
            }
            HotSetMode::Detected if cfg.policy == PolicyKind::Replication => HotSet::replicated(),
            HotSetMode::Detected => HotSet::default(),
        };

        let horizon = ns(cfg.horizon);
        let window = cfg.horizon - cfg.warmup;
        let mut sim = Sim {
            cfg,
            now: 0,
            horizon,
            warmup: ns(cfg.warmup),
            seq: 0,
            events: BinaryHeap::new(),
            stations,
            nodes,
            node_cfg,
            jobs: Vec::new(),
            free: Vec::new(),
            router,
            tables: vec![LoadTable::new(cache_nodes); t.client_racks as usize],
            map,
            hot,
            stream,
            pending: None,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2)),
            service_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3)),
            committed: HashMap::new(),
            next_version: HashMap::new(),
            report: SimReport {
                normalized_throughput: 0.0,
                server_rate: t.server_rate,
                window,
                issued: 0,
                completed: 0,
                dropped: 0,
                issued_window: 0,
                dropped_window: 0,
                reads: 0,
                hits: 0,
                coherence_messages: 0,
                samples: Vec::new(),
                node_samples: Vec::new(),
                stations: Vec::new(),
                station_names: names,
                conserved: true,
            },
            current: Sample::default(),
        };
        sim.install_hot_set();
        Ok(sim)
    }

    fn schedule(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Reverse(Event {
            time,
            priority: kind.priority(),
            seq: self.seq,
            kind,
        }));
    }

    fn run(&mut self) {
        for (i, e) in self.cfg.events.iter().enumerate() {
            self.schedule(ns(e.at), EventKind::Node(i));
        }
        self.pull_query();
        self.schedule(ns(1.0), EventKind::Tick);
        self.schedule(ns(self.cfg.sample_interval), EventKind::Sample);
        while let Some(Reverse(ev)) = self.events.pop() {
            if ev.time > self.horizon {
                break;
            }
            self.now = ev.time;
            match ev.kind {
                EventKind::Node(i) => self.node_event(i),
                EventKind::Remap(node, up) => self.remap(node, up),
                EventKind::Complete { station, job } => self.complete(station as usize, job),
                EventKind::Arrival => {
                    if let Some(q) = self.pending.take() {
                        self.issue(q);
                    }
                    self.pull_query();
                }
                EventKind::Tick => {
                    self.tick();
                    self.schedule(self.now + ns(1.0), EventKind::Tick);
                }
                EventKind::Sample => {
                    self.sample();
                    let next =
                        ns(self.cfg.sample_interval * (self.report.samples.len() + 1) as f64);
                    self.schedule(next, EventKind::Sample);
                }
            }
        }
        let r = &mut self.report;
        r.stations = self.stations.iter().map(|s| s.totals.clone()).collect();
        r.conserved &= r.stations.iter().all(StationTotals::conserved);
        r.normalized_throughput = r.completed as f64 / r.window / self.cfg.topology.server_rate;
    }

    fn pull_query(&mut self) {
        if let Some(stream) = self.stream.as_mut() {
            let q = stream.next_query();
            let at = ns(q.timestamp);
            if at <= self.horizon {
                self.pending = Some(q);
                self.schedule(at, EventKind::Arrival);
            }
        }
    }

    fn spine_station(&self, a: u32) -> u32 {
        a
    }

    fn tor_station(&self, b: u32) -> u32 {
        self.cfg.topology.spines + b
    }

    fn server_station(&self, server: u32) -> u32 {
        self.cfg.topology.spines + self.cfg.topology.racks + server
    }

    fn alloc(&mut self, job: Job) -> u32 {
        match self.free.pop() {
            Some(i) => {
                self.jobs[i as usize] = job;
                i
            }
            None => {
                self.jobs.push(job);
                (self.jobs.len() - 1) as u32
            }
        }
    }

    fn issue(&mut self, q: Query) {
        let in_window = self.now >= self.warmup;
        self.report.issued += 1;
        self.current.issued += 1;
        if in_window {
            self.report.issued_window += 1;
        }
        let (rack, server) = self.router.home(&q.key);
        let mut job = Job {
            kind: JobKind::Read,
            key: q.key,
            client: q.client_rack,
            rack,
            server,
            path: [(0, Act::Pass); 3],
            len: 0,
            hop: 0,
            weight: 1,
            issued: self.now,
            version: 0,
            stamps: [(0, 0); 2],
            stamped: 0,
        };
        let dest = match q.op {
            Op::Get => {
                self.report.reads += 1;
                if self.cfg.load_signal == LoadSignal::QueueLength {
                    self.stamp_live(&q.key, q.client_rack);
                }
                self.router
                    .route_get(&self.tables[q.client_rack as usize], &q.key, &self.hot)
            }
            Op::Set => {
                job.kind = JobKind::Write;
                if !self
                    .hot
                    .replicas(&q.key, self.cfg.topology.spines)
                    .is_empty()
                {
                    job.weight = 3;
                }
                self.router.route_set(&q.key)
            }
        };
        let path: &[(u32, Act)] = &match dest {
            Destination::Cache(NodeRef::Upper(a)) => vec![(self.spine_station(a), Act::Lookup)],
            Destination::Cache(NodeRef::Lower(b))
                if self.cfg.topology.bypass_upper_on_lower_hit =>
            {
                vec![(self.tor_station(b), Act::Lookup)]
            }
            Destination::Cache(NodeRef::Lower(b)) => {
                let spines = self.router.spines();
                let via = spines[self.rng.random_range(0..spines.len())];
                vec![
                    (self.spine_station(via), Act::Pass),
                    (self.tor_station(b), Act::Lookup),
                ]
            }
            Destination::Server { rack, server, via } => vec![
                (self.spine_station(via), Act::Pass),
                (self.tor_station(rack), Act::Pass),
                (self.server_station(server), Act::Serve),
            ],
        };
        job.path[..path.len()].copy_from_slice(path);
        job.len = path.len() as u8;
        let first = job.path[0].0;
        let id = self.alloc(job);
        self.enter(first as usize, id);
    }

    /// Writes live queue lengths of the read's candidate nodes into the
    /// client's table.
    fn stamp_live(&mut self, key: &ObjectId, client: u32) {
        let m0 = self.cfg.topology.spines;
        let mut stamps = Vec::with_capacity(2);
        let hot = &self.hot;
        let candidates = [
            hot.upper(key).map(NodeRef::Upper),
            hot.lower(key).map(NodeRef::Lower),
        ];
        for node in candidates.into_iter().flatten() {
            let i = node.flat(m0);
            stamps.push((i as u16, self.stations[i].totals.in_system as u32));
        }
        let now = self.now as f64 / NS;
        self.tables[client as usize].absorb_telemetry(&stamps, now);
    }

    fn service_time(&mut self, station: usize, weight: u32) -> u64 {
        let st = &self.stations[station];
        match self.cfg.service {
            ServiceMode::Loss { .. } => st.base * weight as u64,
            ServiceMode::Queue => {
                let exp = Exp::new(st.rate).expect("positive rate");
                let secs: f64 = exp.sample(&mut self.service_rng);
                ns(secs * weight as f64).max(1)
            }
        }
    }

    fn enter(&mut self, station: usize, id: u32) {
        let (act, weight) = {
            let job = &self.jobs[id as usize];
            (job.path[job.hop as usize].1, job.weight)
        };
        let in_window = self.now >= self.warmup;
        let limit = match self.cfg.service {
            ServiceMode::Loss { queue_limit } => queue_limit as u64,
            ServiceMode::Queue => u64::MAX,
        };
        let st = &mut self.stations[station];
        st.totals.arrived += 1;
        if in_window {
            st.totals.arrived_window += 1;
        }
        if st.failed || st.totals.in_system >= limit {
            st.totals.dropped += 1;
            st.interval.dropped += 1;
            self.drop_job(id);
            return;
        }
        let w = if matches!(act, Act::Serve | Act::Coherence) {
            weight
        } else {
            1
        };
        let service = self.service_time(station, w);
        let st = &mut self.stations[station];
        let finish = st.last_finish.max(self.now) + service;
        st.last_finish = finish;
        st.totals.in_system += 1;
        st.interval.queue_max = st.interval.queue_max.max(st.totals.in_system as u32);
        if act == Act::Serve && self.jobs[id as usize].kind == JobKind::Write {
            self.start_write(id);
        }
        self.schedule(
            finish,
            EventKind::Complete {
                station: station as u32,
                job: id,
            },
        );
    }

    fn complete(&mut self, station: usize, id: u32) {
        let st = &mut self.stations[station];
        st.totals.in_system -= 1;
        if st.failed {
            st.totals.dropped += 1;
            st.interval.dropped += 1;
            self.drop_job(id);
            return;
        }
        st.totals.served += 1;
        st.interval.served += 1;
        let (act, key) = {
            let job = &self.jobs[id as usize];
            (job.path[job.hop as usize].1, job.key)
        };
        let cache_nodes = self.cfg.topology.cache_nodes();
        match act {
            Act::Pass => {
                if station < cache_nodes {
                    if station >= self.cfg.topology.spines as usize
                        && self.cfg.hot_set == HotSetMode::Detected
                    {
                        self.nodes[station].pass_through(&key);
                    } else {
                        self.nodes[station].record_packet();
                    }
                    self.stamp(station, id);
                }
                self.advance(id);
            }
            Act::Lookup => {
                let hit = matches!(self.nodes[station].cache_get(&key), Lookup::Hit { .. });
                self.stamp(station, id);
                if hit {
                    self.report.hits += 1;
                    self.current.hits += 1;
                    self.finish(id);
                } else {
                    self.reroute_miss(station, id);
                    self.advance(id);
                }
            }
            Act::Serve => {
                if self.jobs[id as usize].kind == JobKind::Write {
                    self.commit_write(id);
                }
                self.finish(id);
            }
            Act::Coherence => self.free.push(id),
        }
    }

    fn stamp(&mut self, station: usize, id: u32) {
        let load = match self.cfg.load_signal {
            LoadSignal::LastWindow => self.nodes[station].report_load(),
            LoadSignal::CurrentWindow => self.nodes[station].current_load(),
            LoadSignal::QueueLength => return,
        };
        let job = &mut self.jobs[id as usize];
        if (job.stamped as usize) < job.stamps.len() {
            job.stamps[job.stamped as usize] = (station as u16, load.min(u32::MAX as u64) as u32);
            job.stamped += 1;
        }
    }

    /// A miss continues to the home server through the home ToR.
    fn reroute_miss(&mut self, station: usize, id: u32) {
        let tor = self.tor_station(self.jobs[id as usize].rack);
        let server = self.server_station(self.jobs[id as usize].server);
        let job = &mut self.jobs[id as usize];
        let mut n = job.hop as usize + 1;
        if station as u32 != tor {
            job.path[n] = (tor, Act::Pass);
            n += 1;
        }
        job.path[n] = (server, Act::Serve);
        job.len = n as u8 + 1;
    }

    fn advance(&mut self, id: u32) {
        let job = &mut self.jobs[id as usize];
        job.hop += 1;
        debug_assert!(job.hop < job.len);
        let next = job.path[job.hop as usize].0;
        self.enter(next as usize, id);
    }

    fn finish(&mut self, id: u32) {
        let job = &self.jobs[id as usize];
        if self.now >= self.warmup {
            self.report.completed += 1;
        }
        self.current.completed += 1;
        if job.stamped > 0 {
            let stamps = job.stamps;
            let (client, n) = (job.client as usize, job.stamped as usize);
            let now = self.now as f64 / NS;
            self.tables[client].absorb_telemetry(&stamps[..n], now);
        }
        self.free.push(id);
    }

    fn drop_job(&mut self, id: u32) {
        let job = &self.jobs[id as usize];
        if job.kind != JobKind::Coherence {
            self.report.dropped += 1;
            self.current.dropped += 1;
            if job.issued >= self.warmup {
                self.report.dropped_window += 1;
            }
        }
        self.free.push(id);
    }

    fn replicas(&self, key: &ObjectId) -> Vec<NodeRef> {
        self.hot.replicas(key, self.cfg.topology.spines)
    }

    /// Invalidates cached copies before the server applies a write.
    fn start_write(&mut self, id: u32) {
        let key = self.jobs[id as usize].key;
        let replicas = self.replicas(&key);
        if replicas.is_empty() {
            return;
        }
        let committed = self.committed.get(&key).copied().unwrap_or(1);
        let next = self.next_version.entry(key).or_insert(committed);
        *next += 1;
        let version = *next;
        self.jobs[id as usize].version = version;
        let m0 = self.cfg.topology.spines;
        for r in replicas {
            self.nodes[r.flat(m0)].invalidate(&key, version);
        }
    }

    /// Commits a write, installs it at the replicas and charges the
    /// coherence messages to the nodes that carry them.
    fn commit_write(&mut self, id: u32) {
        let (key, version, rack) = {
            let j = &self.jobs[id as usize];
            (j.key, j.version, j.rack)
        };
        if version == 0 {
            return;
        }
        let c = self.committed.entry(key).or_insert(1);
        *c = (*c).max(version);
        let replicas = self.replicas(&key);
        let m0 = self.cfg.topology.spines;
        for &r in &replicas {
            // A replica inserted after the invalidation simply ignores it.
            let _ = self.nodes[r.flat(m0)].apply_update(&key, &version.to_le_bytes(), version);
        }
        if replicas.is_empty() {
            return;
        }
        // Invalidation and update for every replica cross the home ToR;
        // an upper replica handles its own two.
        let mut charges = vec![(self.tor_station(rack), 2 * replicas.len() as u32)];
        for r in &replicas {
            if let NodeRef::Upper(a) = r {
                charges.push((self.spine_station(*a), 2));
            }
        }
        for (station, weight) in charges {
            self.report.coherence_messages += weight as u64;
            let job = Job {
                kind: JobKind::Coherence,
                key,
                client: 0,
                rack,
                server: 0,
                path: [(station, Act::Coherence); 3],
                len: 1,
                hop: 0,
                weight,
                issued: self.now,
                version,
                stamps: [(0, 0); 2],
                stamped: 0,
            };
            let id = self.alloc(job);
            self.enter(station as usize, id);
        }
    }

    fn node_event(&mut self, i: usize) {
        let e = self.cfg.events[i];
        let idx = e.node.flat(self.cfg.topology.spines);
        let delay = ns(self.cfg.detection_delay);
        match e.kind {
            NodeEventKind::Fail => {
                self.stations[idx].failed = true;
                self.schedule(self.now + delay, EventKind::Remap(e.node, false));
            }
            NodeEventKind::Recover => {
                if self.stations[idx].failed {
                    // The node returns with an empty cache.
                    self.stations[idx].failed = false;
                    self.nodes[idx] = CacheNode::new(idx as u16, self.node_cfg.clone());
                    self.schedule(self.now + delay, EventKind::Remap(e.node, true));
                }
            }
        }
    }

    fn remap(&mut self, node: NodeRef, up: bool) {
        let idx = node.flat(self.cfg.topology.spines);
        // A recovery that raced a later failure is superseded by it.
        if up == self.stations[idx].failed {
            return;
        }
        let changed = if up {
            self.map.recover(node)
        } else {
            self.map.fail(node)
        };
        changed.expect("node validated at config time");
        let alive = self.map.alive_upper();
        if !alive.is_empty() {
            self.router.set_spines(alive);
        }
        match self.cfg.hot_set {
            HotSetMode::Oracle => {
                self.hot = HotSet::oracle(
                    self.cfg.policy,
                    &self.map,
                    &self.cfg.distribution,
                    &self.cfg.budgets,
                );
            }
            HotSetMode::AllObjects => {
                let mut hot = HotSet::all_objects(
                    self.cfg.policy,
                    self.map.partitioner(),
                    &self.cfg.distribution,
                );
                for n in (0..self.map.partitioner().m_upper())
                    .map(NodeRef::Upper)
                    .chain((0..self.map.partitioner().m_lower()).map(NodeRef::Lower))
                {
                    if !self.map.is_alive(n) {
                        for k in hot.keys_at(n) {
                            hot.remove(n, &k);
                        }
                    }
                }
                self.hot = hot;
            }
            HotSetMode::Detected => {
                if !up {
                    for k in self.hot.keys_at(node) {
                        self.hot.remove(node, &k);
                    }
                }
            }
        }
        self.install_hot_set();
    }

    fn tick(&mut self) {
        let t = &self.cfg.topology;
        let detected = self.cfg.hot_set == HotSetMode::Detected;
        let m0 = t.spines;
        let candidates = match self.cfg.budgets.upper {
            UpperBudget::PerNode(n) | UpperBudget::Total(n) => {
                n.max(self.cfg.budgets.lower_per_node)
            }
        };
        let mut reports = Vec::new();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let cached = if detected {
                node.cached_estimates()
            } else {
                Vec::new()
            };
            node.tick_second();
            if detected && !self.stations[i].failed {
                reports.push(NodeReport {
                    node: NodeRef::from_flat(i, m0),
                    candidates: node.hh_top_k(candidates).to_vec(),
                    cached,
                });
            }
        }
        if detected {
            let budgets = layer_budgets(self.cfg.policy, &self.cfg.budgets);
            for c in refresh_hot_set(&self.map, &budgets, &reports, &self.hot) {
                self.hot.apply(&c);
            }
            self.install_hot_set();
        }
    }

    /// Brings every live cache node's contents in line with the hot set.
    fn install_hot_set(&mut self) {
        let t = &self.cfg.topology;
        let m0 = t.spines;
        let replicated_keys = self.hot.is_replicated().then(|| self.hot.upper_keys());
        for i in 0..t.cache_nodes() {
            if self.stations[i].failed {
                continue;
            }
            let node = NodeRef::from_flat(i, m0);
            let want: BTreeSet<ObjectId> = match (&replicated_keys, node) {
                (Some(keys), NodeRef::Upper(_)) => keys.iter().copied().collect(),
                _ => self.hot.keys_at(node).into_iter().collect(),
            };
            let mut have: Vec<ObjectId> = self.nodes[i].keys().copied().collect();
            have.sort_unstable();
            for k in &have {
                if !want.contains(k) {
                    self.nodes[i].evict(k);
                }
            }
            for k in want {
                if !self.nodes[i].contains(&k) {
                    let version = self.committed.get(&k).copied().unwrap_or(1);
                    self.nodes[i].reserve(&k);
                    let _ = self.nodes[i].apply_update(&k, &version.to_le_bytes(), version);
                }
            }
        }
    }

    fn sample(&mut self) {
        let mut s = std::mem::take(&mut self.current);
        s.time = self.now as f64 / NS;
        let mut row = Vec::with_capacity(self.stations.len());
        for st in &mut self.stations {
            s.queue_total += st.totals.in_system;
            s.queue_max = s.queue_max.max(st.interval.queue_max);
            self.report.conserved &= st.totals.conserved();
            row.push(std::mem::take(&mut st.interval));
            st.interval.queue_max = st.totals.in_system as u32;
        }
        self.report.samples.push(s);
        self.report.node_samples.push(row);
    }
}

/// Budgets restricted to the layers a policy caches in.
pub fn layer_budgets(policy: PolicyKind, b: &Budgets) -> Budgets {
    match policy {
        PolicyKind::NoCache => Budgets {
            upper: UpperBudget::PerNode(0),
            lower_per_node: 0,
        },
        PolicyKind::PartitionOnly => Budgets {
            upper: UpperBudget::PerNode(0),
            ..*b
        },
        PolicyKind::Replication => Budgets {
            lower_per_node: 0,
            ..*b
        },
        PolicyKind::Pot | PolicyKind::SingleHashUniform => *b,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaturationSearch {
    pub iterations: u32,
    /// Largest tolerated fraction of dropped queries.
    pub max_drop: f64,
    /// Upper end of the search in units of one server's rate; defaults to
    /// the aggregate rate of every station.
    pub ceiling: Option<f64>,
}

impl Default for SaturationSearch {
    fn default() -> Self {
        SaturationSearch {
            iterations: 12,
            max_drop: 0.01,
            ceiling: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Saturation {
    /// Highest offered rate that met the drop bound, in server units.
    pub offered: f64,
    pub normalized_throughput: f64,
    pub report: Option<SimReport>,
}

/// Bisects the offered rate for the largest load the system sustains
/// with at most `max_drop` of queries dropped.
pub fn find_saturation(cfg: &SimConfig, search: &SaturationSearch) -> Result<Saturation> {
    cfg.validate()?;
    let t = &cfg.topology;
    let unit = t.server_rate;
    let ceiling = search.ceiling.unwrap_or_else(|| {
        (t.cache_nodes() as f64 * t.cache_rate + t.servers() as f64 * t.server_rate) / unit
    });
    let (mut lo, mut hi) = (0.0, ceiling);
    let mut best = None;
    for _ in 0..search.iterations {
        let mid = (lo + hi) / 2.0;
        let mut probe = cfg.clone();
        probe.offered_rate = mid * unit;
        let report = run(&probe)?;
        if report.drop_fraction() <= search.max_drop {
            lo = mid;
            best = Some(report);
        } else {
            hi = mid;
        }
    }
    Ok(Saturation {
        offered: lo,
        normalized_throughput: best.as_ref().map_or(0.0, |r| r.normalized_throughput),
        report: best,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stationarity {
    pub stationary: bool,
    /// Least-squares slope of the total queue over the second half, jobs/s.
    pub trend: f64,
}

pub const MIN_PROBE_SAMPLES: usize = 8;

/// Stationary when the mean total queue of the last quarter is within 10%
/// of the third quarter's (with a one-job floor) and no station's queue
/// reached `max_queue`.
pub fn queue_stationarity_probe(report: &SimReport, max_queue: u32) -> Result<Stationarity> {
    let s = &report.samples;
    if s.len() < MIN_PROBE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "stationarity needs at least {MIN_PROBE_SAMPLES} samples, got {}",
            s.len()
        )));
    }
    let q = s.len() / 4;
    let mean =
        |xs: &[Sample]| xs.iter().map(|x| x.queue_total as f64).sum::<f64>() / xs.len() as f64;
    let third = mean(&s[s.len() - 2 * q..s.len() - q]);
    let fourth = mean(&s[s.len() - q..]);
    let peak = s.iter().map(|x| x.queue_max).max().unwrap_or(0);
    let stationary = (fourth - third).abs() <= 0.1 * third.max(1.0) && peak < max_queue;

    let half = &s[s.len() / 2..];
    let n = half.len() as f64;
    let mx = half.iter().map(|x| x.time).sum::<f64>() / n;
    let my = mean(half);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for x in half {
        sxy += (x.time - mx) * (x.queue_total as f64 - my);
        sxx += (x.time - mx).powi(2);
    }
    let trend = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(Stationarity { stationary, trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::zipf_probs;

    fn dist(universe: u64, skew: f64) -> Arc<QueryDistribution> {
        Arc::new(zipf_probs(universe, skew).unwrap())
    }

    fn small() -> Topology {
        Topology {
            spines: 2,
            racks: 2,
            servers_per_rack: 2,
            cache_rate: 200.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_load_is_idle() {
        let cfg = SimConfig::new(small(), PolicyKind::Pot, dist(1000, 0.99));
        let r = run(&cfg).unwrap();
        assert_eq!(r.normalized_throughput, 0.0);
        assert_eq!(r.samples.len(), 100);
        assert!(r
            .samples
            .iter()
            .all(|s| s.queue_total == 0 && s.completed == 0));
        assert!(r.conserved);
    }

    #[test]
    fn fail_and_recover_without_traffic_changes_nothing() {
        let base = SimConfig::new(small(), PolicyKind::Pot, dist(1000, 0.99));
        let failed = base.clone().with_failure(NodeRef::Upper(1), 2.0, Some(4.0));
        let (a, b) = (run(&base).unwrap(), run(&failed).unwrap());
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.normalized_throughput, b.normalized_throughput);
    }

    #[test]
    fn single_server_saturates_at_its_rate() {
        let t = Topology {
            spines: 1,
            racks: 1,
            servers_per_rack: 1,
            client_racks: 1,
            ..Default::default()
        };
        let cfg = SimConfig::new(t, PolicyKind::NoCache, dist(1000, 0.0));
        let sat = find_saturation(&cfg, &SaturationSearch::default()).unwrap();
        assert!(
            (sat.normalized_throughput - 1.0).abs() <= 0.02,
            "{}",
            sat.normalized_throughput
        );
    }

    #[test]
    fn light_load_is_fully_served_and_conserved() {
        let mut cfg = SimConfig::new(small(), PolicyKind::Pot, dist(1000, 0.99));
        cfg.offered_rate = 200.0;
        cfg.write_ratio = 0.1;
        let r = run(&cfg).unwrap();
        assert_eq!(r.dropped, 0);
        assert!(r.conserved);
        assert!(
            (r.normalized_throughput - 2.0).abs() < 0.05,
            "{}",
            r.normalized_throughput
        );
        assert!(r.hit_ratio() > 0.3);
        assert!(r.coherence_messages > 0);
    }

    #[test]
    fn rate_limit_holds_in_every_second() {
        let mut cfg = SimConfig::new(small(), PolicyKind::NoCache, dist(100, 1.2));
        cfg.offered_rate = 2000.0;
        let r = run(&cfg).unwrap();
        assert!(r.dropped > 0);
        let rates: Vec<f64> = (0..r.stations.len())
            .map(|i| {
                if i < 4 {
                    cfg.topology.cache_rate
                } else {
                    cfg.topology.server_rate
                }
            })
            .collect();
        for w in r.node_samples.windows(10) {
            for (i, rate) in rates.iter().enumerate() {
                let served: u32 = w.iter().map(|s| s[i].served).sum();
                assert!(served as f64 <= rate + 1.0, "station {i} served {served}");
            }
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let mut cfg = SimConfig::new(small(), PolicyKind::Pot, dist(1000, 0.99));
        cfg.offered_rate = 500.0;
        cfg.write_ratio = 0.05;
        cfg.arrivals = ArrivalKind::Poisson;
        let a = run(&cfg).unwrap();
        assert_eq!(a, run(&cfg).unwrap());
        cfg.seed = 1;
        assert_ne!(a.samples, run(&cfg).unwrap().samples);
    }

    #[test]
    fn zero_slots_for_a_caching_policy_is_a_config_error() {
        let mut cfg = SimConfig::new(small(), PolicyKind::Pot, dist(10, 0.5));
        cfg.budgets = Budgets::per_node(0);
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
        cfg.policy = PolicyKind::NoCache;
        assert!(run(&cfg).is_ok());
        let bad = SimConfig::new(small(), PolicyKind::Pot, dist(10, 0.5)).with_failure(
            NodeRef::Upper(9),
            1.0,
            None,
        );
        assert!(matches!(run(&bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn probe_needs_enough_samples() {
        let mut cfg = SimConfig::new(small(), PolicyKind::Pot, dist(10, 0.5));
        cfg.horizon = 0.5;
        cfg.warmup = 0.0;
        let r = run(&cfg).unwrap();
        assert!(matches!(
            queue_stationarity_probe(&r, 100),
            Err(Error::InsufficientData(_))
        ));
        cfg.horizon = 10.0;
        let idle = queue_stationarity_probe(&run(&cfg).unwrap(), 100).unwrap();
        assert_eq!(
            idle,
            Stationarity {
                stationary: true,
                trend: 0.0
            }
        );
    }

    #[test]
    fn overloaded_queue_is_not_stationary() {
        let t = Topology {
            spines: 1,
            racks: 1,
            servers_per_rack: 1,
            client_racks: 1,
            ..Default::default()
        };
        let mut cfg = SimConfig::new(t, PolicyKind::NoCache, dist(10, 0.0));
        cfg.service = ServiceMode::Queue;
        cfg.arrivals = ArrivalKind::Poisson;
        cfg.horizon = 60.0;
        cfg.offered_rate = 130.0;
        let p = queue_stationarity_probe(&run(&cfg).unwrap(), 100_000).unwrap();
        assert!(!p.stationary);
        assert!(p.trend > 10.0, "{}", p.trend);
        // Half load spread over many stations.
        cfg.topology = Topology {
            client_racks: 1,
            ..Default::default()
        };
        cfg.distribution = dist(100_000, 0.0);
        cfg.offered_rate = 3200.0;
        let p = queue_stationarity_probe(&run(&cfg).unwrap(), 100_000).unwrap();
        assert!(p.stationary, "{p:?}");
    }

    #[test]
    fn detected_hot_set_approaches_oracle_hit_ratio() {
        let mut cfg = SimConfig::new(small(), PolicyKind::Pot, dist(10_000, 0.99));
        cfg.budgets = Budgets::per_node(20);
        cfg.offered_rate = 300.0;
        cfg.warmup = 4.0;
        let oracle = run(&cfg).unwrap();
        cfg.hot_set = HotSetMode::Detected;
        let detected = run(&cfg).unwrap();
        let late = |r: &SimReport| {
            let s = &r.samples[50..];
            s.iter().map(|x| x.hits).sum::<u64>() as f64
                / s.iter().map(|x| x.completed).sum::<u64>() as f64
        };
        assert!(
            late(&detected) >= 0.9 * late(&oracle),
            "{} vs {}",
            late(&detected),
            late(&oracle)
        );
    }
}
