//! Two-phase write protocol between a key's home server and the cache nodes
//! replicating it.
//!
//! Phase 1 sends one source-routed invalidation through every replica; once
//! it returns, the server commits and acknowledges the client. Phase 2 then
//! pushes the new value to the replicas. Cache insertions reuse phase 2 and
//! are serialized with writes at the server. All state machines are
//! sans-IO: they consume envelopes and return the envelopes to send, with
//! time passed in as integer nanoseconds.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache_node::{CacheConfig, CacheNode, Lookup, UpdateOutcome};
use crate::error::{Error, Result};
use crate::hashing::{ObjectId, Partitioner};
use crate::workload::{zipf_probs, Op, QueryStream, StreamConfig};

pub const MS: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Client(u32),
    Node(u16),
    Server(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    /// `path` lists the remaining hops; its last element is the server.
    Invalidate {
        key: ObjectId,
        version: u64,
        path: Vec<Endpoint>,
    },
    InvAck {
        key: ObjectId,
        version: u64,
    },
    Update {
        key: ObjectId,
        version: u64,
        value: Vec<u8>,
    },
    UpdAck {
        key: ObjectId,
        version: u64,
    },
    Write {
        key: ObjectId,
        value: Vec<u8>,
    },
    WriteAck {
        key: ObjectId,
        version: u64,
    },
    /// Invalidation retries ran out; the write was not applied.
    WriteFailed {
        key: ObjectId,
    },
    Get {
        key: ObjectId,
    },
    GetReply {
        key: ObjectId,
        value: Option<Vec<u8>>,
        version: u64,
        stamps: Vec<(u16, u32)>,
    },
    /// A cache agent reserved a slot for `key` and asks for its value.
    Insert {
        key: ObjectId,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Invalidate { .. } => "INVALIDATE",
            Message::InvAck { .. } => "INV_ACK",
            Message::Update { .. } => "UPDATE",
            Message::UpdAck { .. } => "UPD_ACK",
            Message::Write { .. } => "WRITE",
            Message::WriteAck { .. } => "WRITE_ACK",
            Message::WriteFailed { .. } => "WRITE_FAILED",
            Message::Get { .. } => "GET",
            Message::GetReply { .. } => "GET_REPLY",
            Message::Insert { .. } => "INSERT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub from: Endpoint,
    pub to: Endpoint,
    pub msg: Message,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathOrder {
    UpperFirst,
    LowerFirst,
}

#[derive(Clone, Debug)]
pub struct CoherenceConfig {
    pub timeout: u64,
    pub max_retries: u32,
    pub path_order: PathOrder,
    /// Node ids below this value are upper-layer nodes.
    pub m_upper: u16,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            timeout: 10 * MS,
            max_retries: 5,
            path_order: PathOrder::UpperFirst,
            m_upper: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Invalidating,
    AckedToClient,
    Updating,
    Done,
}

#[derive(Clone, Debug)]
enum Pending {
    Write { client: Endpoint, value: Vec<u8> },
    Insert { node: u16 },
}

#[derive(Clone, Debug)]
struct UpdateState {
    retries: u32,
    deadline: u64,
}

#[derive(Clone, Debug)]
struct Transaction {
    version: u64,
    value: Vec<u8>,
    client: Option<Endpoint>,
    phase: Phase,
    pending_invalidations: BTreeSet<u16>,
    retries: u32,
    deadline: u64,
    updates: BTreeMap<u16, UpdateState>,
}

#[derive(Clone, Debug, Default)]
struct KeyState {
    value: Vec<u8>,
    version: u64,
    replicas: BTreeSet<u16>,
    txn: Option<Transaction>,
    queue: VecDeque<Pending>,
}

#[derive(Clone, Debug, Default)]
pub struct ServerStats {
    pub writes_acked: u64,
    pub writes_failed: u64,
    pub invalidations_sent: u64,
    pub updates_sent: u64,
    pub retransmissions: u64,
    pub updates_abandoned: u64,
}

/// Home server of a set of keys.
#[derive(Clone, Debug)]
pub struct StorageServer {
    id: u32,
    cfg: CoherenceConfig,
    keys: HashMap<ObjectId, KeyState>,
    timers: BinaryHeap<Reverse<(u64, ObjectId)>>,
    pub stats: ServerStats,
}

impl StorageServer {
    pub fn new(id: u32, cfg: CoherenceConfig) -> Self {
        StorageServer {
            id,
            cfg,
            keys: HashMap::new(),
            timers: BinaryHeap::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    fn me(&self) -> Endpoint {
        Endpoint::Server(self.id)
    }

    /// Stores an initial value at version 1.
    pub fn load(&mut self, key: ObjectId, value: Vec<u8>) {
        let st = self.keys.entry(key).or_default();
        st.value = value;
        st.version = 1;
    }

    pub fn committed(&self, key: &ObjectId) -> Option<(&[u8], u64)> {
        self.keys.get(key).map(|s| (s.value.as_slice(), s.version))
    }

    pub fn replicas(&self, key: &ObjectId) -> Vec<u16> {
        self.keys
            .get(key)
            .map(|s| s.replicas.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn phase(&self, key: &ObjectId) -> Option<Phase> {
        self.keys
            .get(key)
            .and_then(|s| s.txn.as_ref().map(|t| t.phase))
    }

    /// True when no key has a transaction in flight or queued.
    pub fn is_idle(&self) -> bool {
        self.keys
            .values()
            .all(|s| s.txn.is_none() && s.queue.is_empty())
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.timers.peek().map(|Reverse((t, _))| *t)
    }

    fn path(&self, replicas: &BTreeSet<u16>) -> Vec<Endpoint> {
        let m = self.cfg.m_upper;
        let (mut upper, mut lower): (Vec<u16>, Vec<u16>) = replicas.iter().partition(|&&n| n < m);
        if self.cfg.path_order == PathOrder::LowerFirst {
            std::mem::swap(&mut upper, &mut lower);
        }
        let mut path: Vec<Endpoint> = upper.into_iter().chain(lower).map(Endpoint::Node).collect();
        path.push(self.me());
        path
    }

    fn send_invalidation(&mut self, key: ObjectId, out: &mut Vec<Envelope>) {
        let st = &self.keys[&key];
        let txn = st.txn.as_ref().expect("invalidating transaction");
        let mut path = self.path(&st.replicas);
        let first = path.remove(0);
        out.push(Envelope {
            from: self.me(),
            to: first,
            msg: Message::Invalidate {
                key,
                version: txn.version,
                path,
            },
        });
        self.stats.invalidations_sent += 1;
    }

    fn send_update(&mut self, key: ObjectId, node: u16, out: &mut Vec<Envelope>) {
        let txn = self.keys[&key].txn.as_ref().expect("updating transaction");
        out.push(Envelope {
            from: self.me(),
            to: Endpoint::Node(node),
            msg: Message::Update {
                key,
                version: txn.version,
                value: txn.value.clone(),
            },
        });
        self.stats.updates_sent += 1;
    }

    pub fn handle(&mut self, now: u64, env: Envelope) -> Vec<Envelope> {
        let mut out = Vec::new();
        match env.msg {
            Message::Write { key, value } => {
                self.keys
                    .entry(key)
                    .or_default()
                    .queue
                    .push_back(Pending::Write {
                        client: env.from,
                        value,
                    });
                self.advance(now, key, &mut out);
            }
            Message::Insert { key } => {
                if let Endpoint::Node(node) = env.from {
                    self.keys
                        .entry(key)
                        .or_default()
                        .queue
                        .push_back(Pending::Insert { node });
                    self.advance(now, key, &mut out);
                }
            }
            Message::Get { key } => {
                let (value, version) = self
                    .committed(&key)
                    .map_or((None, 0), |(v, n)| (Some(v.to_vec()), n));
                out.push(Envelope {
                    from: self.me(),
                    to: env.from,
                    msg: Message::GetReply {
                        key,
                        value,
                        version,
                        stamps: Vec::new(),
                    },
                });
            }
            Message::InvAck { key, version } => {
                let Some(st) = self.keys.get_mut(&key) else {
                    return out;
                };
                let Some(txn) = st.txn.as_mut() else {
                    return out;
                };
                if txn.phase != Phase::Invalidating || txn.version != version {
                    return out;
                }
                txn.pending_invalidations.clear();
                txn.phase = Phase::AckedToClient;
                st.value = txn.value.clone();
                st.version = txn.version;
                if let Some(client) = txn.client {
                    out.push(Envelope {
                        from: self.me(),
                        to: client,
                        msg: Message::WriteAck { key, version },
                    });
                    self.stats.writes_acked += 1;
                }
                self.start_updates(now, key, &mut out);
            }
            Message::UpdAck { key, version } => {
                let Endpoint::Node(node) = env.from else {
                    return out;
                };
                let Some(txn) = self.keys.get_mut(&key).and_then(|s| s.txn.as_mut()) else {
                    return out;
                };
                if txn.phase == Phase::Updating && txn.version == version {
                    txn.updates.remove(&node);
                    if txn.updates.is_empty() {
                        self.finish(now, key, &mut out);
                    }
                }
            }
            _ => {}
        }
        out
    }

    fn start_updates(&mut self, now: u64, key: ObjectId, out: &mut Vec<Envelope>) {
        let deadline = now + self.cfg.timeout;
        let st = self.keys.get_mut(&key).expect("key state");
        let txn = st.txn.as_mut().expect("transaction");
        txn.phase = Phase::Updating;
        let targets: Vec<u16> = match txn.client {
            Some(_) => st.replicas.iter().copied().collect(),
            None => txn.updates.keys().copied().collect(),
        };
        for &n in &targets {
            txn.updates.insert(
                n,
                UpdateState {
                    retries: 0,
                    deadline,
                },
            );
        }
        if targets.is_empty() {
            self.finish(now, key, out);
            return;
        }
        for n in targets {
            self.send_update(key, n, out);
        }
        self.timers.push(Reverse((deadline, key)));
    }

    fn finish(&mut self, now: u64, key: ObjectId, out: &mut Vec<Envelope>) {
        let st = self.keys.get_mut(&key).expect("key state");
        if let Some(t) = st.txn.as_mut() {
            t.phase = Phase::Done;
        }
        st.txn = None;
        self.advance(now, key, out);
    }

    /// Starts the next queued operation on `key` if none is in flight.
    fn advance(&mut self, now: u64, key: ObjectId, out: &mut Vec<Envelope>) {
        loop {
            let st = self.keys.get_mut(&key).expect("key state");
            if st.txn.is_some() {
                return;
            }
            let Some(next) = st.queue.pop_front() else {
                return;
            };
            match next {
                Pending::Write { client, value } => {
                    let version = st.version + 1;
                    if st.replicas.is_empty() {
                        st.value = value;
                        st.version = version;
                        out.push(Envelope {
                            from: self.me(),
                            to: client,
                            msg: Message::WriteAck { key, version },
                        });
                        self.stats.writes_acked += 1;
                        continue;
                    }
                    st.txn = Some(Transaction {
                        version,
                        value,
                        client: Some(client),
                        phase: Phase::Invalidating,
                        pending_invalidations: st.replicas.clone(),
                        retries: 0,
                        deadline: now + self.cfg.timeout,
                        updates: BTreeMap::new(),
                    });
                    self.timers.push(Reverse((now + self.cfg.timeout, key)));
                    self.send_invalidation(key, out);
                    return;
                }
                Pending::Insert { node } => {
                    st.replicas.insert(node);
                    st.txn = Some(Transaction {
                        version: st.version,
                        value: st.value.clone(),
                        client: None,
                        phase: Phase::AckedToClient,
                        pending_invalidations: BTreeSet::new(),
                        retries: 0,
                        deadline: 0,
                        updates: BTreeMap::from([(
                            node,
                            UpdateState {
                                retries: 0,
                                deadline: 0,
                            },
                        )]),
                    });
                    self.start_updates(now, key, out);
                    return;
                }
            }
        }
    }

    /// Retransmits everything whose deadline has passed.
    pub fn on_timer(&mut self, now: u64) -> Vec<Envelope> {
        let mut out = Vec::new();
        while let Some(&Reverse((t, key))) = self.timers.peek() {
            if t > now {
                break;
            }
            self.timers.pop();
            self.expire(now, key, &mut out);
        }
        out
    }

    fn expire(&mut self, now: u64, key: ObjectId, out: &mut Vec<Envelope>) {
        let timeout = self.cfg.timeout;
        let max_retries = self.cfg.max_retries;
        let Some(txn) = self.keys.get_mut(&key).and_then(|s| s.txn.as_mut()) else {
            return;
        };
        match txn.phase {
            Phase::Invalidating if txn.deadline <= now => {
                if txn.retries >= max_retries {
                    let client = txn.client;
                    self.stats.writes_failed += 1;
                    if let Some(c) = client {
                        out.push(Envelope {
                            from: self.me(),
                            to: c,
                            msg: Message::WriteFailed { key },
                        });
                    }
                    self.finish(now, key, out);
                    return;
                }
                txn.retries += 1;
                txn.deadline = now + timeout;
                self.timers.push(Reverse((now + timeout, key)));
                self.stats.retransmissions += 1;
                self.send_invalidation(key, out);
            }
            Phase::Updating => {
                let mut due: Vec<u16> = txn
                    .updates
                    .iter()
                    .filter(|(_, u)| u.deadline <= now)
                    .map(|(&n, _)| n)
                    .collect();
                due.sort_unstable();
                let mut resend = Vec::new();
                for n in due {
                    let u = txn.updates.get_mut(&n).expect("update state");
                    if u.retries >= max_retries {
                        txn.updates.remove(&n);
                        self.stats.updates_abandoned += 1;
                    } else {
                        u.retries += 1;
                        u.deadline = now + timeout;
                        resend.push(n);
                    }
                }
                if txn.updates.is_empty() {
                    self.finish(now, key, out);
                    return;
                }
                if let Some(next) = txn.updates.values().map(|u| u.deadline).min() {
                    self.timers.push(Reverse((next, key)));
                }
                for n in resend {
                    self.stats.retransmissions += 1;
                    self.send_update(key, n, out);
                }
            }
            _ => {}
        }
    }
}

/// Cache-agent side of the protocol for one node.
pub fn node_handle(node: &mut CacheNode, env: Envelope) -> Vec<Envelope> {
    let me = Endpoint::Node(node.id());
    match env.msg {
        Message::Invalidate {
            key,
            version,
            mut path,
        } => {
            node.invalidate(&key, version);
            let next = path.remove(0);
            let msg = if path.is_empty() {
                Message::InvAck { key, version }
            } else {
                Message::Invalidate { key, version, path }
            };
            vec![Envelope {
                from: me,
                to: next,
                msg,
            }]
        }
        Message::Update {
            key,
            version,
            value,
        } => {
            // Stale and uncached updates are acknowledged too so the server
            // stops retransmitting.
            let _ = node.apply_update(&key, &value, version);
            vec![Envelope {
                from: me,
                to: env.from,
                msg: Message::UpdAck { key, version },
            }]
        }
        Message::Get { key } => {
            let (value, version) = match node.cache_get(&key) {
                Lookup::Hit { value, version } => (Some(value), version),
                Lookup::Miss => (None, 0),
            };
            let stamps = vec![(node.id(), node.report_load().min(u32::MAX as u64) as u32)];
            vec![Envelope {
                from: me,
                to: env.from,
                msg: Message::GetReply {
                    key,
                    value,
                    version,
                    stamps,
                },
            }]
        }
        _ => Vec::new(),
    }
}

/// Agent-side insertion: reserves an invalid slot and notifies the home
/// server. Fails if `key` is outside the node's partition.
pub fn insert_hot_object(
    node: &mut CacheNode,
    key: ObjectId,
    owner: u16,
    server: u32,
) -> Result<(Option<ObjectId>, Envelope)> {
    if owner != node.id() {
        return Err(Error::PartitionViolation {
            key,
            node: node.id(),
        });
    }
    let evicted = node.reserve(&key);
    Ok((
        evicted,
        Envelope {
            from: Endpoint::Node(node.id()),
            to: Endpoint::Server(server),
            msg: Message::Insert { key },
        },
    ))
}

#[derive(Clone, Debug)]
pub struct HarnessConfig {
    pub seed: u64,
    pub operations: u64,
    pub write_ratio: f64,
    pub skew: f64,
    pub universe: u64,
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub m_upper: u32,
    pub m_lower: u32,
    /// Keys cached at the start and targeted by insertion churn.
    pub hot_keys: u64,
    pub op_interval: u64,
    pub churn_interval: u64,
    pub min_latency: u64,
    pub max_latency: u64,
    pub coherence: CoherenceConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 1,
            operations: 100_000,
            write_ratio: 0.2,
            skew: 0.9,
            universe: 1_000,
            drop_prob: 0.01,
            dup_prob: 0.01,
            m_upper: 4,
            m_lower: 4,
            hot_keys: 100,
            op_interval: 100_000,
            churn_interval: 2 * MS,
            min_latency: 50_000,
            max_latency: 1_500_000,
            coherence: CoherenceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HarnessReport {
    pub operations: u64,
    pub reads: u64,
    pub cache_hits: u64,
    pub stale_reads: u64,
    pub version_regressions: u64,
    pub writes_acked: u64,
    pub writes_failed: u64,
    pub messages: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub retransmissions: u64,
    pub insertions: u64,
    pub evictions: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Deliver(u64),
    ClientOp(u64),
    Churn,
    Timer,
}

type DropFilter = Box<dyn FnMut(&Envelope) -> bool>;

/// Deterministic network of clients, cache nodes and servers with message
/// drops, duplication and reordering, and a per-key version monitor.
pub struct CoherenceHarness {
    cfg: HarnessConfig,
    partitioner: Partitioner,
    nodes: Vec<CacheNode>,
    servers: Vec<StorageServer>,
    rng: ChaCha8Rng,
    net_rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(u64, u64, Event)>>,
    in_flight: HashMap<u64, Envelope>,
    seq: u64,
    /// Highest version whose write the server has acknowledged.
    acked: HashMap<ObjectId, u64>,
    /// Highest version each node has served for each key.
    served: HashMap<(u16, ObjectId), u64>,
    drop_filter: Option<DropFilter>,
    report: HarnessReport,
}

impl CoherenceHarness {
    pub fn new(cfg: HarnessConfig) -> Result<Self> {
        let partitioner =
            Partitioner::new(cfg.seed ^ 0x51, cfg.seed ^ 0xa7, cfg.m_upper, cfg.m_lower)?;
        let coh = CoherenceConfig {
            m_upper: cfg.m_upper as u16,
            ..cfg.coherence.clone()
        };
        let nodes = (0..cfg.m_upper + cfg.m_lower)
            .map(|i| {
                CacheNode::new(
                    i as u16,
                    CacheConfig {
                        slots: 100,
                        ..Default::default()
                    },
                )
            })
            .collect();
        let mut servers: Vec<StorageServer> = (0..cfg.m_lower)
            .map(|i| StorageServer::new(i, coh.clone()))
            .collect();
        for i in 0..cfg.universe {
            let key = ObjectId::from_index(i);
            servers[partitioner.h1(&key) as usize].load(key, i.to_le_bytes().to_vec());
        }
        Ok(CoherenceHarness {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            net_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006e_6574_776f_726b),
            cfg,
            partitioner,
            nodes,
            servers,
            queue: BinaryHeap::new(),
            in_flight: HashMap::new(),
            seq: 0,
            acked: HashMap::new(),
            served: HashMap::new(),
            drop_filter: None,
            report: HarnessReport::default(),
        })
    }

    /// Drops exactly the messages for which `f` returns true, in addition to
    /// random loss.
    pub fn with_drop_filter(mut self, f: impl FnMut(&Envelope) -> bool + 'static) -> Self {
        self.drop_filter = Some(Box::new(f));
        self
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, ev)));
    }

    fn send(&mut self, now: u64, env: Envelope) {
        self.report.messages += 1;
        if let Some(f) = self.drop_filter.as_mut() {
            if f(&env) {
                self.report.dropped += 1;
                return;
            }
        }
        if self.net_rng.random_bool(self.cfg.drop_prob) {
            self.report.dropped += 1;
            return;
        }
        let copies = if self.net_rng.random_bool(self.cfg.dup_prob) {
            self.report.duplicated += 1;
            2
        } else {
            1
        };
        for _ in 0..copies {
            let delay = self
                .net_rng
                .random_range(self.cfg.min_latency..=self.cfg.max_latency);
            let id = self.seq + 1;
            self.in_flight.insert(id, env.clone());
            self.schedule(now + delay, Event::Deliver(id));
        }
    }

    fn home(&self, key: &ObjectId) -> u32 {
        self.partitioner.h1(key)
    }

    fn owners(&self, key: &ObjectId) -> [u16; 2] {
        let (a, b) = self.partitioner.locate(key);
        [a as u16, (self.cfg.m_upper + b) as u16]
    }

    fn insert(&mut self, now: u64, node: u16, key: ObjectId) {
        let server = self.home(&key);
        let (evicted, env) = insert_hot_object(&mut self.nodes[node as usize], key, node, server)
            .expect("harness inserts only into owning nodes");
        if evicted.is_some() {
            self.report.evictions += 1;
        }
        self.report.insertions += 1;
        self.send(now, env);
    }

    fn deliver(&mut self, now: u64, env: Envelope) {
        match env.to {
            Endpoint::Node(n) => {
                let node = &mut self.nodes[n as usize];
                let outs = node_handle(node, env);
                for out in outs {
                    if let Message::GetReply {
                        key,
                        value: Some(_),
                        version,
                        ..
                    } = &out.msg
                    {
                        self.report.cache_hits += 1;
                        if version < self.acked.get(key).unwrap_or(&0) {
                            self.report.stale_reads += 1;
                        }
                        let best = self.served.entry((n, *key)).or_insert(0);
                        if version < best {
                            self.report.version_regressions += 1;
                        }
                        *best = (*best).max(*version);
                    }
                    self.send(now, out);
                }
            }
            Endpoint::Server(s) => {
                let outs = self.servers[s as usize].handle(now, env);
                for out in outs {
                    self.observe_server_output(&out);
                    self.send(now, out);
                }
            }
            Endpoint::Client(_) => {
                if let Message::GetReply {
                    key, value: None, ..
                } = env.msg
                {
                    // Cache miss: fall back to the home server.
                    let server = self.home(&key);
                    self.send(
                        now,
                        Envelope {
                            from: env.to,
                            to: Endpoint::Server(server),
                            msg: Message::Get { key },
                        },
                    );
                }
            }
        }
    }

    fn observe_server_output(&mut self, out: &Envelope) {
        match &out.msg {
            Message::WriteAck { key, version } => {
                let a = self.acked.entry(*key).or_insert(0);
                *a = (*a).max(*version);
            }
            Message::GetReply { key, version, .. }
                if version < self.acked.get(key).unwrap_or(&0) =>
            {
                self.report.stale_reads += 1;
            }
            _ => {}
        }
    }

    pub fn run(mut self) -> Result<HarnessReport> {
        self.run_in_place()
    }

    pub fn run_in_place(&mut self) -> Result<HarnessReport> {
        let dist = zipf_probs(self.cfg.universe, self.cfg.skew)?;
        let stream = QueryStream::new(
            &dist,
            StreamConfig {
                seed: self.cfg.seed,
                write_ratio: self.cfg.write_ratio,
                ..Default::default()
            },
        )?;
        for i in 0..self.cfg.hot_keys.min(self.cfg.universe) {
            let key = ObjectId::from_index(i);
            for n in self.owners(&key) {
                self.insert(0, n, key);
            }
        }
        for i in 0..self.cfg.operations {
            self.schedule((i + 1) * self.cfg.op_interval, Event::ClientOp(i));
        }
        let end_ops = (self.cfg.operations + 1) * self.cfg.op_interval;
        self.schedule(self.cfg.churn_interval, Event::Churn);
        self.schedule(MS, Event::Timer);

        while let Some(Reverse((now, _, ev))) = self.queue.pop() {
            match ev {
                Event::Deliver(id) => {
                    let env = self.in_flight.remove(&id).expect("in-flight message");
                    self.deliver(now, env);
                }
                Event::ClientOp(i) => {
                    let q = stream.query_at(i);
                    self.report.operations += 1;
                    let client = Endpoint::Client(0);
                    match q.op {
                        Op::Set => {
                            let server = self.home(&q.key);
                            let value = q.value.unwrap_or_default();
                            self.send(
                                now,
                                Envelope {
                                    from: client,
                                    to: Endpoint::Server(server),
                                    msg: Message::Write { key: q.key, value },
                                },
                            );
                        }
                        Op::Get => {
                            self.report.reads += 1;
                            let owners = self.owners(&q.key);
                            let to = Endpoint::Node(owners[self.rng.random_range(0..2)]);
                            self.send(
                                now,
                                Envelope {
                                    from: client,
                                    to,
                                    msg: Message::Get { key: q.key },
                                },
                            );
                        }
                    }
                }
                Event::Churn => {
                    let key = ObjectId::from_index(
                        self.rng
                            .random_range(0..(2 * self.cfg.hot_keys).min(self.cfg.universe)),
                    );
                    let node = self.owners(&key)[self.rng.random_range(0..2)];
                    if self.nodes[node as usize].contains(&key) && self.rng.random_bool(0.5) {
                        self.nodes[node as usize].evict(&key);
                        self.report.evictions += 1;
                    } else {
                        self.insert(now, node, key);
                    }
                    if now < end_ops {
                        self.schedule(now + self.cfg.churn_interval, Event::Churn);
                    }
                }
                Event::Timer => {
                    for s in 0..self.servers.len() {
                        let outs = self.servers[s].on_timer(now);
                        for out in outs {
                            self.observe_server_output(&out);
                            self.send(now, out);
                        }
                    }
                    let busy = self.servers.iter().any(|s| !s.is_idle());
                    if now < end_ops || busy || !self.in_flight.is_empty() {
                        self.schedule(now + MS, Event::Timer);
                    }
                }
            }
        }
        for s in &self.servers {
            self.report.writes_acked += s.stats.writes_acked;
            self.report.writes_failed += s.stats.writes_failed;
            self.report.retransmissions += s.stats.retransmissions;
        }
        Ok(self.report.clone())
    }

    /// Committed state of every server plus every node's cache contents,
    /// for run-to-run comparison.
    pub fn snapshot(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.cfg.universe {
            let key = ObjectId::from_index(i);
            let s = &self.servers[self.home(&key) as usize];
            if let Some((v, n)) = s.committed(&key) {
                out.push(format!("server {key} {n} {v:?}"));
            }
            for n in &self.nodes {
                if let Some(e) = n.entry(&key) {
                    out.push(format!(
                        "node {} {key} {} {} {:?}",
                        n.id(),
                        e.version,
                        e.valid,
                        e.value
                    ));
                }
            }
        }
        out
    }
}

/// Delivers messages in FIFO order with no loss; used for scripted traces.
pub fn run_script(
    servers: &mut [StorageServer],
    nodes: &mut [CacheNode],
    initial: Vec<Envelope>,
    trace: &mut Vec<Envelope>,
) {
    let mut queue: VecDeque<Envelope> = initial.into();
    while let Some(env) = queue.pop_front() {
        trace.push(env.clone());
        let outs = match env.to {
            Endpoint::Server(s) => servers[s as usize].handle(0, env),
            Endpoint::Node(n) => node_handle(&mut nodes[n as usize], env),
            Endpoint::Client(_) => Vec::new(),
        };
        queue.extend(outs);
    }
}

/// Convenience for tests: outcome of a direct update.
pub fn direct_update(
    node: &mut CacheNode,
    key: &ObjectId,
    value: &[u8],
    version: u64,
) -> UpdateOutcome {
    node.apply_update(key, value, version)
        .expect("value within bounds")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CLIENT: Endpoint = Endpoint::Client(0);

    fn setup() -> (Vec<StorageServer>, Vec<CacheNode>, ObjectId) {
        let cfg = CoherenceConfig {
            m_upper: 2,
            ..Default::default()
        };
        let mut s = StorageServer::new(0, cfg);
        let key = ObjectId::from_index(1);
        s.load(key, b"v1".to_vec());
        let nodes = (0..4)
            .map(|i| CacheNode::new(i, CacheConfig::default()))
            .collect();
        (vec![s], nodes, key)
    }

    fn cache(servers: &mut [StorageServer], nodes: &mut [CacheNode], key: ObjectId, node: u16) {
        let (_, env) = insert_hot_object(&mut nodes[node as usize], key, node, 0).unwrap();
        run_script(servers, nodes, vec![env], &mut Vec::new());
    }

    fn write(key: ObjectId, value: &[u8]) -> Envelope {
        Envelope {
            from: CLIENT,
            to: Endpoint::Server(0),
            msg: Message::Write {
                key,
                value: value.to_vec(),
            },
        }
    }

    #[test]
    fn uncached_write_acks_without_cache_traffic() {
        let (mut servers, mut nodes, key) = setup();
        let mut trace = Vec::new();
        run_script(
            &mut servers,
            &mut nodes,
            vec![write(key, b"v2")],
            &mut trace,
        );
        let kinds: Vec<_> = trace.iter().map(|e| e.msg.kind()).collect();
        assert_eq!(kinds, ["WRITE", "WRITE_ACK"]);
        assert_eq!(servers[0].committed(&key), Some((&b"v2"[..], 2)));
    }

    #[test]
    fn insertion_without_writes_installs_committed_value() {
        let (mut servers, mut nodes, key) = setup();
        cache(&mut servers, &mut nodes, key, 1);
        assert_eq!(
            nodes[1].cache_get(&key),
            Lookup::Hit {
                value: b"v1".to_vec(),
                version: 1
            }
        );
        assert_eq!(servers[0].replicas(&key), vec![1]);
    }

    #[test]
    fn insertion_outside_partition_is_rejected() {
        let mut node = CacheNode::new(3, CacheConfig::default());
        let err = insert_hot_object(&mut node, ObjectId::from_index(1), 2, 0).unwrap_err();
        assert!(matches!(err, Error::PartitionViolation { node: 3, .. }));
        assert!(node.is_empty());
    }

    #[test]
    fn two_replica_write_follows_two_phase_shape() {
        let (mut servers, mut nodes, key) = setup();
        cache(&mut servers, &mut nodes, key, 0);
        cache(&mut servers, &mut nodes, key, 3);
        let mut trace = Vec::new();
        run_script(
            &mut servers,
            &mut nodes,
            vec![write(key, b"v2")],
            &mut trace,
        );
        let steps: Vec<_> = trace.iter().map(|e| (e.msg.kind(), e.from, e.to)).collect();
        use Endpoint::*;
        assert_eq!(
            steps,
            [
                ("WRITE", Client(0), Server(0)),
                ("INVALIDATE", Server(0), Node(0)),
                ("INVALIDATE", Node(0), Node(3)),
                ("INV_ACK", Node(3), Server(0)),
                ("WRITE_ACK", Server(0), Client(0)),
                ("UPDATE", Server(0), Node(0)),
                ("UPDATE", Server(0), Node(3)),
                ("UPD_ACK", Node(0), Server(0)),
                ("UPD_ACK", Node(3), Server(0)),
            ]
        );
        for n in [0, 3] {
            assert_eq!(
                nodes[n].cache_get(&key),
                Lookup::Hit {
                    value: b"v2".to_vec(),
                    version: 2
                }
            );
        }
        assert_eq!(servers[0].phase(&key), None);
    }

    #[test]
    fn path_order_does_not_change_outcome() {
        let mut finals = Vec::new();
        for order in [PathOrder::UpperFirst, PathOrder::LowerFirst] {
            let cfg = CoherenceConfig {
                m_upper: 2,
                path_order: order,
                ..Default::default()
            };
            let mut servers = vec![StorageServer::new(0, cfg)];
            let key = ObjectId::from_index(1);
            servers[0].load(key, b"v1".to_vec());
            let mut nodes: Vec<_> = (0..4)
                .map(|i| CacheNode::new(i, CacheConfig::default()))
                .collect();
            cache(&mut servers, &mut nodes, key, 0);
            cache(&mut servers, &mut nodes, key, 3);
            let mut trace = Vec::new();
            run_script(
                &mut servers,
                &mut nodes,
                vec![write(key, b"v2")],
                &mut trace,
            );
            let first_hop = trace
                .iter()
                .find(|e| e.msg.kind() == "INVALIDATE")
                .unwrap()
                .to;
            let expected = if order == PathOrder::UpperFirst {
                Endpoint::Node(0)
            } else {
                Endpoint::Node(3)
            };
            assert_eq!(first_hop, expected);
            finals.push((nodes[0].entry(&key).cloned(), nodes[3].entry(&key).cloned()));
        }
        assert_eq!(finals[0], finals[1]);
    }

    #[test]
    fn lost_invalidation_is_retransmitted() {
        let (mut servers, mut nodes, key) = setup();
        cache(&mut servers, &mut nodes, key, 0);
        let s = &mut servers[0];
        let out = s.handle(0, write(key, b"v2"));
        assert_eq!(out.len(), 1);
        // Drop it; the timer fires the same invalidation again.
        assert!(s.on_timer(5 * MS).is_empty());
        let again = s.on_timer(10 * MS);
        assert_eq!(again, out);
        assert_eq!(s.stats.retransmissions, 1);
        let mut trace = Vec::new();
        run_script(&mut servers, &mut nodes, again, &mut trace);
        assert_eq!(
            nodes[0].cache_get(&key),
            Lookup::Hit {
                value: b"v2".to_vec(),
                version: 2
            }
        );
    }

    #[test]
    fn exhausted_retries_fail_the_write() {
        let (mut servers, mut nodes, key) = setup();
        cache(&mut servers, &mut nodes, key, 0);
        let s = &mut servers[0];
        s.handle(0, write(key, b"v2"));
        let mut failed = false;
        for t in 1..=6 {
            for e in s.on_timer(t * 10 * MS) {
                failed |= e.msg == Message::WriteFailed { key };
            }
        }
        assert!(failed);
        assert_eq!(s.committed(&key), Some((&b"v1"[..], 1)));
        assert!(s.is_idle());
    }

    /// Both orders of an insertion racing a write end with the cache holding
    /// the server's final committed value.
    #[test]
    fn insertion_racing_a_write_converges() {
        for insert_first in [true, false] {
            let (mut servers, mut nodes, key) = setup();
            let (_, ins) = insert_hot_object(&mut nodes[1], key, 1, 0).unwrap();
            let w = write(key, b"v2");
            let initial = if insert_first {
                vec![ins, w]
            } else {
                vec![w, ins]
            };
            run_script(&mut servers, &mut nodes, initial, &mut Vec::new());
            let (value, version) = servers[0].committed(&key).unwrap();
            assert_eq!(
                nodes[1].cache_get(&key),
                Lookup::Hit {
                    value: value.to_vec(),
                    version
                }
            );
        }
    }

    #[test]
    fn reordered_updates_never_regress() {
        let mut node = CacheNode::new(0, CacheConfig::default());
        let key = ObjectId::from_index(1);
        node.reserve(&key);
        assert_eq!(
            direct_update(&mut node, &key, b"v2", 2),
            UpdateOutcome::Installed
        );
        assert_eq!(
            direct_update(&mut node, &key, b"v1", 1),
            UpdateOutcome::StaleRejected
        );
        assert_eq!(
            direct_update(&mut node, &key, b"v2", 2),
            UpdateOutcome::StaleRejected
        );
        assert_eq!(
            node.cache_get(&key),
            Lookup::Hit {
                value: b"v2".to_vec(),
                version: 2
            }
        );
    }

    #[test]
    fn single_drop_run_matches_no_drop_run() {
        let cfg = HarnessConfig {
            operations: 2_000,
            drop_prob: 0.0,
            dup_prob: 0.0,
            min_latency: 100_000,
            max_latency: 100_000,
            ..Default::default()
        };
        let clean = CoherenceHarness::new(cfg.clone()).unwrap();
        let mut first = true;
        let faulty = CoherenceHarness::new(cfg)
            .unwrap()
            .with_drop_filter(move |e| {
                let hit = first && matches!(e.msg, Message::Invalidate { .. });
                first &= !hit;
                hit
            });
        let run = |mut h: CoherenceHarness| {
            let report = h.run_in_place().unwrap();
            (report, h.snapshot())
        };
        let (r1, s1) = run(clean);
        let (r2, s2) = run(faulty);
        assert_eq!(r2.dropped, 1);
        assert_eq!(r2.retransmissions, 1);
        assert_eq!(r1.stale_reads + r2.stale_reads, 0);
        assert_eq!(s1, s2);
    }

    #[test]
    fn faulty_network_has_no_stale_reads() {
        let cfg = HarnessConfig {
            operations: 20_000,
            ..Default::default()
        };
        let r = CoherenceHarness::new(cfg).unwrap().run().unwrap();
        assert!(r.dropped > 0 && r.duplicated > 0 && r.cache_hits > 0);
        assert_eq!(r.stale_reads, 0);
        assert_eq!(r.version_regressions, 0);
    }
}
