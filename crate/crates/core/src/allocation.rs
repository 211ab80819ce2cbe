//! Controller-side cache allocation: per-layer partitions with failure
//! remapping, hot-set budgets, and heavy-hitter driven refresh.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};
use crate::hashing::{hash_key, NodeRef, ObjectId, Partitioner};
use crate::routing::{HotSetView, PolicyKind};
use crate::workload::QueryDistribution;

pub const DEFAULT_VNODES: u32 = 64;

const RING_SALT: u64 = 0x7f4a_7c15_9e37_79b9;

/// Consistent-hash ring with virtual nodes.
#[derive(Clone, Debug)]
pub struct HashRing {
    points: Vec<(u64, u32)>,
    seed: u64,
}

impl HashRing {
    pub fn new(nodes: &[u32], vnodes: u32, seed: u64) -> Self {
        let mut points = Vec::with_capacity(nodes.len() * vnodes as usize);
        for &n in nodes {
            for v in 0..vnodes {
                let mut bytes = [0u8; 8];
                bytes[..4].copy_from_slice(&n.to_le_bytes());
                bytes[4..].copy_from_slice(&v.to_le_bytes());
                points.push((xxh3_64_with_seed(&bytes, seed), n));
            }
        }
        points.sort_unstable();
        HashRing { points, seed }
    }

    pub fn lookup(&self, key: &ObjectId) -> Option<u32> {
        if self.points.is_empty() {
            return None;
        }
        let h = hash_key(self.seed ^ RING_SALT, key);
        let i = self.points.partition_point(|&(p, _)| p < h);
        Some(self.points[i % self.points.len()].1)
    }
}

/// Which node owns each key in each layer. Upper keys whose hash-designated
/// node has failed move to the survivors through a consistent-hash ring.
#[derive(Clone, Debug)]
pub struct PartitionMap {
    partitioner: Partitioner,
    upper_alive: Vec<bool>,
    lower_alive: Vec<bool>,
    ring: Option<HashRing>,
    vnodes: u32,
    ring_seed: u64,
    version: u64,
}

impl PartitionMap {
    pub fn compute(partitioner: &Partitioner, vnodes: u32, ring_seed: u64) -> Self {
        PartitionMap {
            upper_alive: vec![true; partitioner.m_upper() as usize],
            lower_alive: vec![true; partitioner.m_lower() as usize],
            partitioner: partitioner.clone(),
            ring: None,
            vnodes,
            ring_seed,
            version: 1,
        }
    }

    pub fn partitioner(&self) -> &Partitioner {
        &self.partitioner
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn upper_owner(&self, key: &ObjectId) -> Option<u32> {
        let a = self.partitioner.h0(key);
        if self.upper_alive[a as usize] {
            Some(a)
        } else {
            self.ring.as_ref().and_then(|r| r.lookup(key))
        }
    }

    pub fn lower_owner(&self, key: &ObjectId) -> Option<u32> {
        let b = self.partitioner.h1(key);
        self.lower_alive[b as usize].then_some(b)
    }

    pub fn owner(&self, key: &ObjectId, node: NodeRef) -> bool {
        match node {
            NodeRef::Upper(a) => self.upper_owner(key) == Some(a),
            NodeRef::Lower(b) => self.lower_owner(key) == Some(b),
        }
    }

    pub fn alive_upper(&self) -> Vec<u32> {
        (0..self.upper_alive.len() as u32)
            .filter(|&a| self.upper_alive[a as usize])
            .collect()
    }

    pub fn alive_lower(&self) -> Vec<u32> {
        (0..self.lower_alive.len() as u32)
            .filter(|&b| self.lower_alive[b as usize])
            .collect()
    }

    pub fn is_alive(&self, node: NodeRef) -> bool {
        match node {
            NodeRef::Upper(a) => self.upper_alive.get(a as usize).copied().unwrap_or(false),
            NodeRef::Lower(b) => self.lower_alive.get(b as usize).copied().unwrap_or(false),
        }
    }

    fn slot(&mut self, node: NodeRef) -> Result<&mut bool> {
        let slot = match node {
            NodeRef::Upper(a) => self.upper_alive.get_mut(a as usize),
            NodeRef::Lower(b) => self.lower_alive.get_mut(b as usize),
        };
        slot.ok_or_else(|| Error::invalid(format!("unknown node {node}")))
    }

    fn rebuild(&mut self) {
        let alive = self.alive_upper();
        self.ring = (alive.len() < self.upper_alive.len())
            .then(|| HashRing::new(&alive, self.vnodes, self.ring_seed));
        self.version += 1;
    }

    pub fn fail(&mut self, node: NodeRef) -> Result<()> {
        *self.slot(node)? = false;
        self.rebuild();
        Ok(())
    }

    pub fn recover(&mut self, node: NodeRef) -> Result<()> {
        *self.slot(node)? = true;
        self.rebuild();
        Ok(())
    }

    /// One line per node: `layer node seed version alive`.
    pub fn dump(&self) -> String {
        let (s0, s1) = self.partitioner.seeds();
        let mut out = String::from("# layer node seed version alive\n");
        for (a, alive) in self.upper_alive.iter().enumerate() {
            writeln!(out, "upper {a} {s0} {} {alive}", self.version).unwrap();
        }
        for (b, alive) in self.lower_alive.iter().enumerate() {
            writeln!(out, "lower {b} {s1} {} {alive}", self.version).unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpperBudget {
    /// Slots per upper node, filled from that node's partition.
    PerNode(usize),
    /// Globally hottest keys, each placed at its upper owner.
    Total(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budgets {
    pub upper: UpperBudget,
    pub lower_per_node: usize,
}

impl Budgets {
    pub fn per_node(slots: usize) -> Self {
        Budgets {
            upper: UpperBudget::PerNode(slots),
            lower_per_node: slots,
        }
    }

    /// `⌈c_l · l ln l⌉` per lower node and `⌈c_u · m ln m⌉` upper keys in
    /// total (at least one each).
    pub fn from_constants(m_upper: u32, servers_per_rack: u32, c_lower: f64, c_upper: f64) -> Self {
        let size = |c: f64, n: u32| ((c * n as f64 * (n as f64).ln()).ceil() as usize).max(1);
        Budgets {
            upper: UpperBudget::Total(size(c_upper, m_upper)),
            lower_per_node: size(c_lower, servers_per_rack),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    Evict { node: NodeRef, key: ObjectId },
    Insert { node: NodeRef, key: ObjectId },
}

/// Cached keys per node. In replicated mode every upper node holds the
/// whole upper set.
#[derive(Clone, Debug, Default)]
pub struct HotSet {
    upper: HashMap<ObjectId, u32>,
    lower: HashMap<ObjectId, u32>,
    upper_nodes: BTreeMap<u32, BTreeSet<ObjectId>>,
    lower_nodes: BTreeMap<u32, BTreeSet<ObjectId>>,
    replicated: bool,
}

impl HotSetView for HotSet {
    fn upper(&self, key: &ObjectId) -> Option<u32> {
        self.upper.get(key).copied()
    }

    fn lower(&self, key: &ObjectId) -> Option<u32> {
        self.lower.get(key).copied()
    }
}

impl HotSet {
    pub fn replicated() -> Self {
        HotSet {
            replicated: true,
            ..Default::default()
        }
    }

    pub fn is_replicated(&self) -> bool {
        self.replicated
    }

    pub fn insert(&mut self, node: NodeRef, key: ObjectId) {
        match node {
            NodeRef::Upper(a) => {
                if let Some(old) = self.upper.insert(key, a) {
                    self.upper_nodes.entry(old).or_default().remove(&key);
                }
                self.upper_nodes.entry(a).or_default().insert(key);
            }
            NodeRef::Lower(b) => {
                if let Some(old) = self.lower.insert(key, b) {
                    self.lower_nodes.entry(old).or_default().remove(&key);
                }
                self.lower_nodes.entry(b).or_default().insert(key);
            }
        }
    }

    pub fn remove(&mut self, node: NodeRef, key: &ObjectId) -> bool {
        let (map, nodes, n) = match node {
            NodeRef::Upper(a) => (&mut self.upper, &mut self.upper_nodes, a),
            NodeRef::Lower(b) => (&mut self.lower, &mut self.lower_nodes, b),
        };
        if map.get(key) == Some(&n) {
            map.remove(key);
            nodes.entry(n).or_default().remove(key);
            true
        } else {
            false
        }
    }

    pub fn apply(&mut self, cmd: &Command) {
        match *cmd {
            Command::Evict { node, key } => {
                self.remove(node, &key);
            }
            Command::Insert { node, key } => self.insert(node, key),
        }
    }

    /// Keys assigned to `node`, in key order.
    pub fn keys_at(&self, node: NodeRef) -> Vec<ObjectId> {
        let set = match node {
            NodeRef::Upper(a) => self.upper_nodes.get(&a),
            NodeRef::Lower(b) => self.lower_nodes.get(&b),
        };
        set.map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    /// Upper-layer keys in key order (the replicated set in replicated mode).
    pub fn upper_keys(&self) -> Vec<ObjectId> {
        self.upper_nodes
            .values()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn len_upper(&self) -> usize {
        self.upper.len()
    }

    pub fn len_lower(&self) -> usize {
        self.lower.len()
    }

    /// Nodes holding a copy of `key`, upper layer first.
    pub fn replicas(&self, key: &ObjectId, m_upper: u32) -> Vec<NodeRef> {
        let mut out = Vec::new();
        if let Some(&a) = self.upper.get(key) {
            if self.replicated {
                out.extend((0..m_upper).map(NodeRef::Upper));
            } else {
                out.push(NodeRef::Upper(a));
            }
        }
        if let Some(&b) = self.lower.get(key) {
            out.push(NodeRef::Lower(b));
        }
        out
    }

    /// Hot set computed from known popularity: each node gets the most
    /// popular keys of its partition up to its budget.
    pub fn oracle(
        policy: PolicyKind,
        map: &PartitionMap,
        d: &QueryDistribution,
        budgets: &Budgets,
    ) -> Self {
        let mut order: Vec<usize> = (0..d.len()).collect();
        if d.skew().is_none() {
            order.sort_by(|&a, &b| d.probs()[b].total_cmp(&d.probs()[a]).then(a.cmp(&b)));
        }
        let keys = order.into_iter().map(|i| d.key(i));
        let p = map.partitioner();
        let mut hs = if policy == PolicyKind::Replication {
            HotSet::replicated()
        } else {
            HotSet::default()
        };
        let upper_nodes = map.alive_upper().len();
        let lower_nodes = map.alive_lower().len();
        let upper_per = match budgets.upper {
            UpperBudget::PerNode(n) => n,
            UpperBudget::Total(n) => n,
        };
        let (want_upper, want_lower) = match policy {
            PolicyKind::NoCache => (0, 0),
            PolicyKind::PartitionOnly => (0, budgets.lower_per_node * lower_nodes),
            PolicyKind::Replication => (upper_per, 0),
            PolicyKind::Pot => (
                match budgets.upper {
                    UpperBudget::PerNode(n) => n * upper_nodes,
                    UpperBudget::Total(n) => n,
                },
                budgets.lower_per_node * lower_nodes,
            ),
            PolicyKind::SingleHashUniform => (
                upper_per * upper_nodes,
                budgets.lower_per_node * lower_nodes,
            ),
        };
        let mut upper_count: HashMap<u32, usize> = HashMap::new();
        let mut lower_count: HashMap<u32, usize> = HashMap::new();
        let (mut got_upper, mut got_lower) = (0, 0);
        for key in keys {
            if got_upper >= want_upper && got_lower >= want_lower {
                break;
            }
            let (up, low) = match policy {
                PolicyKind::SingleHashUniform => match p.single(&key) {
                    NodeRef::Upper(a) => (map.is_alive(NodeRef::Upper(a)).then_some(a), None),
                    NodeRef::Lower(b) => (None, map.lower_owner(&key).filter(|&x| x == b)),
                },
                PolicyKind::Replication => (Some(p.h0(&key)), None),
                _ => (map.upper_owner(&key), map.lower_owner(&key)),
            };
            if got_upper < want_upper {
                if let Some(a) = up {
                    let c = upper_count.entry(a).or_default();
                    let cap = match (policy, budgets.upper) {
                        (PolicyKind::Replication, _) | (_, UpperBudget::Total(_)) => usize::MAX,
                        (_, UpperBudget::PerNode(n)) => n,
                    };
                    if *c < cap {
                        *c += 1;
                        got_upper += 1;
                        hs.insert(NodeRef::Upper(a), key);
                    }
                }
            }
            if got_lower < want_lower {
                if let Some(b) = low {
                    let c = lower_count.entry(b).or_default();
                    if *c < budgets.lower_per_node {
                        *c += 1;
                        got_lower += 1;
                        hs.insert(NodeRef::Lower(b), key);
                    }
                }
            }
        }
        hs
    }

    /// Every object of `d` at both of its nodes (or its single node).
    pub fn all_objects(policy: PolicyKind, p: &Partitioner, d: &QueryDistribution) -> Self {
        let mut hs = HotSet::default();
        for i in 0..d.len() {
            let key = d.key(i);
            match policy {
                PolicyKind::SingleHashUniform => hs.insert(p.single(&key), key),
                _ => {
                    hs.insert(NodeRef::Upper(p.h0(&key)), key);
                    hs.insert(NodeRef::Lower(p.h1(&key)), key);
                }
            }
        }
        hs
    }
}

/// One node's view at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeReport {
    pub node: NodeRef,
    /// Uncached heavy hitters with sketch estimates.
    pub candidates: Vec<(ObjectId, u16)>,
    /// Sketch estimates for the node's cached keys.
    pub cached: Vec<(ObjectId, u16)>,
}

/// Turns heavy-hitter reports into insert and evict commands: each node
/// targets the top of its own partition by aggregated estimate.
/// Evictions come first so budgets are never exceeded.
pub fn refresh_hot_set(
    map: &PartitionMap,
    budgets: &Budgets,
    reports: &[NodeReport],
    current: &HotSet,
) -> Vec<Command> {
    let mut counts: BTreeMap<ObjectId, u64> = BTreeMap::new();
    for r in reports {
        for &(k, c) in r.candidates.iter().chain(&r.cached) {
            *counts.entry(k).or_default() += c as u64;
        }
    }
    for k in current.upper.keys().chain(current.lower.keys()) {
        counts.entry(*k).or_default();
    }
    let mut ranked: Vec<(ObjectId, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut target: BTreeMap<NodeRef, BTreeSet<ObjectId>> = BTreeMap::new();
    let mut upper_total = 0;
    for &(key, _) in &ranked {
        if let Some(a) = map.upper_owner(&key) {
            let set = target.entry(NodeRef::Upper(a)).or_default();
            let fits = match budgets.upper {
                UpperBudget::PerNode(n) => set.len() < n,
                UpperBudget::Total(n) => upper_total < n,
            };
            if fits {
                set.insert(key);
                upper_total += 1;
            }
        }
        if let Some(b) = map.lower_owner(&key) {
            let set = target.entry(NodeRef::Lower(b)).or_default();
            if set.len() < budgets.lower_per_node {
                set.insert(key);
            }
        }
    }

    let mut nodes: BTreeSet<NodeRef> = target.keys().copied().collect();
    nodes.extend(current.upper_nodes.keys().map(|&a| NodeRef::Upper(a)));
    nodes.extend(current.lower_nodes.keys().map(|&b| NodeRef::Lower(b)));
    let empty = BTreeSet::new();
    let mut evicts = Vec::new();
    let mut inserts = Vec::new();
    for node in nodes {
        let want = target.get(&node).unwrap_or(&empty);
        let have: BTreeSet<ObjectId> = current.keys_at(node).into_iter().collect();
        evicts.extend(
            have.difference(want)
                .map(|&key| Command::Evict { node, key }),
        );
        inserts.extend(
            want.difference(&have)
                .map(|&key| Command::Insert { node, key }),
        );
    }
    evicts.extend(inserts);
    evicts
}
