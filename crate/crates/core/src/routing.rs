//! Client-rack routing policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{NodeRef, ObjectId, Partitioner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum PolicyKind {
    /// Power-of-two-choices between the key's upper and lower node.
    Pot,
    /// Lower-layer (rack) caches only.
    PartitionOnly,
    /// Every upper node replicates the hot set.
    Replication,
    NoCache,
    /// One hash over both layers, no choice.
    SingleHashUniform,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::NoCache,
        PolicyKind::PartitionOnly,
        PolicyKind::Replication,
        PolicyKind::Pot,
        PolicyKind::SingleHashUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Pot => "distcache",
            PolicyKind::PartitionOnly => "cache-partition",
            PolicyKind::Replication => "cache-replication",
            PolicyKind::NoCache => "nocache",
            PolicyKind::SingleHashUniform => "single-hash",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown policy `{s}`")))
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::from_name(&s)
    }
}

impl From<PolicyKind> for &'static str {
    fn from(p: PolicyKind) -> Self {
        p.name()
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Last-known load of every cache node as carried by reply telemetry.
#[derive(Clone, Debug)]
pub struct LoadTable {
    loads: Vec<u64>,
    updated_at: Vec<f64>,
    /// Relative node capacities; loads are compared per unit capacity.
    weights: Option<Vec<u64>>,
}

impl LoadTable {
    pub fn new(nodes: usize) -> Self {
        LoadTable {
            loads: vec![0; nodes],
            updated_at: vec![0.0; nodes],
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<u64>) -> Self {
        assert_eq!(weights.len(), self.loads.len());
        self.weights = Some(weights);
        self
    }

    pub fn load(&self, node: usize) -> u64 {
        self.loads[node]
    }

    pub fn updated_at(&self, node: usize) -> f64 {
        self.updated_at[node]
    }

    /// Overwrites every stamped entry; the last reply to arrive wins.
    pub fn absorb_telemetry(&mut self, stamps: &[(u16, u32)], now: f64) {
        for &(node, load) in stamps {
            if let Some(slot) = self.loads.get_mut(node as usize) {
                *slot = load as u64;
                self.updated_at[node as usize] = now;
            }
        }
    }

    fn compare(&self, a: usize, b: usize) -> std::cmp::Ordering {
        match &self.weights {
            None => self.loads[a].cmp(&self.loads[b]),
            Some(w) => {
                let lhs = self.loads[a] as u128 * w[b] as u128;
                let rhs = self.loads[b] as u128 * w[a] as u128;
                lhs.cmp(&rhs)
            }
        }
    }
}

/// Where a key is currently cached, per layer.
pub trait HotSetView {
    fn upper(&self, key: &ObjectId) -> Option<u32>;
    fn lower(&self, key: &ObjectId) -> Option<u32>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Destination {
    Cache(NodeRef),
    /// Home storage server, reached through spine `via`.
    Server {
        rack: u32,
        server: u32,
        via: u32,
    },
}

#[derive(Clone, Debug)]
pub struct Router {
    kind: PolicyKind,
    partitioner: Partitioner,
    servers_per_rack: u32,
    spines: Vec<u32>,
    rng: ChaCha8Rng,
}

impl Router {
    pub fn new(
        kind: PolicyKind,
        partitioner: Partitioner,
        servers_per_rack: u32,
        seed: u64,
    ) -> Result<Self> {
        if servers_per_rack == 0 {
            return Err(Error::invalid("servers per rack must be at least 1"));
        }
        Ok(Router {
            kind,
            spines: (0..partitioner.m_upper()).collect(),
            partitioner,
            servers_per_rack,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn partitioner(&self) -> &Partitioner {
        &self.partitioner
    }

    /// Restricts pass-through and replica choices to `spines`.
    pub fn set_spines(&mut self, spines: Vec<u32>) {
        assert!(!spines.is_empty(), "at least one spine must remain");
        self.spines = spines;
    }

    pub fn spines(&self) -> &[u32] {
        &self.spines
    }

    fn random_spine(&mut self) -> u32 {
        self.spines[self.rng.random_range(0..self.spines.len())]
    }

    /// Rack and global index of the key's home server.
    pub fn home(&self, key: &ObjectId) -> (u32, u32) {
        let rack = self.partitioner.h1(key);
        let slot = self.partitioner.server_slot(key, self.servers_per_rack);
        (rack, rack * self.servers_per_rack + slot)
    }

    fn via_server(&mut self, key: &ObjectId) -> Destination {
        let (rack, server) = self.home(key);
        Destination::Server {
            rack,
            server,
            via: self.random_spine(),
        }
    }

    pub fn route_get(
        &mut self,
        table: &LoadTable,
        key: &ObjectId,
        hot: &impl HotSetView,
    ) -> Destination {
        let m0 = self.partitioner.m_upper();
        match self.kind {
            PolicyKind::NoCache => self.via_server(key),
            PolicyKind::PartitionOnly => match hot.lower(key) {
                Some(b) => Destination::Cache(NodeRef::Lower(b)),
                None => self.via_server(key),
            },
            PolicyKind::Replication => match hot.upper(key) {
                Some(_) => {
                    let a = self.random_spine();
                    Destination::Cache(NodeRef::Upper(a))
                }
                None => self.via_server(key),
            },
            PolicyKind::SingleHashUniform => {
                let node = self.partitioner.single(key);
                let cached = match node {
                    NodeRef::Upper(a) => hot.upper(key) == Some(a),
                    NodeRef::Lower(b) => hot.lower(key) == Some(b),
                };
                if cached {
                    Destination::Cache(node)
                } else {
                    self.via_server(key)
                }
            }
            PolicyKind::Pot => match (hot.upper(key), hot.lower(key)) {
                (Some(a), Some(b)) => {
                    let ua = NodeRef::Upper(a).flat(m0);
                    let lb = NodeRef::Lower(b).flat(m0);
                    let pick_upper = match table.compare(ua, lb) {
                        std::cmp::Ordering::Less => true,
                        std::cmp::Ordering::Greater => false,
                        std::cmp::Ordering::Equal => self.rng.random_bool(0.5),
                    };
                    Destination::Cache(if pick_upper {
                        NodeRef::Upper(a)
                    } else {
                        NodeRef::Lower(b)
                    })
                }
                (Some(a), None) => Destination::Cache(NodeRef::Upper(a)),
                (None, Some(b)) => Destination::Cache(NodeRef::Lower(b)),
                (None, None) => self.via_server(key),
            },
        }
    }

    /// Writes always go to the key's home server.
    pub fn route_set(&mut self, key: &ObjectId) -> Destination {
        self.via_server(key)
    }
}
