//! Seeded hash partitioning of the object space into the two cache layers and
//! the bipartite object/cache-node graph it induces.
//!
//! Every object is owned by exactly one upper-layer node (`h0`) and one
//! lower-layer node (`h1`). The two hash functions are the same keyed hash
//! with different seeds, reduced to a bucket with a multiply-shift so that no
//! modulo bias is introduced.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};

/// Fixed-width 16-byte object key. Identity is byte equality.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub [u8; 16]);

impl ObjectId {
    pub const LEN: usize = 16;

    /// Key for the object with popularity rank `index`. The rank is stored
    /// big-endian in the first eight bytes so byte order matches rank order.
    pub fn from_index(index: u64) -> Self {
        let mut bytes = [0u8; 16];
        bytes[..8].copy_from_slice(&index.to_be_bytes());
        ObjectId(bytes)
    }

    /// Inverse of [`ObjectId::from_index`] for keys built that way.
    pub fn index(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("8 bytes"))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({self})")
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// A cache node in one of the two layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRef {
    Upper(u32),
    Lower(u32),
}

impl NodeRef {
    /// Flat index into `A ∪ B`: upper nodes first, then lower nodes.
    pub fn flat(self, m_upper: u32) -> usize {
        match self {
            NodeRef::Upper(j) => j as usize,
            NodeRef::Lower(j) => (m_upper + j) as usize,
        }
    }

    pub fn from_flat(index: usize, m_upper: u32) -> Self {
        if index < m_upper as usize {
            NodeRef::Upper(index as u32)
        } else {
            NodeRef::Lower(index as u32 - m_upper)
        }
    }

    pub fn is_upper(self) -> bool {
        matches!(self, NodeRef::Upper(_))
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Upper(j) => write!(f, "a{j}"),
            NodeRef::Lower(j) => write!(f, "b{j}"),
        }
    }
}

/// Seeded 64-bit hash of the raw key bytes.
pub fn hash_key(seed: u64, key: &ObjectId) -> u64 {
    xxh3_64_with_seed(key.as_bytes(), seed)
}

/// Maps a 64-bit hash onto `[0, n)` by multiply-shift.
#[inline]
pub fn reduce(hash: u64, n: u32) -> u32 {
    ((hash as u128 * n as u128) >> 64) as u32
}

const SERVER_SLOT_TWEAK: u64 = 0x9e37_79b9_7f4a_7c15;

/// Virtual-bucket layout of one layer. A node with weight `w` owns `w`
/// buckets, which models a node `w` times faster than the base rate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    nodes: u32,
    buckets: Vec<u32>,
}

impl Layout {
    fn uniform(nodes: u32) -> Self {
        Layout {
            nodes,
            buckets: Vec::new(),
        }
    }

    fn weighted(weights: &[u32]) -> Result<Self> {
        if weights.is_empty() || weights.contains(&0) {
            return Err(Error::invalid(
                "node weights must be non-empty and positive",
            ));
        }
        let buckets = weights
            .iter()
            .enumerate()
            .flat_map(|(node, &w)| std::iter::repeat_n(node as u32, w as usize))
            .collect();
        Ok(Layout {
            nodes: weights.len() as u32,
            buckets,
        })
    }

    #[inline]
    fn pick(&self, hash: u64) -> u32 {
        if self.buckets.is_empty() {
            reduce(hash, self.nodes)
        } else {
            self.buckets[reduce(hash, self.buckets.len() as u32) as usize]
        }
    }
}

/// The pair of independent hash functions `h0` (upper layer) and `h1`
/// (lower layer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitioner {
    seed0: u64,
    seed1: u64,
    upper: Layout,
    lower: Layout,
}

impl Partitioner {
    pub fn new(seed0: u64, seed1: u64, m_upper: u32, m_lower: u32) -> Result<Self> {
        if seed0 == seed1 {
            return Err(Error::invalid("h0 and h1 need distinct seeds"));
        }
        if m_upper == 0 || m_lower == 0 {
            return Err(Error::invalid("each layer needs at least one node"));
        }
        Ok(Partitioner {
            seed0,
            seed1,
            upper: Layout::uniform(m_upper),
            lower: Layout::uniform(m_lower),
        })
    }

    /// Partitioner over nodes of nonuniform throughput: node `i` of a layer
    /// with weight `w_i` is split into `w_i` virtual buckets.
    pub fn weighted(seed0: u64, seed1: u64, upper: &[u32], lower: &[u32]) -> Result<Self> {
        if seed0 == seed1 {
            return Err(Error::invalid("h0 and h1 need distinct seeds"));
        }
        Ok(Partitioner {
            seed0,
            seed1,
            upper: Layout::weighted(upper)?,
            lower: Layout::weighted(lower)?,
        })
    }

    pub fn seeds(&self) -> (u64, u64) {
        (self.seed0, self.seed1)
    }

    pub fn m_upper(&self) -> u32 {
        self.upper.nodes
    }

    pub fn m_lower(&self) -> u32 {
        self.lower.nodes
    }

    #[inline]
    pub fn h0(&self, key: &ObjectId) -> u32 {
        self.upper.pick(hash_key(self.seed0, key))
    }

    #[inline]
    pub fn h1(&self, key: &ObjectId) -> u32 {
        self.lower.pick(hash_key(self.seed1, key))
    }

    /// `(h0(key), h1(key))`.
    #[inline]
    pub fn locate(&self, key: &ObjectId) -> (u32, u32) {
        (self.h0(key), self.h1(key))
    }

    /// Single hash over `A ∪ B` used by the one-hash baseline.
    pub fn single(&self, key: &ObjectId) -> NodeRef {
        let total = self.upper.nodes + self.lower.nodes;
        NodeRef::from_flat(
            reduce(hash_key(self.seed0, key), total) as usize,
            self.upper.nodes,
        )
    }

    /// Slot of the key's home server inside its lower-layer cluster.
    pub fn server_slot(&self, key: &ObjectId, servers_per_cluster: u32) -> u32 {
        reduce(
            hash_key(self.seed1 ^ SERVER_SLOT_TWEAK, key),
            servers_per_cluster,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphMode {
    TwoHash,
    SingleHash,
}

/// Bipartite graph `G = (U, V, E)` with objects on the left and the cache
/// nodes `A ∪ B` (flat-indexed, upper first) on the right.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    mode: GraphMode,
    m_upper: u32,
    m_lower: u32,
    objects: Vec<ObjectId>,
    index: HashMap<ObjectId, usize>,
    object_adj: Vec<Vec<usize>>,
    node_adj: Vec<Vec<usize>>,
}

impl BipartiteGraph {
    fn empty(mode: GraphMode, m_upper: u32, m_lower: u32) -> Self {
        BipartiteGraph {
            mode,
            m_upper,
            m_lower,
            objects: Vec::new(),
            index: HashMap::new(),
            object_adj: Vec::new(),
            node_adj: vec![Vec::new(); (m_upper + m_lower) as usize],
        }
    }

    fn push(&mut self, key: ObjectId, nodes: Vec<usize>) -> Result<()> {
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        let i = self.objects.len();
        for &v in &nodes {
            if v >= self.node_adj.len() {
                return Err(Error::invalid(format!("node index {v} out of range")));
            }
            self.node_adj[v].push(i);
        }
        self.index.insert(key, i);
        self.objects.push(key);
        self.object_adj.push(nodes);
        Ok(())
    }

    /// Graph with one edge per object into each layer.
    pub fn build(p: &Partitioner, objects: &[ObjectId]) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::invalid("object list is empty"));
        }
        let mut g = Self::empty(GraphMode::TwoHash, p.m_upper(), p.m_lower());
        for key in objects {
            let (a, b) = p.locate(key);
            g.push(*key, vec![a as usize, (p.m_upper() + b) as usize])?;
        }
        Ok(g)
    }

    /// Degree-1 graph of the single-hash baseline.
    pub fn build_single_hash(p: &Partitioner, objects: &[ObjectId]) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::invalid("object list is empty"));
        }
        let mut g = Self::empty(GraphMode::SingleHash, p.m_upper(), p.m_lower());
        for key in objects {
            g.push(*key, vec![p.single(key).flat(p.m_upper())])?;
        }
        Ok(g)
    }

    /// Graph from explicit `(upper, lower)` pairs; object `i` gets key
    /// `ObjectId::from_index(i)`. An empty pair list gives an empty graph.
    pub fn from_pairs(m_upper: u32, m_lower: u32, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut g = Self::empty(GraphMode::TwoHash, m_upper, m_lower);
        for (i, &(a, b)) in pairs.iter().enumerate() {
            if a >= m_upper || b >= m_lower {
                return Err(Error::invalid(format!("pair ({a}, {b}) out of range")));
            }
            g.push(
                ObjectId::from_index(i as u64),
                vec![a as usize, (m_upper + b) as usize],
            )?;
        }
        Ok(g)
    }

    /// Graph from arbitrary adjacency lists over flat node indices.
    pub fn from_adjacency(m_upper: u32, m_lower: u32, adjacency: &[Vec<usize>]) -> Result<Self> {
        let keys: Vec<ObjectId> = (0..adjacency.len() as u64)
            .map(ObjectId::from_index)
            .collect();
        Self::from_keyed_adjacency(m_upper, m_lower, &keys, adjacency)
    }

    pub fn from_keyed_adjacency(
        m_upper: u32,
        m_lower: u32,
        keys: &[ObjectId],
        adjacency: &[Vec<usize>],
    ) -> Result<Self> {
        if keys.len() != adjacency.len() {
            return Err(Error::invalid("key list and adjacency differ in length"));
        }
        let mut g = Self::empty(GraphMode::TwoHash, m_upper, m_lower);
        for (key, nodes) in keys.iter().zip(adjacency) {
            let mut nodes = nodes.clone();
            nodes.sort_unstable();
            nodes.dedup();
            g.push(*key, nodes)?;
        }
        Ok(g)
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn m_upper(&self) -> u32 {
        self.m_upper
    }

    pub fn m_lower(&self) -> u32 {
        self.m_lower
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_adj.len()
    }

    pub fn objects(&self) -> &[ObjectId] {
        &self.objects
    }

    pub fn object_index(&self, key: &ObjectId) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Flat node indices adjacent to object `i`.
    pub fn object_neighbors(&self, i: usize) -> &[usize] {
        &self.object_adj[i]
    }

    /// Objects adjacent to flat node `v`.
    pub fn node_neighbors(&self, v: usize) -> &[usize] {
        &self.node_adj[v]
    }

    /// All edges as `(object index, flat node index)`, in object order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.object_adj
            .iter()
            .enumerate()
            .flat_map(|(i, vs)| vs.iter().map(move |&v| (i, v)))
    }

    pub fn num_edges(&self) -> usize {
        self.object_adj.iter().map(Vec::len).sum()
    }

    pub fn node_ref(&self, v: usize) -> NodeRef {
        NodeRef::from_flat(v, self.m_upper)
    }

    /// `Γ(S)`: the union of the cache nodes of every object in `s`.
    pub fn neighborhood<'a, I>(&self, s: I) -> Result<BTreeSet<NodeRef>>
    where
        I: IntoIterator<Item = &'a ObjectId>,
    {
        let mut out = BTreeSet::new();
        for key in s {
            let i = self.object_index(key).ok_or(Error::NotFound(*key))?;
            out.extend(self.object_adj[i].iter().map(|&v| self.node_ref(v)));
        }
        Ok(out)
    }
}
