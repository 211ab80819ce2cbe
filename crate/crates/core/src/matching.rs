//! Feasibility oracle for fractional perfect matchings.
//!
//! A matching splits each object's query rate across its cache nodes so
//! that every object is fully served and no node exceeds its capacity.
//! Feasibility is decided by an exact max-flow over rates scaled to
//! integers with denominator [`SCALE`].

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hashing::{BipartiteGraph, ObjectId, Partitioner};
use crate::workload::QueryDistribution;

/// Rates and capacities are stored as multiples of `1 / SCALE`.
pub const SCALE: f64 = 1_000_000.0;

/// Largest node count accepted by the exhaustive intensity evaluation.
pub const EXHAUSTIVE_LIMIT: usize = 24;

fn to_scaled(x: f64) -> u64 {
    (x * SCALE).round() as u64
}

fn from_scaled(x: u64) -> f64 {
    x as f64 / SCALE
}

#[derive(Clone, Debug)]
pub struct MatchingInstance {
    graph: BipartiteGraph,
    rates: Vec<u64>,
    capacities: Vec<u64>,
}

impl MatchingInstance {
    /// `rates[i]` is object `i`'s query rate, `capacities[v]` the rate of
    /// flat node `v`, both in queries per second.
    pub fn new(graph: BipartiteGraph, rates: &[f64], capacities: &[f64]) -> Result<Self> {
        if rates.len() != graph.num_objects() {
            return Err(Error::invalid(format!(
                "{} rates for {} objects",
                rates.len(),
                graph.num_objects()
            )));
        }
        if capacities.len() != graph.num_nodes() {
            return Err(Error::invalid(format!(
                "{} capacities for {} nodes",
                capacities.len(),
                graph.num_nodes()
            )));
        }
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("rates must be finite and non-negative"));
        }
        if capacities.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("capacities must be finite and positive"));
        }
        Ok(MatchingInstance {
            rates: rates.iter().map(|&r| to_scaled(r)).collect(),
            capacities: capacities.iter().map(|&c| to_scaled(c)).collect(),
            graph,
        })
    }

    pub fn uniform(graph: BipartiteGraph, rates: &[f64], capacity: f64) -> Result<Self> {
        let caps = vec![capacity; graph.num_nodes()];
        Self::new(graph, rates, &caps)
    }

    /// Instance over the objects of `d`, placed by `p`, with rates `p_i * R`.
    pub fn from_distribution(
        p: &Partitioner,
        d: &QueryDistribution,
        capacity: f64,
    ) -> Result<Self> {
        let keys: Vec<ObjectId> = (0..d.len()).map(|i| d.key(i)).collect();
        let graph = BipartiteGraph::build(p, &keys)?;
        Self::uniform(graph, &d.rates(), capacity)
    }

    pub fn graph(&self) -> &BipartiteGraph {
        &self.graph
    }

    pub fn rate(&self, i: usize) -> f64 {
        from_scaled(self.rates[i])
    }

    pub fn capacity(&self, v: usize) -> f64 {
        from_scaled(self.capacities[v])
    }

    pub fn scaled_rates(&self) -> &[u64] {
        &self.rates
    }

    pub fn scaled_capacities(&self) -> &[u64] {
        &self.capacities
    }

    pub fn total_rate(&self) -> f64 {
        from_scaled(self.rates.iter().sum())
    }

    pub fn total_capacity(&self) -> f64 {
        from_scaled(self.capacities.iter().sum())
    }
}

/// Set of objects whose total rate exceeds the capacity of their
/// neighborhood; proves infeasibility.
#[derive(Clone, Debug, PartialEq)]
pub struct CutWitness {
    pub objects: Vec<usize>,
    pub nodes: Vec<usize>,
    pub demand: f64,
    pub capacity: f64,
}

#[derive(Clone, Debug)]
pub struct MatchingAssignment {
    pub feasible: bool,
    /// Max-flow value in queries per second.
    pub flow: f64,
    pub demand: f64,
    /// `(object, flat node, scaled weight)` for every edge carrying flow.
    weights: Vec<(usize, usize, u64)>,
    pub witness: Option<CutWitness>,
}

impl MatchingAssignment {
    pub fn weights(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights.iter().map(|&(i, v, w)| (i, v, from_scaled(w)))
    }

    pub fn scaled_weights(&self) -> &[(usize, usize, u64)] {
        &self.weights
    }
}

struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<u64>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        FlowNetwork {
            adj: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap: u64) -> usize {
        let e = self.to.len();
        self.adj[u].push(e);
        self.to.push(v);
        self.cap.push(cap);
        self.adj[v].push(e + 1);
        self.to.push(u);
        self.cap.push(0);
        e
    }

    fn levels(&self, s: usize) -> Vec<u32> {
        let mut level = vec![u32::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e];
                if self.cap[e] > 0 && level[v] == u32::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    fn augment(
        &mut self,
        u: usize,
        t: usize,
        limit: u64,
        level: &[u32],
        iter: &mut [usize],
    ) -> u64 {
        if u == t {
            return limit;
        }
        while iter[u] < self.adj[u].len() {
            let e = self.adj[u][iter[u]];
            let v = self.to[e];
            if self.cap[e] > 0 && level[v] == level[u] + 1 {
                let pushed = self.augment(v, t, limit.min(self.cap[e]), level, iter);
                if pushed > 0 {
                    self.cap[e] -= pushed;
                    self.cap[e ^ 1] += pushed;
                    return pushed;
                }
            }
            iter[u] += 1;
        }
        0
    }

    /// Dinic's algorithm.
    fn max_flow(&mut self, s: usize, t: usize) -> u64 {
        let mut total = 0;
        loop {
            let level = self.levels(s);
            if level[t] == u32::MAX {
                return total;
            }
            let mut iter = vec![0; self.adj.len()];
            loop {
                let pushed = self.augment(s, t, u64::MAX, &level, &mut iter);
                if pushed == 0 {
                    break;
                }
                total += pushed;
            }
        }
    }
}

/// Decides whether a perfect matching exists and returns one if so.
pub fn solve_matching(inst: &MatchingInstance) -> MatchingAssignment {
    let g = &inst.graph;
    let (k, n) = (g.num_objects(), g.num_nodes());
    let source = 0;
    let object = |i: usize| 1 + i;
    let node = |v: usize| 1 + k + v;
    let sink = 1 + k + n;

    let mut net = FlowNetwork::new(k + n + 2);
    for (i, &r) in inst.rates.iter().enumerate() {
        net.add_edge(source, object(i), r);
    }
    let mut edge_ids = Vec::with_capacity(g.num_edges());
    for (i, v) in g.edges() {
        edge_ids.push((i, v, net.add_edge(object(i), node(v), inst.capacities[v])));
    }
    for (v, &c) in inst.capacities.iter().enumerate() {
        net.add_edge(node(v), sink, c);
    }

    let flow = net.max_flow(source, sink);
    let demand: u64 = inst.rates.iter().sum();
    let feasible = flow == demand;
    let weights = edge_ids
        .iter()
        .filter_map(|&(i, v, e)| {
            let w = net.cap[e ^ 1];
            (w > 0).then_some((i, v, w))
        })
        .collect();

    let witness = (!feasible).then(|| {
        let level = net.levels(source);
        let objects: Vec<usize> = (0..k).filter(|&i| level[object(i)] != u32::MAX).collect();
        let mut nodes: Vec<usize> = objects
            .iter()
            .flat_map(|&i| g.object_neighbors(i).iter().copied())
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        CutWitness {
            demand: from_scaled(objects.iter().map(|&i| inst.rates[i]).sum()),
            capacity: from_scaled(nodes.iter().map(|&v| inst.capacities[v]).sum()),
            objects,
            nodes,
        }
    });

    MatchingAssignment {
        feasible,
        flow: from_scaled(flow),
        demand: from_scaled(demand),
        weights,
        witness,
    }
}

/// Checks both matching conditions exactly on the scaled integers: every
/// object's weights sum to its rate and no node carries more than its
/// capacity. Returns a description of each violation.
pub fn verify_assignment(inst: &MatchingInstance, a: &MatchingAssignment) -> Vec<String> {
    let g = &inst.graph;
    let mut problems = Vec::new();
    let mut per_object = vec![0u64; g.num_objects()];
    let mut per_node = vec![0u64; g.num_nodes()];
    for &(i, v, w) in &a.weights {
        if i >= g.num_objects() || !g.object_neighbors(i).contains(&v) {
            problems.push(format!("weight on non-edge ({i}, {v})"));
            continue;
        }
        if w > inst.capacities[v] {
            problems.push(format!("weight {w} on ({i}, {v}) exceeds node capacity"));
        }
        per_object[i] += w;
        per_node[v] += w;
    }
    for (i, (&got, &want)) in per_object.iter().zip(&inst.rates).enumerate() {
        if got != want {
            problems.push(format!("object {i} receives {got}, needs {want}"));
        }
    }
    for (v, (&got, &cap)) in per_node.iter().zip(&inst.capacities).enumerate() {
        if got > cap {
            problems.push(format!("node {v} carries {got}, capacity {cap}"));
        }
    }
    problems
}

/// Outcome of the expansion check `|Γ(S)| ≥ |S|` for all object sets `S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expansion {
    pub holds: bool,
    /// A deficient object set when the property fails.
    pub witness: Option<Vec<usize>>,
}

/// Unweighted matching saturating every object exists iff the expansion
/// property holds; a failed search yields the deficient set.
pub fn check_expansion(g: &BipartiteGraph) -> Expansion {
    let k = g.num_objects();
    let mut node_match: Vec<Option<usize>> = vec![None; g.num_nodes()];
    let mut object_match: Vec<Option<usize>> = vec![None; k];

    fn try_augment(
        g: &BipartiteGraph,
        i: usize,
        seen: &mut [bool],
        node_match: &mut [Option<usize>],
        object_match: &mut [Option<usize>],
    ) -> bool {
        for &v in g.object_neighbors(i) {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            let free = match node_match[v] {
                None => true,
                Some(j) => try_augment(g, j, seen, node_match, object_match),
            };
            if free {
                node_match[v] = Some(i);
                object_match[i] = Some(v);
                return true;
            }
        }
        false
    }

    for i in 0..k {
        let mut seen = vec![false; g.num_nodes()];
        if !try_augment(g, i, &mut seen, &mut node_match, &mut object_match) {
            // Objects reachable from `i` by alternating paths: their
            // neighborhood is fully matched back into the set minus `i`.
            let mut in_set = vec![false; k];
            let mut visited = vec![false; g.num_nodes()];
            in_set[i] = true;
            let mut queue = VecDeque::from([i]);
            while let Some(u) = queue.pop_front() {
                for &v in g.object_neighbors(u) {
                    if visited[v] {
                        continue;
                    }
                    visited[v] = true;
                    if let Some(j) = node_match[v] {
                        if !in_set[j] {
                            in_set[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
            let witness = (0..k).filter(|&j| in_set[j]).collect();
            return Expansion {
                holds: false,
                witness: Some(witness),
            };
        }
    }
    Expansion {
        holds: true,
        witness: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetIntensity {
    /// Flat node indices of `Q`.
    pub nodes: Vec<usize>,
    /// Sum of `λ_S` over object node-sets `S ⊆ Q`.
    pub lambda: f64,
    /// Total service rate of `Q`.
    pub mu: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityReport {
    /// One entry per distinct object node-set carrying traffic, evaluated
    /// at `Q = S`, followed by the maximizing set and any requested sets.
    pub entries: Vec<SubsetIntensity>,
    pub rho_max: f64,
    pub argmax: Vec<usize>,
    /// Node set of each object.
    pub node_sets: Vec<Vec<usize>>,
}

/// Objects with at most one upper and one lower node, reduced to
/// `(upper, lower)` options plus aggregate rate per distinct node-set.
struct PairLoads {
    m0: usize,
    m1: usize,
    /// `upper_only[a]`, `lower_only[b]`, `pair[a][b]` in scaled units.
    upper_only: Vec<u64>,
    lower_only: Vec<u64>,
    pair: Vec<Vec<u64>>,
}

impl PairLoads {
    fn new(inst: &MatchingInstance) -> Result<Self> {
        let g = &inst.graph;
        let (m0, m1) = (g.m_upper() as usize, g.m_lower() as usize);
        let mut loads = PairLoads {
            m0,
            m1,
            upper_only: vec![0; m0],
            lower_only: vec![0; m1],
            pair: vec![vec![0; m1]; m0],
        };
        for i in 0..g.num_objects() {
            let r = inst.rates[i];
            let ups: Vec<usize> = g
                .object_neighbors(i)
                .iter()
                .copied()
                .filter(|&v| v < m0)
                .collect();
            let lows: Vec<usize> = g
                .object_neighbors(i)
                .iter()
                .copied()
                .filter(|&v| v >= m0)
                .map(|v| v - m0)
                .collect();
            match (ups.as_slice(), lows.as_slice()) {
                ([a], [b]) => loads.pair[*a][*b] += r,
                ([a], []) => loads.upper_only[*a] += r,
                ([], [b]) => loads.lower_only[*b] += r,
                ([], []) => {}
                _ => {
                    return Err(Error::invalid(
                        "traffic intensity needs at most one node per layer for each object",
                    ))
                }
            }
        }
        Ok(loads)
    }

    fn numerator(&self, nodes: &[usize]) -> u64 {
        let mut up = vec![false; self.m0];
        let mut low = vec![false; self.m1];
        for &v in nodes {
            if v < self.m0 {
                up[v] = true;
            } else {
                low[v - self.m0] = true;
            }
        }
        let mut total = 0;
        for a in (0..self.m0).filter(|&a| up[a]) {
            total += self.upper_only[a];
            for b in (0..self.m1).filter(|&b| low[b]) {
                total += self.pair[a][b];
            }
        }
        for b in (0..self.m1).filter(|&b| low[b]) {
            total += self.lower_only[b];
        }
        total
    }
}

fn subset_entry(inst: &MatchingInstance, loads: &PairLoads, nodes: Vec<usize>) -> SubsetIntensity {
    let num = loads.numerator(&nodes);
    let den: u64 = nodes.iter().map(|&v| inst.capacities[v]).sum();
    SubsetIntensity {
        lambda: from_scaled(num),
        mu: from_scaled(den),
        rho: if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        },
        nodes,
    }
}

fn base_entries(inst: &MatchingInstance, loads: &PairLoads) -> Vec<SubsetIntensity> {
    let mut sets: Vec<Vec<usize>> = (0..inst.graph.num_objects())
        .filter(|&i| inst.rates[i] > 0 && !inst.graph.object_neighbors(i).is_empty())
        .map(|i| inst.graph.object_neighbors(i).to_vec())
        .collect();
    sets.sort();
    sets.dedup();
    sets.into_iter()
        .map(|s| subset_entry(inst, loads, s))
        .collect()
}

fn node_sets(g: &BipartiteGraph) -> Vec<Vec<usize>> {
    (0..g.num_objects())
        .map(|i| g.object_neighbors(i).to_vec())
        .collect()
}

/// Evaluates `ρ_Q` over every non-empty node subset `Q`.
pub fn traffic_intensity(inst: &MatchingInstance) -> Result<IntensityReport> {
    let n = inst.graph.num_nodes();
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            nodes: n,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let loads = PairLoads::new(inst)?;
    let (m0, m1) = (loads.m0, loads.m1);
    let caps = &inst.capacities;

    // Split Q into its upper part (outer loop) and lower part (inner,
    // built incrementally from the lowest set bit).
    let mut best: (u64, u64, u32, u32) = (0, 1, 0, 0);
    let mut lower_num = vec![0u64; 1 << m1];
    let mut lower_den = vec![0u64; 1 << m1];
    for qa in 0u32..(1 << m0) {
        let mut base_num = 0;
        let mut base_den = 0;
        let mut weight = loads.lower_only.clone();
        for a in (0..m0).filter(|&a| qa >> a & 1 == 1) {
            base_num += loads.upper_only[a];
            base_den += caps[a];
            for (b, w) in weight.iter_mut().enumerate() {
                *w += loads.pair[a][b];
            }
        }
        for qb in 0u32..(1 << m1) {
            if qb != 0 {
                let b = qb.trailing_zeros() as usize;
                let rest = (qb & (qb - 1)) as usize;
                lower_num[qb as usize] = lower_num[rest] + weight[b];
                lower_den[qb as usize] = lower_den[rest] + caps[m0 + b];
            }
            let num = base_num + lower_num[qb as usize];
            let den = base_den + lower_den[qb as usize];
            if den > 0 && (num as u128) * (best.1 as u128) > (best.0 as u128) * (den as u128) {
                best = (num, den, qa, qb);
            }
        }
    }

    let mut argmax: Vec<usize> = (0..m0).filter(|&a| best.2 >> a & 1 == 1).collect();
    argmax.extend((0..m1).filter(|&b| best.3 >> b & 1 == 1).map(|b| m0 + b));
    let mut entries = base_entries(inst, &loads);
    if !argmax.is_empty() {
        entries.push(subset_entry(inst, &loads, argmax.clone()));
    }
    Ok(IntensityReport {
        entries,
        rho_max: best.0 as f64 / best.1 as f64,
        argmax,
        node_sets: node_sets(&inst.graph),
    })
}

/// Evaluates `ρ_Q` only on the object node-sets and the supplied `sets`.
pub fn traffic_intensity_sampled(
    inst: &MatchingInstance,
    sets: &[Vec<usize>],
) -> Result<IntensityReport> {
    let loads = PairLoads::new(inst)?;
    let mut entries = base_entries(inst, &loads);
    for s in sets {
        let mut s = s.clone();
        s.sort_unstable();
        s.dedup();
        if s.iter().any(|&v| v >= inst.graph.num_nodes()) {
            return Err(Error::invalid("subset names a node outside the graph"));
        }
        entries.push(subset_entry(inst, &loads, s));
    }
    let (rho_max, argmax) = entries.iter().fold((0.0, Vec::new()), |acc, e| {
        if e.rho > acc.0 {
            (e.rho, e.nodes.clone())
        } else {
            acc
        }
    });
    Ok(IntensityReport {
        entries,
        rho_max,
        argmax,
        node_sets: node_sets(&inst.graph),
    })
}

/// Parses the line-oriented instance format:
///
/// ```text
/// # m0 m1 k capacity
/// 3 3 6 1
/// # optional per-node capacities, upper nodes first
/// capacities 1 1 1 1 1 1
/// # index upper lower rate   ('-' for no node in that layer)
/// 0 1 0 1
/// ```
pub fn parse_instance(text: &str) -> Result<MatchingInstance> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(parse_err(
            hline,
            format!("header needs `m0 m1 k capacity`, got `{header}`"),
        ));
    }
    let count = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| parse_err(hline, format!("bad {what} `{s}`")))
    };
    let (m0, m1, k) = (
        count(fields[0], "m0")?,
        count(fields[1], "m1")?,
        count(fields[2], "k")?,
    );
    let capacity: f64 = fields[3]
        .parse()
        .map_err(|_| parse_err(hline, format!("bad capacity `{}`", fields[3])))?;
    if m0 + m1 == 0 {
        return Err(parse_err(hline, "instance has no nodes".into()));
    }
    let n = (m0 + m1) as usize;
    let mut capacities = vec![capacity; n];
    let mut keys = Vec::new();
    let mut adjacency = Vec::new();
    let mut rates = Vec::new();

    for (line, text) in lines {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields[0] == "capacities" {
            if fields.len() != n + 1 || !keys.is_empty() {
                return Err(parse_err(
                    line,
                    format!("expected {n} capacities before object rows"),
                ));
            }
            for (slot, f) in capacities.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad capacity `{f}`")))?;
            }
            continue;
        }
        if fields.len() != 4 {
            return Err(parse_err(
                line,
                format!("expected `index upper lower rate`, got `{text}`"),
            ));
        }
        let index: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad object index `{}`", fields[0])))?;
        let layer_node = |s: &str, limit: u32, offset: u32| -> Result<Option<usize>> {
            if s == "-" {
                return Ok(None);
            }
            match s.parse::<u32>() {
                Ok(j) if j < limit => Ok(Some((offset + j) as usize)),
                _ => Err(parse_err(
                    line,
                    format!("node `{s}` out of range 0..{limit}"),
                )),
            }
        };
        let mut nodes = Vec::new();
        nodes.extend(layer_node(fields[1], m0, 0)?);
        nodes.extend(layer_node(fields[2], m1, m0)?);
        let rate: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(line, format!("bad rate `{}`", fields[3])))?;
        keys.push(ObjectId::from_index(index));
        adjacency.push(nodes);
        rates.push(rate);
    }
    if keys.len() != k as usize {
        return Err(parse_err(
            hline,
            format!("header declares {k} objects, found {}", keys.len()),
        ));
    }
    let graph = BipartiteGraph::from_keyed_adjacency(m0, m1, &keys, &adjacency)?;
    MatchingInstance::new(graph, &rates, &capacities)
}

/// Inverse of [`parse_instance`].
pub fn format_instance(inst: &MatchingInstance) -> String {
    let g = &inst.graph;
    let (m0, m1) = (g.m_upper() as usize, g.m_lower());
    let mut out = String::new();
    let first = inst.capacity(0);
    let uniform = inst.capacities.iter().all(|&c| c == inst.capacities[0]);
    writeln!(out, "# m0 m1 k capacity").unwrap();
    writeln!(out, "{} {} {} {}", m0, m1, g.num_objects(), first).unwrap();
    if !uniform {
        let caps: Vec<String> = (0..g.num_nodes())
            .map(|v| inst.capacity(v).to_string())
            .collect();
        writeln!(out, "capacities {}", caps.join(" ")).unwrap();
    }
    writeln!(out, "# index upper lower rate").unwrap();
    for i in 0..g.num_objects() {
        let ns = g.object_neighbors(i);
        let upper = ns
            .iter()
            .find(|&&v| v < m0)
            .map_or("-".into(), |v| v.to_string());
        let lower = ns
            .iter()
            .find(|&&v| v >= m0)
            .map_or("-".into(), |v| (v - m0).to_string());
        writeln!(
            out,
            "{} {} {} {}",
            g.objects()[i].index(),
            upper,
            lower,
            inst.rate(i)
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six unit-rate objects A-F over three upper and three lower nodes:
    /// A, B, C share lower node 0 and sit on distinct upper nodes.
    const FIG_PAIRS: [(u32, u32); 6] = [(1, 0), (0, 0), (2, 0), (0, 1), (1, 2), (2, 2)];

    fn fig_instance() -> MatchingInstance {
        let g = BipartiteGraph::from_pairs(3, 3, &FIG_PAIRS).unwrap();
        MatchingInstance::uniform(g, &[1.0; 6], 1.0).unwrap()
    }

    #[test]
    fn fig_instance_is_feasible() {
        let inst = fig_instance();
        let a = solve_matching(&inst);
        assert!(a.feasible);
        assert_eq!(a.flow, 6.0);
        assert!(verify_assignment(&inst, &a).is_empty());
        // With unit rates and unit capacities every node is saturated, and
        // A's whole rate sits on a single node.
        let a_nodes: Vec<_> = a.weights().filter(|w| w.0 == 0).collect();
        assert_eq!(a_nodes.len(), 1);
        assert_eq!(a_nodes[0].2, 1.0);
    }

    #[test]
    fn shared_pair_over_twice_capacity_is_infeasible() {
        let g = BipartiteGraph::from_pairs(2, 2, &[(1, 1); 5]).unwrap();
        let inst = MatchingInstance::uniform(g, &[1.0; 5], 2.0).unwrap();
        let a = solve_matching(&inst);
        assert!(!a.feasible);
        assert_eq!(a.flow, 4.0);
        let w = a.witness.unwrap();
        assert_eq!(w.objects, vec![0, 1, 2, 3, 4]);
        assert_eq!(w.nodes, vec![1, 3]);
        assert!(w.demand > w.capacity);
    }

    #[test]
    fn over_total_capacity_is_infeasible_not_an_error() {
        let g = BipartiteGraph::from_pairs(1, 1, &[(0, 0), (0, 0)]).unwrap();
        let inst = MatchingInstance::uniform(g, &[3.0, 3.0], 2.0).unwrap();
        let a = solve_matching(&inst);
        assert!(!a.feasible);
        assert!(a.flow <= inst.total_capacity());
    }

    #[test]
    fn malformed_instances_are_rejected() {
        let g = BipartiteGraph::from_pairs(1, 1, &[(0, 0)]).unwrap();
        assert!(MatchingInstance::uniform(g.clone(), &[1.0, 2.0], 1.0).is_err());
        assert!(MatchingInstance::uniform(g.clone(), &[-1.0], 1.0).is_err());
        assert!(MatchingInstance::uniform(g, &[1.0], 0.0).is_err());
    }

    #[test]
    fn fractional_rates_are_split_exactly() {
        let g = BipartiteGraph::from_pairs(1, 1, &[(0, 0), (0, 0), (0, 0)]).unwrap();
        let inst = MatchingInstance::uniform(g, &[0.7, 0.7, 0.6], 1.0).unwrap();
        let a = solve_matching(&inst);
        assert!(a.feasible);
        assert!(verify_assignment(&inst, &a).is_empty());
    }

    #[test]
    fn verifier_flags_broken_assignments() {
        let inst = fig_instance();
        let mut a = solve_matching(&inst);
        a.weights[0].2 += 1;
        assert!(!verify_assignment(&inst, &a).is_empty());
        let mut b = solve_matching(&inst);
        b.weights.push((0, 5, 1));
        assert!(verify_assignment(&inst, &b)
            .iter()
            .any(|p| p.contains("non-edge")));
    }

    /// Enumerates every integer split of each object's rate over its nodes.
    fn brute_force_feasible(adj: &[Vec<usize>], rates: &[u64], caps: &[u64]) -> bool {
        fn go(i: usize, adj: &[Vec<usize>], rates: &[u64], left: &mut [u64]) -> bool {
            if i == adj.len() {
                return true;
            }
            match adj[i].as_slice() {
                [] => rates[i] == 0 && go(i + 1, adj, rates, left),
                [v] => {
                    if left[*v] < rates[i] {
                        return false;
                    }
                    left[*v] -= rates[i];
                    let ok = go(i + 1, adj, rates, left);
                    left[*v] += rates[i];
                    ok
                }
                [u, v] => (0..=rates[i]).any(|x| {
                    let y = rates[i] - x;
                    if left[*u] < x || left[*v] < y {
                        return false;
                    }
                    left[*u] -= x;
                    left[*v] -= y;
                    let ok = go(i + 1, adj, rates, left);
                    left[*u] += x;
                    left[*v] += y;
                    ok
                }),
                _ => unreachable!(),
            }
        }
        go(0, adj, rates, &mut caps.to_vec())
    }

    #[test]
    fn small_random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let m0 = rng.random_range(1..=4u32);
            let m1 = rng.random_range(1..=4u32);
            let k = rng.random_range(1..=8usize);
            let adj: Vec<Vec<usize>> = (0..k)
                .map(|_| {
                    vec![
                        rng.random_range(0..m0) as usize,
                        (m0 + rng.random_range(0..m1)) as usize,
                    ]
                })
                .collect();
            let rates: Vec<u64> = (0..k).map(|_| rng.random_range(0..=4)).collect();
            let caps: Vec<u64> = (0..m0 + m1).map(|_| rng.random_range(1..=4)).collect();
            let g = BipartiteGraph::from_adjacency(m0, m1, &adj).unwrap();
            let rf: Vec<f64> = rates.iter().map(|&r| r as f64).collect();
            let cf: Vec<f64> = caps.iter().map(|&c| c as f64).collect();
            let inst = MatchingInstance::new(g, &rf, &cf).unwrap();
            let a = solve_matching(&inst);
            assert_eq!(a.feasible, brute_force_feasible(&adj, &rates, &caps));
            if a.feasible {
                assert!(verify_assignment(&inst, &a).is_empty());
            } else {
                let w = a.witness.unwrap();
                assert!(w.demand > w.capacity);
            }
        }
    }

    fn brute_force_expansion(g: &BipartiteGraph) -> bool {
        let k = g.num_objects();
        (1u32..(1 << k)).all(|s| {
            let mut nodes = std::collections::BTreeSet::<usize>::new();
            for i in (0..k).filter(|&i| s >> i & 1 == 1) {
                nodes.extend(g.object_neighbors(i).iter().copied());
            }
            nodes.len() >= s.count_ones() as usize
        })
    }

    #[test]
    fn expansion_examples() {
        let g = BipartiteGraph::from_pairs(2, 2, &[(0, 1)]).unwrap();
        assert!(check_expansion(&g).holds);
        let g = BipartiteGraph::from_pairs(2, 2, &[(1, 0), (1, 0), (1, 0)]).unwrap();
        let e = check_expansion(&g);
        assert!(!e.holds);
        assert_eq!(e.witness, Some(vec![0, 1, 2]));
        assert!(check_expansion(fig_instance().graph()).holds);
    }

    #[test]
    fn expansion_matches_subset_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let m0 = rng.random_range(1..=5u32);
            let m1 = rng.random_range(1..=5u32);
            let k = rng.random_range(1..=12usize);
            let pairs: Vec<(u32, u32)> = (0..k)
                .map(|_| (rng.random_range(0..m0), rng.random_range(0..m1)))
                .collect();
            let g = BipartiteGraph::from_pairs(m0, m1, &pairs).unwrap();
            let e = check_expansion(&g);
            assert_eq!(e.holds, brute_force_expansion(&g));
            if let Some(w) = e.witness {
                let nodes = g.neighborhood(w.iter().map(|&i| &g.objects()[i])).unwrap();
                assert!(nodes.len() < w.len());
            }
        }
    }

    #[test]
    fn intensity_examples() {
        let g = BipartiteGraph::from_pairs(2, 2, &[(0, 1)]).unwrap();
        let inst = MatchingInstance::uniform(g, &[3.0], 2.0).unwrap();
        let r = traffic_intensity(&inst).unwrap();
        assert_eq!(r.entries[0].nodes, vec![0, 3]);
        assert!((r.entries[0].rho - 3.0 / 4.0).abs() < 1e-12);
        assert!((r.rho_max - 0.75).abs() < 1e-12);

        let g = BipartiteGraph::from_pairs(2, 2, &[]).unwrap();
        let inst = MatchingInstance::uniform(g, &[], 1.0).unwrap();
        assert_eq!(traffic_intensity(&inst).unwrap().rho_max, 0.0);

        let r = traffic_intensity(&fig_instance()).unwrap();
        assert_eq!(r.rho_max, 1.0);
    }

    #[test]
    fn intensity_refuses_large_exhaustive_runs() {
        let g = BipartiteGraph::from_pairs(13, 12, &[(0, 0)]).unwrap();
        let inst = MatchingInstance::uniform(g, &[1.0], 1.0).unwrap();
        assert!(matches!(
            traffic_intensity(&inst),
            Err(Error::TooLarge { nodes: 25, .. })
        ));
        let r = traffic_intensity_sampled(&inst, &[vec![0, 13], (0..25).collect()]).unwrap();
        assert_eq!(r.entries.len(), 3);
        assert!((r.rho_max - 0.5).abs() < 1e-12);
    }

    /// Direct evaluation of every subset against the definition.
    fn brute_force_rho_max(inst: &MatchingInstance) -> f64 {
        let n = inst.graph().num_nodes();
        let mut best: f64 = 0.0;
        for q in 1u32..(1 << n) {
            let mu: f64 = (0..n)
                .filter(|&v| q >> v & 1 == 1)
                .map(|v| inst.capacity(v))
                .sum();
            let lambda: f64 = (0..inst.graph().num_objects())
                .filter(|&i| {
                    inst.graph()
                        .object_neighbors(i)
                        .iter()
                        .all(|&v| q >> v & 1 == 1)
                })
                .map(|i| inst.rate(i))
                .sum();
            best = best.max(lambda / mu);
        }
        best
    }

    #[test]
    fn feasible_instances_with_slack_have_rho_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 30 {
            let k = rng.random_range(1..=10usize);
            let pairs: Vec<(u32, u32)> = (0..k)
                .map(|_| (rng.random_range(0..4), rng.random_range(0..4)))
                .collect();
            let g = BipartiteGraph::from_pairs(4, 4, &pairs).unwrap();
            let rates: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.5)).collect();
            let eps = 0.1;
            // Feasible at capacity (1 - eps) means strict slack eps at 1.
            let tight = MatchingInstance::uniform(g.clone(), &rates, 1.0 - eps).unwrap();
            if !solve_matching(&tight).feasible {
                continue;
            }
            let inst = MatchingInstance::uniform(g, &rates, 1.0).unwrap();
            let r = traffic_intensity(&inst).unwrap();
            assert!(r.rho_max <= 1.0 - eps + 1e-6);
            assert!((r.rho_max - brute_force_rho_max(&inst)).abs() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn single_hash_intensity() {
        let p = Partitioner::new(3, 4, 2, 2).unwrap();
        let keys: Vec<ObjectId> = (0..6).map(ObjectId::from_index).collect();
        let g = BipartiteGraph::build_single_hash(&p, &keys).unwrap();
        let inst = MatchingInstance::uniform(g, &[1.0; 6], 2.0).unwrap();
        let r = traffic_intensity(&inst).unwrap();
        assert!((r.rho_max - brute_force_rho_max(&inst)).abs() < 1e-9);
    }

    #[test]
    fn instance_text_round_trip() {
        let inst = fig_instance();
        let text = format_instance(&inst);
        let back = parse_instance(&text).unwrap();
        assert_eq!(format_instance(&back), text);
        assert!(solve_matching(&back).feasible);

        let empty = parse_instance("2 2 0 1.5\n").unwrap();
        assert!(solve_matching(&empty).feasible);
        assert_eq!(traffic_intensity(&empty).unwrap().rho_max, 0.0);

        let nonuniform = "1 1 1 1\ncapacities 1 3\n7 0 - 0.5\n";
        let inst = parse_instance(nonuniform).unwrap();
        assert_eq!(inst.capacity(1), 3.0);
        assert_eq!(inst.graph().object_neighbors(0), &[0]);
        assert_eq!(
            parse_instance(&format_instance(&inst)).unwrap().capacity(1),
            3.0
        );
    }

    #[test]
    fn instance_parse_errors_name_the_line() {
        let bad = "3 3 1 1\n0 1 9 1\n";
        assert!(matches!(
            parse_instance(bad),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_instance("3 3\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_instance("1 1 2 1\n0 0 0 1\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_instance("1 1 1 1\n0 0 0 x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn flow_never_exceeds_demand_or_capacity(
            pairs in prop::collection::vec((0u32..3, 0u32..3), 1..10),
            rates in prop::collection::vec(0.0f64..3.0, 10),
            cap in 0.5f64..3.0,
        ) {
            let g = BipartiteGraph::from_pairs(3, 3, &pairs).unwrap();
            let inst = MatchingInstance::uniform(g, &rates[..pairs.len()], cap).unwrap();
            let a = solve_matching(&inst);
            prop_assert!(a.flow <= inst.total_rate().min(inst.total_capacity()) + 1e-9);
            if a.feasible {
                prop_assert!(verify_assignment(&inst, &a).is_empty());
            }
        }
    }
}
