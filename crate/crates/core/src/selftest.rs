//! Brute-force reference oracles and the equivalence checks run by
//! `distcache selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache_node::{CacheConfig, HeavyHitterDetector};
use crate::hashing::{BipartiteGraph, ObjectId};
use crate::matching::{check_expansion, solve_matching, verify_assignment, MatchingInstance};
use crate::workload::{zipf_probs, QueryStream, StreamConfig};

/// Small integer instance: per-object neighbor lists over flat node
/// indices, integer rates and capacities.
#[derive(Clone, Debug, PartialEq)]
pub struct IntInstance {
    pub m_upper: u32,
    pub m_lower: u32,
    pub adjacency: Vec<Vec<usize>>,
    pub rates: Vec<u64>,
    pub capacities: Vec<u64>,
}

impl IntInstance {
    /// Each object gets one upper node, one lower node, or both.
    pub fn random(
        rng: &mut impl Rng,
        max_objects: usize,
        max_nodes: u32,
        max_rate: u64,
        max_cap: u64,
    ) -> Self {
        let m_upper = rng.random_range(1..=max_nodes / 2);
        let m_lower = rng.random_range(1..=max_nodes - m_upper);
        let k = rng.random_range(0..=max_objects);
        let adjacency = (0..k)
            .map(|_| {
                let a = rng.random_range(0..m_upper) as usize;
                let b = (m_upper + rng.random_range(0..m_lower)) as usize;
                match rng.random_range(0..6) {
                    0 => vec![a],
                    1 => vec![b],
                    _ => vec![a, b],
                }
            })
            .collect();
        let n = (m_upper + m_lower) as usize;
        IntInstance {
            m_upper,
            m_lower,
            adjacency,
            rates: (0..k).map(|_| rng.random_range(1..=max_rate)).collect(),
            capacities: (0..n).map(|_| rng.random_range(1..=max_cap)).collect(),
        }
    }

    pub fn graph(&self) -> crate::Result<BipartiteGraph> {
        BipartiteGraph::from_adjacency(self.m_upper, self.m_lower, &self.adjacency)
    }

    pub fn to_instance(&self) -> crate::Result<MatchingInstance> {
        let rates: Vec<f64> = self.rates.iter().map(|&r| r as f64).collect();
        let caps: Vec<f64> = self.capacities.iter().map(|&c| c as f64).collect();
        MatchingInstance::new(self.graph()?, &rates, &caps)
    }
}

/// Feasibility by enumerating every integer split of every object's rate
/// over its nodes. Integral capacities make integral splits sufficient.
pub fn brute_force_feasible(inst: &IntInstance) -> bool {
    fn place(i: usize, inst: &IntInstance, load: &mut [u64]) -> bool {
        if i == inst.rates.len() {
            return true;
        }
        let adj = &inst.adjacency[i];
        let r = inst.rates[i];
        match adj.as_slice() {
            [v] => {
                if load[*v] + r > inst.capacities[*v] {
                    return false;
                }
                load[*v] += r;
                let ok = place(i + 1, inst, load);
                load[*v] -= r;
                ok
            }
            [u, v] => (0..=r).any(|x| {
                let (a, b) = (x, r - x);
                if load[*u] + a > inst.capacities[*u] || load[*v] + b > inst.capacities[*v] {
                    return false;
                }
                load[*u] += a;
                load[*v] += b;
                let ok = place(i + 1, inst, load);
                load[*u] -= a;
                load[*v] -= b;
                ok
            }),
            _ => unreachable!("objects have one or two nodes"),
        }
    }
    place(0, inst, &mut vec![0; inst.capacities.len()])
}

/// Hall's condition checked over all `2^k` object subsets.
pub fn brute_force_expansion(adjacency: &[Vec<usize>]) -> bool {
    let k = adjacency.len();
    assert!(k <= 24, "subset enumeration over {k} objects");
    (1u32..(1 << k)).all(|mask| {
        let mut nodes = 0u64;
        for (i, adj) in adjacency.iter().enumerate() {
            if mask & (1 << i) != 0 {
                for &v in adj {
                    nodes |= 1 << v;
                }
            }
        }
        nodes.count_ones() >= mask.count_ones()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Max-flow feasibility against split enumeration, with every feasible
/// assignment re-verified.
pub fn check_matching(seed: u64, instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut invalid = 0;
    let mut feasible = 0;
    for _ in 0..instances {
        let ii = IntInstance::random(&mut rng, 8, 8, 4, 6);
        let inst = ii.to_instance().expect("generated instance is well formed");
        let a = solve_matching(&inst);
        feasible += a.feasible as usize;
        if a.feasible != brute_force_feasible(&ii) {
            mismatches += 1;
        }
        if a.feasible && !verify_assignment(&inst, &a).is_empty() {
            invalid += 1;
        }
    }
    Check {
        name: "matching-vs-split-enumeration".into(),
        passed: mismatches == 0 && invalid == 0,
        detail: format!("{instances} instances, {feasible} feasible, {mismatches} disagreements, {invalid} bad assignments"),
    }
}

pub fn check_expansion_oracle(seed: u64, graphs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut holds = 0;
    for _ in 0..graphs {
        let ii = IntInstance::random(&mut rng, 16, 16, 1, 1);
        let g = ii.graph().expect("generated graph is well formed");
        let e = check_expansion(&g);
        holds += e.holds as usize;
        if e.holds != brute_force_expansion(&ii.adjacency) {
            mismatches += 1;
        }
    }
    Check {
        name: "expansion-vs-subset-enumeration".into(),
        passed: mismatches == 0,
        detail: format!("{graphs} graphs, {holds} expanding, {mismatches} disagreements"),
    }
}

/// Sketch estimates never undercount the exact per-epoch frequency.
pub fn check_sketch(seed: u64, queries: usize, epoch_len: usize) -> Check {
    let d = zipf_probs(100_000, 0.99).expect("valid zipf");
    let cfg = StreamConfig {
        seed,
        ..Default::default()
    };
    let stream = QueryStream::new(&d, cfg).expect("valid stream");
    let mut det = HeavyHitterDetector::new(0, &CacheConfig::default());
    let mut exact: std::collections::HashMap<ObjectId, u64> = Default::default();
    let mut under = 0;
    let mut checked = 0;
    for (n, q) in stream.take(queries).enumerate() {
        det.observe(&q.key, false);
        *exact.entry(q.key).or_default() += 1;
        if (n + 1) % epoch_len == 0 || n + 1 == queries {
            let mut keys: Vec<_> = exact.iter().collect();
            keys.sort();
            for (k, &c) in keys {
                checked += 1;
                if (det.estimate(k) as u64) < c.min(u16::MAX as u64) {
                    under += 1;
                }
            }
            exact.clear();
            det.rotate();
        }
    }
    Check {
        name: "sketch-never-undercounts".into(),
        passed: under == 0,
        detail: format!("{checked} (key, epoch) pairs, {under} undercounts"),
    }
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check_matching(seed, 500),
        check_expansion_oracle(seed, 200),
        check_sketch(seed, 200_000, 50_000),
    ]
}
