//! Desk-scale load-balancing probes: matching feasibility
//! of random two-layer placements, and queue stationarity under
//! power-of-two-choices versus single-hash placement.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{solve_matching, MatchingInstance};
use crate::routing::PolicyKind;
use crate::sim::{
    self, queue_stationarity_probe, ArrivalKind, HotSetMode, LoadSignal, ServiceMode, SimConfig,
    Topology,
};
use crate::workload::{cap_max_prob, zipf_probs, QueryDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Cache nodes per layer.
    pub nodes_per_layer: u32,
    /// Hot objects; `⌈m ln m⌉` when absent.
    pub objects: Option<u64>,
    pub skew: f64,
    /// Offered rate over one layer's aggregate capacity.
    pub utilization: f64,
    /// Queries per second of one cache node.
    pub cache_rate: f64,
    /// Clip object rates to half a node's capacity.
    pub cap_hottest: bool,
    /// Warn when the object count exceeds `m^beta`.
    pub beta_warning: f64,
    pub probe_horizon: f64,
    /// Queue length that marks a probe run as unstable.
    pub max_queue: u32,
    /// Single-hash probe: node capacity in units of one object's rate.
    pub uniform_capacity: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            nodes_per_layer: 32,
            objects: None,
            skew: 0.99,
            utilization: 0.8,
            cache_rate: 100.0,
            cap_hottest: true,
            beta_warning: 3.0,
            probe_horizon: 100.0,
            max_queue: 10_000,
            uniform_capacity: 4.0,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_layer < 2 {
            return Err(Error::Config(
                "theory probes need at least 2 nodes per layer".into(),
            ));
        }
        for (name, v) in [
            ("utilization", self.utilization),
            ("cache_rate", self.cache_rate),
            ("uniform_capacity", self.uniform_capacity),
            ("probe_horizon", self.probe_horizon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let k = self.object_count() as f64;
        if self.cap_hottest && k * self.cache_rate / (2.0 * self.offered_rate()) < 1.0 {
            return Err(Error::Config(format!(
                "{k} objects cannot carry the offered rate with each capped at half a node"
            )));
        }
        Ok(())
    }

    pub fn object_count(&self) -> u64 {
        self.objects.unwrap_or_else(|| {
            let m = self.nodes_per_layer as f64;
            (m * m.ln()).ceil() as u64
        })
    }

    /// Aggregate offered rate `utilization · m · T̃`.
    pub fn offered_rate(&self) -> f64 {
        self.utilization * self.nodes_per_layer as f64 * self.cache_rate
    }

    pub fn warnings(&self) -> Vec<String> {
        let k = self.object_count() as f64;
        let bound = (self.nodes_per_layer as f64).powf(self.beta_warning);
        if k > bound {
            vec![format!(
                "{k} objects exceed m^{} = {bound}",
                self.beta_warning
            )]
        } else {
            Vec::new()
        }
    }

    /// Zipf over the hot objects, renormalized and, when enabled, clipped
    /// so that no object exceeds half a node's capacity.
    pub fn distribution(&self) -> Result<QueryDistribution> {
        let rate = self.offered_rate();
        let d = zipf_probs(self.object_count(), self.skew)?;
        let d = if self.cap_hottest {
            cap_max_prob(&d, self.cache_rate / (2.0 * rate))?
        } else {
            d
        };
        Ok(d.with_rate(rate))
    }

    fn topology(&self) -> Topology {
        Topology {
            spines: self.nodes_per_layer,
            racks: self.nodes_per_layer,
            servers_per_rack: 1,
            cache_rate: self.cache_rate,
            client_racks: 1,
            bypass_upper_on_lower_hit: true,
            ..Default::default()
        }
    }

    fn probe_config(
        &self,
        policy: PolicyKind,
        d: QueryDistribution,
        rate: f64,
        seed: u64,
    ) -> SimConfig {
        let mut cfg = SimConfig::new(self.topology(), policy, Arc::new(d));
        cfg.seed = seed;
        cfg.hot_set = HotSetMode::AllObjects;
        cfg.service = ServiceMode::Queue;
        cfg.load_signal = LoadSignal::QueueLength;
        cfg.arrivals = ArrivalKind::Poisson;
        cfg.offered_rate = rate;
        cfg.horizon = self.probe_horizon;
        cfg.warmup = 0.0;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityRow {
    pub seed: u64,
    pub objects: u64,
    pub utilization: f64,
    pub max_object_rate: f64,
    pub feasible: bool,
}

/// Whether the two-layer placement of seed `seed` admits a perfect
/// matching at the configured load.
pub fn feasibility_probe(cfg: &TheoryConfig, seed: u64) -> Result<FeasibilityRow> {
    cfg.validate()?;
    let d = cfg.distribution()?;
    let probe = cfg.probe_config(PolicyKind::Pot, d.clone(), cfg.offered_rate(), seed);
    let inst = MatchingInstance::from_distribution(&probe.partitioner()?, &d, cfg.cache_rate)?;
    Ok(FeasibilityRow {
        seed,
        objects: d.len() as u64,
        utilization: cfg.utilization,
        max_object_rate: d.max_prob() * d.total_rate,
        feasible: solve_matching(&inst).feasible,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationarityRow {
    pub seed: u64,
    pub policy: String,
    pub feasible: bool,
    /// Largest per-node rate implied by placement alone (single hash), or
    /// measured (two choices).
    pub max_node_rate: f64,
    pub capacity: f64,
    pub overloaded: bool,
    pub stationary: bool,
    pub trend: f64,
}

/// Queue-mode run of power-of-two-choices on the feasibility probe's
/// workload.
pub fn two_choice_stationarity(cfg: &TheoryConfig, seed: u64) -> Result<StationarityRow> {
    let feasible = feasibility_probe(cfg, seed)?.feasible;
    let probe = cfg.probe_config(
        PolicyKind::Pot,
        cfg.distribution()?,
        cfg.offered_rate(),
        seed,
    );
    let report = sim::run(&probe)?;
    let p = queue_stationarity_probe(&report, cfg.max_queue)?;
    let nodes = probe.topology.cache_nodes();
    let max_node_rate = (0..nodes)
        .map(|i| report.arrival_rate(i))
        .fold(0.0, f64::max);
    Ok(StationarityRow {
        seed,
        policy: PolicyKind::Pot.name().into(),
        feasible,
        max_node_rate,
        capacity: cfg.cache_rate,
        overloaded: max_node_rate > cfg.cache_rate,
        stationary: p.stationary,
        trend: p.trend,
    })
}

/// Single-hash placement of `m` unit-rate objects over both layers, each
/// node serving `uniform_capacity` objects' worth of rate.
pub fn single_hash_stationarity(cfg: &TheoryConfig, seed: u64) -> Result<StationarityRow> {
    cfg.validate()?;
    let k = cfg.nodes_per_layer as usize;
    let unit = cfg.cache_rate / cfg.uniform_capacity;
    let d = QueryDistribution::from_weights(vec![1.0; k])?.with_rate(unit * k as f64);
    let probe = cfg.probe_config(
        PolicyKind::SingleHashUniform,
        d.clone(),
        unit * k as f64,
        seed,
    );
    let p = probe.partitioner()?;
    let mut offered = vec![0.0; probe.topology.cache_nodes()];
    for i in 0..d.len() {
        offered[p.single(&d.key(i)).flat(p.m_upper())] += unit;
    }
    let max_node_rate = offered.iter().copied().fold(0.0, f64::max);
    let report = sim::run(&probe)?;
    let s = queue_stationarity_probe(&report, cfg.max_queue)?;
    Ok(StationarityRow {
        seed,
        policy: PolicyKind::SingleHashUniform.name().into(),
        feasible: max_node_rate <= cfg.cache_rate,
        max_node_rate,
        capacity: cfg.cache_rate,
        overloaded: max_node_rate > cfg.cache_rate + 1e-9,
        stationary: s.stationary,
        trend: s.trend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_count_defaults_to_m_log_m() {
        let cfg = TheoryConfig::default();
        assert_eq!(cfg.object_count(), 111);
        assert!(cfg.warnings().is_empty());
        let many = TheoryConfig {
            nodes_per_layer: 2,
            objects: Some(9),
            ..Default::default()
        };
        assert_eq!(many.warnings().len(), 1);
    }

    #[test]
    fn hottest_object_is_clipped_to_half_a_node() {
        let cfg = TheoryConfig::default();
        let d = cfg.distribution().unwrap();
        assert!(d.max_prob() * d.total_rate <= cfg.cache_rate / 2.0 + 1e-6);
        assert!((d.total_rate - 0.8 * 32.0 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn small_two_choice_probe_is_feasible_and_stationary() {
        let cfg = TheoryConfig {
            nodes_per_layer: 8,
            probe_horizon: 40.0,
            ..Default::default()
        };
        let row = two_choice_stationarity(&cfg, 3).unwrap();
        assert!(row.feasible && row.stationary, "{row:?}");
        assert!(row.max_node_rate <= 1.05 * cfg.cache_rate);
    }

    #[test]
    fn single_hash_offered_rates_follow_placement() {
        let cfg = TheoryConfig {
            nodes_per_layer: 4,
            uniform_capacity: 1.0,
            probe_horizon: 40.0,
            cap_hottest: false,
            ..Default::default()
        };
        // Four unit objects over eight nodes at capacity one object: any
        // collision overloads a node and its queue grows.
        for seed in 0..20 {
            let row = single_hash_stationarity(&cfg, seed).unwrap();
            if row.overloaded {
                assert!(!row.stationary && row.trend > 0.0, "{row:?}");
                return;
            }
        }
        panic!("no seed produced a collision");
    }
}
