use std::sync::Arc;

use distcache::allocation::{refresh_hot_set, Budgets, HotSet, NodeReport};
use distcache::hashing::{NodeRef, ObjectId};
use distcache::matching::{
    format_instance, parse_instance, solve_matching, verify_assignment, MatchingInstance,
};
use distcache::routing::PolicyKind;
use distcache::sim::{self, SimConfig, Topology};
use distcache::suite::ExperimentConfig;
use distcache::workload::zipf_probs;

fn repo_file(rel: &str) -> String {
    std::fs::read_to_string(format!("{}/../../{rel}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let cfg = ExperimentConfig::parse(&repo_file("configs/default.toml")).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn quick_config_parses() {
    let cfg = ExperimentConfig::parse(&repo_file("configs/quick.toml")).unwrap();
    assert_eq!(cfg.topology.spines, 4);
    assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
}

#[test]
fn shipped_instances_round_trip_and_solve() {
    let inst = parse_instance(&repo_file("instances/six_objects.txt")).unwrap();
    let again = parse_instance(&format_instance(&inst)).unwrap();
    assert_eq!(format_instance(&inst), format_instance(&again));
    let a = solve_matching(&inst);
    assert!(a.feasible);
    assert!(verify_assignment(&inst, &a).is_empty());
    let over = parse_instance(&repo_file("instances/overloaded_pair.txt")).unwrap();
    assert!(!solve_matching(&over).feasible);
}

#[test]
fn distribution_instance_is_feasible_at_low_load() {
    let cfg = SimConfig::new(
        Topology::default(),
        PolicyKind::Pot,
        Arc::new(zipf_probs(200, 0.99).unwrap()),
    );
    let d = zipf_probs(200, 0.99).unwrap().with_rate(0.3 * 8.0 * 800.0);
    let inst = MatchingInstance::from_distribution(&cfg.partitioner().unwrap(), &d, 800.0).unwrap();
    assert!(solve_matching(&inst).feasible);
}

#[test]
fn controller_refresh_converges_to_reported_hot_keys() {
    let cfg = SimConfig::new(
        Topology::default(),
        PolicyKind::Pot,
        Arc::new(zipf_probs(1000, 0.99).unwrap()),
    );
    let mut map = cfg.partition_map().unwrap();
    let budgets = Budgets::per_node(4);
    let keys: Vec<ObjectId> = (0..64).map(ObjectId::from_index).collect();
    let reports = |map: &distcache::allocation::PartitionMap| -> Vec<NodeReport> {
        let mut out = Vec::new();
        for a in 0..8 {
            for node in [NodeRef::Upper(a), NodeRef::Lower(a)] {
                let candidates: Vec<(ObjectId, u16)> = keys
                    .iter()
                    .filter(|k| map.owner(k, node))
                    .map(|k| (*k, 1000 - k.index() as u16))
                    .collect();
                out.push(NodeReport {
                    node,
                    candidates,
                    cached: Vec::new(),
                });
            }
        }
        out
    };
    let mut hot = HotSet::default();
    for c in refresh_hot_set(&map, &budgets, &reports(&map), &hot) {
        hot.apply(&c);
    }
    assert!(refresh_hot_set(&map, &budgets, &reports(&map), &hot).is_empty());
    map.fail(NodeRef::Upper(0)).unwrap();
    let cmds = refresh_hot_set(&map, &budgets, &reports(&map), &hot);
    assert!(!cmds.is_empty());
    for c in cmds {
        hot.apply(&c);
    }
    assert!(hot.keys_at(NodeRef::Upper(0)).is_empty());
}

#[test]
fn failure_and_recovery_run_conserves_queries() {
    let topology = Topology {
        spines: 4,
        racks: 4,
        servers_per_rack: 4,
        ..Default::default()
    };
    let mut cfg = SimConfig::new(
        topology,
        PolicyKind::Pot,
        Arc::new(zipf_probs(10_000, 0.99).unwrap()),
    );
    cfg.offered_rate = 600.0;
    cfg.horizon = 6.0;
    let cfg = cfg.with_failure(NodeRef::Upper(1), 2.0, Some(4.0));
    let r = sim::run(&cfg).unwrap();
    assert!(r.conserved);
    assert!(r.completed + r.dropped <= r.issued);
    assert!(r.issued > 3000);
    let before = sim::run(&cfg).unwrap();
    assert_eq!(before.samples, r.samples);
}
