use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use distcache::matching::{
    check_expansion, parse_instance, solve_matching, traffic_intensity, traffic_intensity_sampled,
    MatchingInstance,
};
use distcache::selftest;
use distcache::sim::SimConfig;
use distcache::suite::{self, ExperimentConfig, Runner, SeedRange, SuiteOutput, SUITES};
use distcache::workload::QueryDistribution;
use distcache::Error;

#[derive(Parser)]
#[command(
    name = "distcache",
    version,
    about = "Two-layer switch cache simulator and load-balancing checks"
)]
struct Cli {
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment suite and check its thresholds.
    Run {
        /// Suite name, or `all`.
        #[arg(long)]
        suite: String,
        /// TOML experiment file; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed range `a..b` replacing every seed list of the config.
        #[arg(long)]
        seeds: Option<SeedRange>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a matching instance file.
    Verify {
        instance: PathBuf,
        /// Print one JSON document instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Print the partition map and per-key owners for a config.
    PartitionDump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also list the owners of the first N object keys.
        #[arg(long, default_value_t = 0)]
        keys: u64,
    },
    /// Compare the solvers against brute-force oracles.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            suite,
            config,
            seeds,
            out,
        } => run(&suite, config, seeds, out, cli.deterministic),
        Command::Verify { instance, json } => verify(&instance, json),
        Command::PartitionDump { config, seed, keys } => partition_dump(config, seed, keys),
        Command::Selftest { seed, json } => {
            let checks = selftest::run_all(seed);
            if json {
                println!("{}", serde_json::to_string_pretty(&checks)?);
            } else {
                for c in &checks {
                    println!(
                        "{} {}: {}",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.detail
                    );
                }
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn load_config(path: Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(&p).with_context(|| format!("reading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(
    suite: &str,
    config: Option<PathBuf>,
    seeds: Option<SeedRange>,
    out: Option<PathBuf>,
    deterministic: bool,
) -> Result<bool> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        cfg.experiment.seeds = s;
        cfg.experiment.theory_seeds = s;
    }
    if let Some(o) = out {
        cfg.experiment.out = o;
    }
    let names: Vec<&str> = if suite == "all" {
        SUITES.to_vec()
    } else {
        vec![suite]
    };
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(n)) {
        anyhow::bail!(
            "unknown suite `{bad}`; expected `all` or one of {}",
            SUITES.join(", ")
        );
    }
    let dir = cfg.experiment.out.clone();
    let runner = Runner::new(cfg, suite::worker_count(deterministic)?)?;
    let mut outputs: Vec<SuiteOutput> = Vec::new();
    for name in names {
        eprintln!("running {name}");
        let result = runner
            .run(name)
            .and_then(|o| suite::write_tables(&dir, &o).map(|()| o));
        match result {
            Ok(o) => {
                print!("{}", suite::summary_text(std::slice::from_ref(&o)));
                outputs.push(o);
            }
            Err(e) => {
                suite::write_summary(&dir, runner.config_hash(), &outputs)?;
                return Err(e).with_context(|| format!("suite {name}"));
            }
        }
    }
    suite::write_summary(&dir, runner.config_hash(), &outputs)?;
    Ok(outputs.iter().all(|o| o.checks.iter().all(|c| c.passed)))
}

fn node_name(inst: &MatchingInstance, v: usize) -> String {
    let m0 = inst.graph().m_upper() as usize;
    if v < m0 {
        format!("upper{v}")
    } else {
        format!("lower{}", v - m0)
    }
}

fn verify(path: &PathBuf, as_json: bool) -> Result<bool> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let inst = parse_instance(&text).with_context(|| format!("parsing {}", path.display()))?;
    let a = solve_matching(&inst);
    let expansion = check_expansion(inst.graph());
    let (intensity, exhaustive) = match traffic_intensity(&inst) {
        Ok(r) => (r, true),
        Err(Error::TooLarge { .. }) => (traffic_intensity_sampled(&inst, &[])?, false),
        Err(e) => return Err(e.into()),
    };
    let names = |vs: &[usize]| vs.iter().map(|&v| node_name(&inst, v)).collect::<Vec<_>>();
    let assignment: Vec<_> = if a.feasible {
        a.weights()
            .map(|(i, v, w)| (i, node_name(&inst, v), w))
            .collect()
    } else {
        Vec::new()
    };
    if as_json {
        let doc = json!({
            "feasible": a.feasible,
            "flow": a.flow,
            "demand": a.demand,
            "rho_max": intensity.rho_max,
            "rho_exhaustive": exhaustive,
            "rho_argmax": names(&intensity.argmax),
            "expansion": expansion.holds,
            "expansion_witness": expansion.witness,
            "witness": a.witness.as_ref().map(|w| json!({
                "objects": w.objects,
                "nodes": names(&w.nodes),
                "demand": w.demand,
                "capacity": w.capacity,
            })),
            "assignment": assignment
                .iter()
                .map(|(i, v, w)| json!({"object": i, "node": v, "rate": w}))
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(true);
    }
    println!("feasible: {}", a.feasible);
    println!("flow: {} of {}", a.flow, a.demand);
    let scope = if exhaustive {
        "all node sets"
    } else {
        "object node sets only"
    };
    println!(
        "rho_max: {:.6} over {scope} (at {})",
        intensity.rho_max,
        names(&intensity.argmax).join(" ")
    );
    match &expansion.witness {
        None => println!("expansion: holds"),
        Some(s) => println!("expansion: fails on objects {s:?}"),
    }
    if let Some(w) = &a.witness {
        println!(
            "witness: objects {:?} on nodes {} need {} but the cut offers {}",
            w.objects,
            names(&w.nodes).join(" "),
            w.demand,
            w.capacity
        );
    }
    if a.feasible {
        println!("# object node rate");
        for (i, v, w) in assignment {
            println!("{i} {v} {w}");
        }
    }
    Ok(true)
}

fn partition_dump(config: Option<PathBuf>, seed: u64, keys: u64) -> Result<bool> {
    let cfg = load_config(config)?;
    let dist = QueryDistribution::from_weights(vec![1.0])?;
    let mut sim = SimConfig::new(
        cfg.topology,
        distcache::routing::PolicyKind::Pot,
        dist.into(),
    );
    sim.seed = seed;
    sim.vnodes = cfg.sim.vnodes;
    let map = sim.partition_map()?;
    print!("{}", map.dump());
    if keys > 0 {
        let p = map.partitioner();
        println!("# key upper lower");
        for i in 0..keys {
            let (a, b) = p.locate(&distcache::hashing::ObjectId::from_index(i));
            println!("{i} {a} {b}");
        }
    }
    Ok(true)
}
