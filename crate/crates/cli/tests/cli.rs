use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distcache"));
    c.env_remove("DISTCACHE_WORKERS");
    c
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_reports_saturated_feasible_instance() {
    let o = bin()
        .arg("verify")
        .arg(repo("instances/six_objects.txt"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("feasible: true"), "{out}");
    assert!(out.contains("rho_max: 1.000000"), "{out}");
    assert!(out.contains("expansion: holds"), "{out}");
    assert_eq!(
        out.lines()
            .filter(|l| l.starts_with(char::is_numeric))
            .count(),
        6
    );
}

#[test]
fn verify_json_gives_cut_witness_for_overload() {
    let o = bin()
        .args(["verify", "--json"])
        .arg(repo("instances/overloaded_pair.txt"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["feasible"], false);
    assert_eq!(v["witness"]["demand"], 5.0);
    assert_eq!(v["witness"]["capacity"], 4.0);
    assert_eq!(v["rho_max"], 1.25);
}

#[test]
fn verify_empty_instance() {
    let o = bin()
        .arg("verify")
        .arg(repo("instances/empty.txt"))
        .output()
        .unwrap();
    let out = stdout(&o);
    assert!(
        out.contains("feasible: true") && out.contains("rho_max: 0.000000"),
        "{out}"
    );
}

#[test]
fn verify_names_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "# header\n3 3 1 1\n0 1 7 1\n").unwrap();
    let o = bin().arg("verify").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn run_rejects_empty_policy_list_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, "[experiment]\nname = \"x\"\n\npolicies = []\n").unwrap();
    let o = bin()
        .args(["run", "--suite", "fig8a", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 4") && err.contains("policies"), "{err}");
}

#[test]
fn run_rejects_unknown_suite() {
    let o = bin().args(["run", "--suite", "fig11"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn run_feasibility(out: &Path, extra: &[&str], workers: Option<&str>) -> Output {
    let mut c = bin();
    c.args([
        "run",
        "--suite",
        "feasibility",
        "--seeds",
        "1..10",
        "--config",
    ])
    .arg(repo("configs/quick.toml"));
    c.arg("--out").arg(out).args(extra);
    if let Some(w) = workers {
        c.env("DISTCACHE_WORKERS", w);
    }
    c.output().unwrap()
}

#[test]
fn run_writes_tables_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_feasibility(dir.path(), &[], None);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("PASS feasibility"), "{}", stdout(&o));
    let runs = std::fs::read_to_string(dir.path().join("feasibility_runs.csv")).unwrap();
    assert!(runs.starts_with("seed,objects,utilization,max_object_rate,feasible,config_hash\n"));
    assert_eq!(runs.lines().count(), 10);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["passed"], true);
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn deterministic_and_pooled_runs_write_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_feasibility(a.path(), &["--deterministic"], None)
        .status
        .success());
    assert!(run_feasibility(b.path(), &[], Some("3")).status.success());
    for f in ["feasibility.csv", "feasibility_runs.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_worker_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_feasibility(dir.path(), &[], Some("zero"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DISTCACHE_WORKERS"));
}

#[test]
fn partition_dump_is_reproducible() {
    let a = bin()
        .args(["partition-dump", "--keys", "5"])
        .output()
        .unwrap();
    let b = bin()
        .args(["partition-dump", "--keys", "5"])
        .output()
        .unwrap();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    assert_eq!(out.lines().filter(|l| l.starts_with("upper ")).count(), 8);
    assert!(out.contains("# key upper lower"));
}

#[test]
fn selftest_passes() {
    let o = bin().args(["selftest", "--json"]).output().unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.as_array().unwrap().iter().all(|c| c["passed"] == true));
}
