use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradadapt::harness::Trace;

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
        .display()
        .to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradadapt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(name: &str, extra: &[&str], out: &Path) -> Trace {
    let s = scenario(name);
    let path = out.display().to_string();
    let mut args = vec!["simulate", "--scenario", &s, "--out", &path];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    Trace::read(out).unwrap()
}

#[test]
fn simulate_writes_a_full_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let s = scenario("static");
    let o = run(&["simulate", "--scenario", &s, "--policy", "oneadapt", "--out", &out.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# gradadapt-summary/1\n"));
    assert_eq!(text.lines().count(), 3);
    let trace = Trace::read(&out).unwrap();
    assert_eq!(trace.records.len(), 60);
    assert!(trace.records.iter().all(|r| r.extra_inferences == 0));
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("# {\"schema\":\"gradadapt-trace/1\""));
}

#[test]
fn jsonl_and_csv_traces_agree() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate("slow", &["--intervals", "12", "--format", "csv"], &dir.path().join("a"));
    let b = simulate("slow", &["--intervals", "12", "--format", "jsonl"], &dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn unknown_policy_is_a_usage_error() {
    let o = run(&["simulate", "--scenario", &scenario("static"), "--policy", "greedy"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for name in ["oneadapt", "profiling", "frame-diff-heuristic", "static", "oracle"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn bad_flags_and_files_exit_one() {
    assert_eq!(run(&["simulate", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--scenario", "/nonexistent.toml"]).status.code(), Some(1));
    let o = run(&["simulate", "--scenario", &scenario("static"), "--alpha", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"));
}

#[test]
fn misspelled_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenario("static")).unwrap().replace("[estimator]", "[estimator]\nmcu_blok = 8");
    std::fs::write(&path, text).unwrap();
    let o = run(&["simulate", "--scenario", &path.display().to_string()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mcu_blok"), "{}", stderr(&o));
}

#[test]
fn lowering_lambda_does_not_lower_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let free = simulate("fast", &["--lambda", "0", "--intervals", "20"], &dir.path().join("free"));
    let paid = simulate("fast", &["--lambda", "1", "--intervals", "20"], &dir.path().join("paid"));
    assert!(free.mean(|r| r.accuracy) >= paid.mean(|r| r.accuracy));
    assert!(free.mean(|r| r.gpu_frames) >= paid.mean(|r| r.gpu_frames));
}

#[test]
fn gradcheck_threshold_failure_exits_two() {
    let s = scenario("slow");
    let ok = run(&["gradcheck", "--scenario", &s, "--intervals", "10", "--threshold", "0"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).starts_with("# gradadapt-gradcheck/1\n"));
    let fail = run(&["gradcheck", "--scenario", &s, "--intervals", "10", "--threshold", "1"]);
    assert_eq!(fail.status.code(), Some(2));
}

#[test]
fn verify_theorem_passes() {
    let o = run(&["verify-theorem"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# gradadapt-theorem/1\n"));
    assert!(text.lines().skip(2).all(|l| l.ends_with(",true")));
}

fn compare_table(name: &str, extra: &[&str]) -> Vec<(String, Vec<f64>)> {
    let s = scenario(name);
    let mut args = vec!["compare", "--scenario", &s];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# gradadapt-compare/1\n"));
    text.lines()
        .skip(2)
        .map(|l| {
            let mut cols = l.split(',');
            let name = cols.next().unwrap().to_string();
            (name, cols.filter_map(|c| c.parse().ok()).collect())
        })
        .collect()
}

#[test]
fn oracle_tops_the_comparison() {
    let rows = compare_table("slow", &["--intervals", "15"]);
    assert_eq!(rows.len(), 5);
    let objective = |n: &str| rows.iter().find(|r| r.0 == n).unwrap().1[3];
    for (name, _) in &rows {
        assert!(objective("oracle") >= objective(name) - 1e-12, "{name}");
    }
}

#[test]
fn static_policy_is_exact_on_the_static_scene() {
    let rows = compare_table("static", &["--policy", "static,oneadapt", "--intervals", "10"]);
    assert_eq!(rows[0].0, "static");
    assert_eq!(rows[0].1[0], 1.0);
}

#[test]
fn compare_writes_one_trace_per_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out: PathBuf = dir.path().join("runs");
    let o = run(&[
        "compare",
        "--scenario",
        &scenario("fast"),
        "--policy",
        "oneadapt,profiling",
        "--intervals",
        "8",
        "--format",
        "jsonl",
        "--out",
        &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for p in ["oneadapt", "profiling"] {
        let t = Trace::read(&out.join(format!("{p}.jsonl"))).unwrap();
        assert_eq!(t.records.len(), 8);
        assert_eq!(t.meta.policy, p);
    }
}

#[test]
fn duplicate_policies_are_rejected() {
    let o = run(&["compare", "--scenario", &scenario("static"), "--policy", "static,static"]);
    assert_eq!(o.status.code(), Some(1));
}
