//! End-to-end tests of the command-line binary against the shipped
//! scenario files: exit codes, byte-reproducible bundles and the golden
//! CSV contract.

use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_volterra-control"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

#[test]
fn mp_check_passes_and_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let status = binary()
            .args(["mp-check", "--scenario"])
            .arg(scenario("finite-lq.scn"))
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success(), "mp-check failed");
    }
    let a = std::fs::read(out_a.join("report.json")).unwrap();
    let b = std::fs::read(out_b.join("report.json")).unwrap();
    assert_eq!(a, b, "report.json not byte-reproducible");
    let a = std::fs::read(out_a.join("tables/mp_cells.csv")).unwrap();
    let b = std::fs::read(out_b.join("tables/mp_cells.csv")).unwrap();
    assert_eq!(a, b, "mp_cells.csv not byte-reproducible");
    assert!(out_a.join("summary.txt").exists());
    assert!(out_a.join("tables/mp_heatmap.csv").exists());
}

#[test]
fn suboptimal_reference_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("finite-lq.scn")).unwrap();
    let bad = text.replace("ubar = optimal", "ubar = const:1");
    let path = dir.path().join("bad.scn");
    std::fs::write(&path, bad).unwrap();
    let status = binary()
        .args(["mp-check", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn parse_error_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.scn");
    std::fs::write(&path, "version = 1\n[grid]\nhorizzon = 1\n").unwrap();
    let output = binary()
        .args(["validate", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("horizzon"), "stderr: {stderr}");
}

#[test]
fn epidemic_demo_produces_policy_table() {
    let dir = tempfile::tempdir().unwrap();
    let status = binary()
        .args(["epidemic-demo", "--scenario"])
        .arg(scenario("epidemic-demo.scn"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let policy =
        std::fs::read_to_string(dir.path().join("out/tables/optimal_policy.csv")).unwrap();
    assert!(policy.starts_with("t_index,node_id,u0\n"));
    // 4 levels of a binary tree: 1 + 2 + 4 + 8 decision nodes.
    assert_eq!(policy.lines().count(), 1 + 15);
}

#[test]
fn lq_solve_reports_both_cases() {
    let dir = tempfile::tempdir().unwrap();
    let status = binary()
        .args(["lq-solve", "--scenario"])
        .arg(scenario("relaxed-lq.scn"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    let details = &json["details"];
    assert!(details["case1"]["max_stationarity_residual"].is_number());
    assert!(details["case2"]["min_eigenvalue_b3_variant"].is_number());
}

#[test]
fn spike_experiment_runs_on_reduced_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let status = binary()
        .args(["spike-exp", "--scenario"])
        .arg(scenario("epidemic-mc.scn"))
        .args(["--paths", "300", "--steps", "32", "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let asym = std::fs::read_to_string(dir.path().join("out/tables/asymptotic.csv")).unwrap();
    assert!(asym.starts_with("width,epsilon,h_x1,h_y1,limit,gap_x1_y1,gap_y1_limit\n"));
    assert_eq!(asym.lines().count(), 1 + 4);
}

#[test]
fn validate_passes_on_shipped_scenarios() {
    for name in ["finite-lq.scn", "relaxed-lq.scn", "epidemic-demo.scn"] {
        let dir = tempfile::tempdir().unwrap();
        let status = binary()
            .args(["validate", "--scenario"])
            .arg(scenario(name))
            .arg("--out")
            .arg(dir.path().join("out"))
            .status()
            .unwrap();
        assert!(status.success(), "validate failed on {name}");
    }
}

/// The CSV byte contract on a deterministic scenario: header row, `.`
/// decimals, `\n` endings, documented column order.
#[test]
fn golden_state_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
version = 1
[meta]
name = golden
[grid]
horizon = 1.0
steps = 2
[driver]
kind = tree
[problem]
family = lq
x0 = -0.5
a1 = const:0
b1 = const:0
a2 = const:0
b2 = const:0
q = const:0
s = const:0
r = const:1
g = 0
[control]
kind = all
dim = 1
[checker]
ubar = const:0
"#;
    let path = dir.path().join("golden.scn");
    std::fs::write(&path, text).unwrap();
    let status = binary()
        .args(["simulate", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let state = std::fs::read_to_string(dir.path().join("out/tables/state.csv")).unwrap();
    assert_eq!(
        state,
        "t_index,time,mean0,second_moment\n\
         0,0,-0.5,0.25\n\
         1,0.5,-0.5,0.25\n\
         2,1,-0.5,0.25\n"
    );
}
