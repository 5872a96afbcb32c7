use serde_json::Value;
use srmcp_cli::{emit_plotdata, run};
use std::path::Path;
use std::process::Command;

fn run_in(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["srmcp", "--out", dir.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(argv)
}

fn report(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{command}.json"))).unwrap())
        .unwrap()
}

#[test]
fn invalid_group_spec_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    // [e1, e2] = e1 breaks the grading
    std::fs::write(
        &bad,
        r#"{"name":"bad","dim":3,"rank":2,"weights":[1,1,2],"brackets":[[1,2,1,1.0]]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run_in(&out, &["model", "validate", bad.to_str().unwrap()]),
        1
    );
    let r = report(&out, "model-validate");
    assert_eq!(r["result"]["valid"], false);
    assert!(r["error"].as_str().unwrap().contains("invalid algebra"));
}

#[test]
fn valid_group_spec_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("engel.json");
    std::fs::write(
        &good,
        r#"{"name":"e","dim":4,"rank":2,"weights":[1,1,2,3],"brackets":[[1,2,3,1.0],[1,3,4,1.0]]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run_in(&out, &["model", "validate", good.to_str().unwrap()]),
        0
    );
    let r = report(&out, "model-validate");
    assert_eq!(r["result"]["two_step"], false);
    assert_eq!(r["result"]["medium_fat"], false);
    assert_eq!(
        r["result"]["medium_fat_witness"],
        serde_json::json!(["0", "1", "0", "0"])
    );
}

#[test]
fn inspect_prints_exact_frame() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["model", "inspect", "heisenberg1"]), 0);
    let r = report(dir.path(), "model-inspect");
    assert_eq!(r["result"]["frame"][0][2], "-1/2·x2");
    assert_eq!(r["result"]["step"], 2);
}

#[test]
fn usage_and_model_errors_exit_with_one() {
    assert_eq!(run(["srmcp", "distance"]), 1);
    assert_eq!(run(["srmcp", "no-such-command"]), 1);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_in(
            dir.path(),
            &["--model", "nosuch", "distance", "--y", "1,0,0"]
        ),
        1
    );
    assert_eq!(run_in(dir.path(), &["distance", "--y", "1,0"]), 1);
    assert_eq!(run(["srmcp", "--help"]), 0);
}

#[test]
fn numerical_failure_exits_with_two_and_keeps_report() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_in(
            dir.path(),
            &["--budget-A", "1e-3", "distance", "--y", "1,0,0.5"]
        ),
        2
    );
    let r = report(dir.path(), "distance");
    assert!(r["result"].is_null());
    assert!(r["error"].as_str().unwrap().contains("budget"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let runs = [
        vec![
            "--model",
            "heisenberg1",
            "--seed",
            "3",
            "distance",
            "--y",
            "0.4,-0.2,0.3",
        ],
        vec![
            "--model",
            "abelian2",
            "--seed",
            "5",
            "estimate-N",
            "--samples",
            "6",
        ],
        vec![
            "--model",
            "heisenberg1",
            "--seed",
            "2",
            "flow-check",
            "--points",
            "1",
            "--t-grid",
            "0.5,1",
        ],
    ];
    for (i, args) in runs.iter().enumerate() {
        let a = dir.path().join(format!("a{i}"));
        let b = dir.path().join(format!("b{i}"));
        assert_eq!(run_in(&a, args), 0);
        assert_eq!(run_in(&b, args), 0);
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                std::fs::read(a.join(&name)).unwrap(),
                std::fs::read(b.join(&name)).unwrap(),
                "{name:?}"
            );
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    let args = [
        "--model",
        "heisenberg1",
        "--seed",
        "9",
        "estimate-N",
        "--samples",
        "4",
    ];
    let mut a = vec!["--jobs", "1"];
    a.extend_from_slice(&args);
    let mut b = vec!["--jobs", "2"];
    b.extend_from_slice(&args);
    assert_eq!(run_in(&one, &a), 0);
    assert_eq!(run_in(&two, &b), 0);
    for name in ["estimate-N.json", "sphere_divergence.csv"] {
        assert_eq!(
            std::fs::read(one.join(name)).unwrap(),
            std::fs::read(two.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn mcp_verify_writes_ratio_series() {
    let dir = tempfile::tempdir().unwrap();
    let regions = dir.path().join("regions.json");
    std::fs::write(
        &regions,
        r#"[{"ball":{"center":[0.6,0.4,0.1],"radius":0.05}}]"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let code = run_in(
        &out,
        &[
            "--model",
            "heisenberg1",
            "mcp-verify",
            "--N",
            "5",
            "--regions",
            regions.to_str().unwrap(),
            "--s-grid",
            "0.5",
            "--points",
            "3",
        ],
    );
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out.join("mcp_ratios.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("region,s,ratio,estimator_gap"));
    assert_eq!(lines.count(), 1);
    assert!(
        report(&out, "mcp-verify")["result"]["rows"][0]["ratio"]
            .as_f64()
            .unwrap()
            >= 1.0
    );
}

#[test]
fn singular_control_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let control = dir.path().join("u.csv");
    std::fs::write(&control, "# u1, u2\n0, 1\n0, 1\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run_in(
            &out,
            &[
                "--model",
                "engel",
                "singular",
                "--control",
                control.to_str().unwrap(),
                "--max-pieces",
                "8"
            ]
        ),
        0
    );
    let r = report(&out, "singular");
    assert_eq!(r["result"]["report"]["verdict"], "Singular");
    assert_eq!(r["result"]["report"]["levels"].as_array().unwrap().len(), 3);
}

#[test]
fn flow_check_csv_has_residual_column() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_in(
            dir.path(),
            &[
                "--model",
                "abelian2",
                "flow-check",
                "--y",
                "1,1",
                "--t-grid",
                "0,1"
            ]
        ),
        0
    );
    let csv = std::fs::read_to_string(dir.path().join("flow.csv")).unwrap();
    assert!(csv.starts_with("point,t,theta,theta_expected,distance,distance_expected,residual\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn empty_plot_data_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let written = emit_plotdata(dir.path(), &[]).unwrap();
    assert!(written.is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn binary_prints_json_to_stdout() {
    let out = Command::new(env!("CARGO_BIN_EXE_srmcp"))
        .args([
            "--model",
            "abelian2",
            "geodesic",
            "--p",
            "0.3,-0.4",
            "--samples",
            "2",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["schema"], 1);
    let end = r["result"]["endpoint"].as_array().unwrap();
    assert!((end[0].as_f64().unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(r["result"]["path"].as_array().unwrap().len(), 3);
}
