use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triplediff")).args(args).env_remove("TRIPLEDIFF_OUT").output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let spec = data("dgp/gamma1.json");
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let out = dir.path().join(name);
        let o = run(&[
            "simulate",
            "--spec",
            path(&spec),
            "--trials",
            "20",
            "--seed",
            "7",
            "--threads",
            threads,
            "--dump-trials",
            "--out",
            path(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let files: Vec<Vec<u8>> = ["mc_report.json", "mc_report.csv", "trials.csv"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);

    let csv = String::from_utf8(outputs[0][1].clone()).unwrap();
    assert!(csv.starts_with("estimand,estimator,g,t,trials,failures,truth"));
    assert_eq!(csv.lines().count(), 1 + 8);
    let json: serde_json::Value = serde_json::from_slice(&outputs[0][0]).unwrap();
    assert_eq!(json["trials"], 20);
    assert_eq!(json["master_seed"], 7);
}

#[test]
fn simulate_with_custom_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        "--spec",
        path(&data("dgp/null.json")),
        "--trials",
        "5",
        "--suite",
        "cdatt:dr,datt:ipw",
        "--out",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("mc_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!dir.path().join("trials.csv").exists());
}

#[test]
fn estimate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "estimate",
        "--data",
        path(&data("panel_example.csv")),
        "--config",
        path(&data("design_example.json")),
        "--estimand",
        "both",
        "--estimator",
        "dr",
        "--trim-drop",
        "--out",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("estimand,estimator,comparison,g,t,estimate,se,ci_lo,ci_hi"));
    // Cohorts 2 and 3 through period 3: three pairs, two estimands.
    assert_eq!(csv.lines().count(), 1 + 6);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["effects"].as_array().unwrap().len(), 6);
}

#[test]
fn estimate_single_pair_with_bound_and_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "estimate",
        "--data",
        path(&data("panel_example.csv")),
        "--s",
        "targeted",
        "--sprime",
        "untargeted",
        "--estimand",
        "att_unaffected",
        "--estimator",
        "ra",
        "--g",
        "2",
        "--t",
        "2",
        "--shares",
        "0.4,0.6",
        "--bound",
        "--out",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    for tag in ["att_unaffected", "att_pop", "bound"] {
        assert!(csv.lines().any(|l| l.starts_with(tag)), "missing {tag}:\n{csv}");
    }
}

#[test]
fn estimate_repeated_cross_section() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "estimate",
        "--data",
        path(&data("rc_example.csv")),
        "--rc",
        "--s",
        "targeted",
        "--sprime",
        "untargeted",
        "--out",
        path(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn validate_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("v");
    let o = run(&[
        "validate",
        "--data",
        path(&data("panel_example.csv")),
        "--s",
        "targeted",
        "--sprime",
        "untargeted",
        "--out",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pass"));
    assert!(report.join("validation.json").exists());
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let panel = data("panel_example.csv");

    let usage = run(&[
        "estimate",
        "--data",
        path(&panel),
        "--s",
        "targeted",
        "--sprime",
        "untargeted",
        "--estimand",
        "cdatt",
        "--estimator",
        "3wfe",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("error["));

    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(2));

    let missing =
        run(&["estimate", "--data", "/nonexistent.csv", "--s", "a", "--sprime", "b", "--out", path(dir.path())]);
    assert_eq!(missing.status.code(), Some(3));

    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, "unit,time,y,cohort,subgroup\na,1,1,2,s\n").unwrap();
    let unbalanced = run(&["validate", "--data", path(&broken), "--s", "s", "--sprime", "t"]);
    assert_eq!(unbalanced.status.code(), Some(3));

    let thin = dir.path().join("thin.csv");
    std::fs::write(&thin, "unit,time,y,cohort,subgroup\na,1,1,2,s\na,2,2,2,s\nb,1,1,never,s\nb,2,1,never,s\nc,1,0,never,t\nc,2,0,never,t\n").unwrap();
    let design = run(&["validate", "--data", path(&thin), "--s", "s", "--sprime", "t"]);
    assert_eq!(design.status.code(), Some(5), "{}", String::from_utf8_lossy(&design.stderr));
}
