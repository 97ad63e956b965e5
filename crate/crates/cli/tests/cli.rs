use std::path::Path;
use std::process::{Command, Output};

fn iosvd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iosvd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("cli runs")
}

const SMALL: [&str; 8] = [
    "--input-dim",
    "10",
    "--hidden",
    "8",
    "--vocab",
    "6",
    "--tokens",
    "40",
];
const IO: [&str; 4] = ["--model", "g/model.iosvd", "--calib", "g/calib.iosvd"];

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen", "--seed", "1", "--out", "g"];
    args.extend_from_slice(&SMALL);
    assert!(iosvd(dir.path(), &args).status.success());
    let calib = [&["calibrate"][..], &IO, &["--out", "s.iosvd"]].concat();
    assert!(iosvd(dir.path(), &calib).status.success());
    dir
}

fn compress(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let args = [
        &["compress"][..],
        &IO,
        &["--stats", "s.iosvd", "--out", out],
        extra,
    ]
    .concat();
    iosvd(dir, &args)
}

fn plan_target(dir: &Path, out: &str) -> u64 {
    let text = std::fs::read_to_string(dir.join(out).join("plan.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["target_removed"].as_u64().unwrap()
}

#[test]
fn gen_depends_on_seed() {
    let dir = setup();
    let mut args = vec!["gen", "--seed", "2", "--out", "h"];
    args.extend_from_slice(&SMALL);
    assert!(iosvd(dir.path(), &args).status.success());
    let a = std::fs::read(dir.path().join("g/model.iosvd")).unwrap();
    let b = std::fs::read(dir.path().join("h/model.iosvd")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn flags_override_config_file() {
    let dir = setup();
    std::fs::write(dir.path().join("cfg.json"), r#"{"ratio": 0.3}"#).unwrap();
    assert!(compress(dir.path(), "default", &[]).status.success());
    assert!(compress(dir.path(), "file", &["--config", "cfg.json"])
        .status
        .success());
    assert!(compress(
        dir.path(),
        "flag",
        &["--config", "cfg.json", "--ratio", "0.9"]
    )
    .status
    .success());
    let (d, f, g) = (
        plan_target(dir.path(), "default"),
        plan_target(dir.path(), "file"),
        plan_target(dir.path(), "flag"),
    );
    assert!(f > d && d > g, "targets {d} {f} {g}");
}

#[test]
fn unreachable_budget_writes_outputs_and_exits_one() {
    let dir = setup();
    let out = compress(dir.path(), "c", &["--eta", "0.99", "--ratio", "0.05"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("c/plan.json").exists());
    assert!(dir.path().join("c/compressed.iosvd").exists());
    let text = std::fs::read_to_string(dir.path().join("c/plan.json")).unwrap();
    assert!(text.contains("\"budget_reached\": false"));
}

#[test]
fn io_and_config_errors_exit_two() {
    let dir = setup();
    let missing = [
        &["compress"][..],
        &IO,
        &["--stats", "nope.iosvd", "--out", "c"],
    ]
    .concat();
    assert_eq!(iosvd(dir.path(), &missing).status.code(), Some(2));
    assert_eq!(
        compress(dir.path(), "c", &["--ratio", "1.5"]).status.code(),
        Some(2)
    );
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"ratio": 0.5, "colour": 1}"#,
    )
    .unwrap();
    assert_eq!(
        compress(dir.path(), "c", &["--config", "bad.json"])
            .status
            .code(),
        Some(2)
    );
    let hq_too_high = [
        &["remap"][..],
        &IO,
        &[
            "--stats", "s.iosvd", "--remap", "hq", "--ratio", "0.6", "--out", "r",
        ],
    ]
    .concat();
    assert_eq!(iosvd(dir.path(), &hq_too_high).status.code(), Some(2));
    assert_eq!(iosvd(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_of_original_has_zero_kl() {
    let dir = setup();
    let args = [&["eval"][..], &IO, &["--candidate", "g/model.iosvd"]].concat();
    let out = iosvd(dir.path(), &args);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["kl_after"].as_f64().unwrap(), 0.0);
    assert_eq!(report["params_before"], report["params_after"]);
    assert!(report.get("timings_ms").is_none());
}

#[test]
fn verify_reports_every_check() {
    let dir = setup();
    let out = iosvd(dir.path(), &[&["verify"][..], &IO].concat());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let reports: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(reports.iter().all(|r| r["pass"] == true));
    assert!(reports.iter().any(|r| r["name"] == "allocation_pool_scan"));
}

#[test]
fn sweep_k_writes_one_row_per_k() {
    let dir = setup();
    let args = [
        &["sweep-k"][..],
        &IO,
        &["--ks", "1,3,6", "--out", "sweep.csv"],
    ]
    .concat();
    assert!(iosvd(dir.path(), &args).status.success());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,kl,normalized_kl,calibration_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..]
        .iter()
        .any(|l| l.split(',').nth(2) == Some("1.000000000000e0")));
}
