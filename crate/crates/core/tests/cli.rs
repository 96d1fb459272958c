use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const MODEL: &str = r#"
[model]
A = { kind = "constant", value = 0.0 }
B = { kind = "constant", value = 1.0 }
Q = { kind = "constant", value = 1.0 }
R = { kind = "constant", value = 1.0 }
K = 1.0
delta = 1.0
eps0 = 1.0
T = 1.0

[law]
kind = "discrete"
values = [0.5, 1.0]
weights = [1.0, 1.0]
count = 2
"#;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn lqmfg(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqmfg"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("LQMFG_LEVEL")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{MODEL}\n{extra}")).unwrap();
    path
}

fn read_csv(path: &Path) -> (String, Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let digest = lines.next().unwrap().to_string();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (digest, header, rows)
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = lqmfg(&["verify"], &configs().join("default.toml"), dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], Value::Bool(true));
    assert_eq!(report["config_digest"].as_str().unwrap().len(), 64);

    let bad = lqmfg(&["verify"], &configs().join("fixtures/corrupt_cost_gap.toml"), dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL  cost_sandwich"));
}

#[test]
fn assumption_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let neg = lqmfg(&["solve"], &configs().join("fixtures/negative_q.toml"), dir.path());
    assert_eq!(neg.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&neg.stderr).contains("Q_t > 0"));

    let missing = lqmfg(&["solve"], &dir.path().join("absent.toml"), dir.path());
    assert_eq!(missing.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert_eq!(msg.matches("configuration error").count(), 1, "{msg}");

    let typo = write_config(dir.path(), "[grid]\nnodes = 10\n");
    let out = lqmfg(&["solve"], &typo, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodes"));

    // A fixture that breaks an assumption still yields a report with one failure.
    let rejected = lqmfg(&["verify"], &configs().join("fixtures/a_positive.toml"), dir.path());
    assert_eq!(rejected.status.code(), Some(1));
}

#[test]
fn solve_writes_oracle_consistent_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for level in ["1", "2"] {
        let out = Command::new(env!("CARGO_BIN_EXE_lqmfg"))
            .args(["solve", "--level", level, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }

    let text = fs::read_to_string(dir.path().join("level_1.csv")).unwrap();
    let first = text.lines().nth(2).unwrap().split(',').nth(1).unwrap();
    let mantissa = first.split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').replace('.', "").len(), 17, "{first}");

    let (digest, header, rows) = read_csv(&dir.path().join("level_1.csv"));
    assert!(digest.starts_with("# config_digest: "));
    assert_eq!(header[..3], ["t", "P", "nu"]);
    // L = 1 is the stationary point of P' = P^2 - 1.
    assert!(rows.iter().all(|r| (r[1] - 1.0).abs() <= 1e-12));

    let (_, _, rows) = read_csv(&dir.path().join("level_2.csv"));
    let c0 = 0.5 * 3.0f64.ln();
    for r in rows {
        let exact = 1.0 / (1.0 - r[0] + c0).tanh();
        assert!((r[1] - exact).abs() <= 1e-8 * exact, "t={} P={} exact={exact}", r[0], r[1]);
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("level_2.json")).unwrap()).unwrap();
    assert_eq!(summary["level"], Value::from(2.0));
    assert_eq!(summary["samples"], Value::from(2));
}

#[test]
fn sweep_single_level_limit_is_that_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[ladder]\nlevels = [100.0]\n");
    let out = lqmfg(&["sweep"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let limit: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("limit.json")).unwrap()).unwrap();
    assert_eq!(limit["level"], Value::from(100.0));
    assert_eq!(limit["previous_level"], Value::Null);
    assert!(!limit["warnings"].as_array().unwrap().is_empty());
    assert!(limit["field"].is_null());

    let (_, header, rows) = read_csv(&dir.path().join("ladder.csv"));
    assert_eq!(header[..3], ["L", "X_T_mean", "J"]);
    assert_eq!(rows.len(), 1);
    let (_, _, lim) = read_csv(&dir.path().join("limit.csv"));
    let (_, _, lvl) = read_csv(&dir.path().join("level_100.csv"));
    // Interior nodes match the top level; only alpha_T is pinned to zero.
    for (a, b) in lim.iter().zip(&lvl).take(lim.len() - 1) {
        assert_eq!(a[1], b[6]);
        assert_eq!(a[2], b[7]);
    }
    assert_eq!(lim.last().unwrap()[3], 0.0);
}

#[test]
fn verify_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), "[ladder]\nlevels = [1.0, 100.0, 10000.0]\n");
    let ra = lqmfg(&["verify", "--threads", "2"], &cfg, a.path());
    let rb = lqmfg(&["verify"], &cfg, b.path());
    assert_eq!(ra.status.code(), rb.status.code());
    assert_eq!(
        fs::read(a.path().join("report.json")).unwrap(),
        fs::read(b.path().join("report.json")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, fs::read_to_string(configs().join("default.toml")).unwrap().replace("100000.0, 1000000.0", "")).unwrap();
    let digest = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = Command::new(env!("CARGO_BIN_EXE_lqmfg"))
            .args(["solve", "--level", "10", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        read_csv(&out.join("level_10.csv")).0
    };
    assert_ne!(digest("1", "a"), digest("2", "b"));
    assert_eq!(digest("1", "a"), digest("1", "c"));
}
