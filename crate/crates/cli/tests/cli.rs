use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asian-bound"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json_out(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn three_atom_files(dir: &Path) -> (String, String) {
    (
        write(dir, "m.json", r#"{"atoms": [-1, 0, 1], "weights": [0.25, 0.25, 0.5]}"#),
        write(dir, "p.json", r#"{"kind": "call_spread", "k1": -0.1, "k2": 0.5}"#),
    )
}

#[test]
fn oracle_at_maturity_prints_the_payoff() {
    let v = json_out(&run(&["oracle", "--t", "1", "--a", "0.3", "--beta", "0.2", "--gamma", "0.3"]));
    assert!((v["value"].as_f64().unwrap() - 0.4).abs() < 1e-15);
    assert!(v["region"].is_null());
}

#[test]
fn oracle_reference_point() {
    let v = json_out(&run(&["oracle", "--beta", "0.25", "--gamma", "0.5"]));
    assert!((v["value"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(v["region"], "iii");
    assert_eq!(v["manifest"]["command"], "oracle");
}

#[test]
fn oracle_rejects_strikes_outside_the_box() {
    let out = run(&["oracle", "--beta", "0.2", "--gamma", "0.2", "--k1", "1.5", "--k2", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["price", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn compare_reference_instance_reconciles() {
    let v = json_out(&run(&["compare", "--grid", "40", "--paths", "20000", "--json"]));
    assert_eq!(v["passed"], true);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4, "{rows:?}");
    assert!(rows[0]["check"].as_str().unwrap().contains("call-spread oracle"));
    assert!((v["oracle"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn compare_failure_exits_one() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", r#"{"atoms": [-1, 1], "weights": [0.3, 0.7]}"#);
    let p = write(dir.path(), "p.json", r#"{"kind": "call_spread", "k1": 0, "k2": 0.5}"#);
    // At three cells per edge the interpolated value misses 7/15 by ~0.02.
    let out = run(&[
        "compare", "--measure", &m, "--payoff", &p, "--allow-negative", "--grid", "3", "--tolerance", "1e-3", "--paths", "2000",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("reconciliation failed: solver vs two-atom oracle"), "{stderr}");
}

#[test]
fn surface_has_one_row_per_node_and_planar_regions() {
    let out = run(&["surface", "--grid", "60", "--regions"]);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(reader.headers().unwrap(), vec!["beta", "gamma", "value", "region"]);
    let rows: Vec<(f64, f64, f64, String)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].to_string())
        })
        .collect();
    assert_eq!(rows.len(), 61 * 62 / 2);
    assert!(rows.iter().all(|r| r.2 >= -1e-12 && r.2 <= 0.6 + 1e-12));
    for label in ["i", "iii", "iv"] {
        let pts: Vec<_> = rows.iter().filter(|r| r.3 == label).collect();
        assert!(pts.len() >= 3, "region {label} has {} nodes", pts.len());
        assert!(plane_residual(&pts) < 1e-9, "region {label} is not planar");
    }
    let manifest: Value = serde_json::from_slice(out.stderr.trim_ascii()).expect("manifest on stderr");
    assert_eq!(manifest["command"], "surface");
}

/// Largest residual of the least-squares plane `v = c0 + c1 beta + c2 gamma`.
fn plane_residual(pts: &[&(f64, f64, f64, String)]) -> f64 {
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for p in pts {
        let x = [1.0, p.0, p.1];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += x[i] * x[j];
            }
            atb[i] += x[i] * p.2;
        }
    }
    let c = solve3(ata, atb);
    pts.iter()
        .map(|p| (c[0] + c[1] * p.0 + c[2] * p.1 - p.2).abs())
        .fold(0.0, f64::max)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

#[test]
fn calibrate_recovers_the_measure() {
    let dir = TempDir::new().unwrap();
    // Prices of 0.5 δ_1 + 0.5 δ_3 at strikes 0..4.
    let quotes = write(dir.path(), "q.csv", "strike,price\n0,2\n1,1\n2,0.5\n3,0\n4,0\n");
    let out_path = dir.path().join("m.json");
    let out = run(&["calibrate", "--quotes", &quotes, "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let atoms: Vec<f64> = serde_json::from_value(m["atoms"].clone()).unwrap();
    let weights: Vec<f64> = serde_json::from_value(m["weights"].clone()).unwrap();
    for (x, w) in atoms.iter().zip(&weights) {
        let expected = if *x == 1.0 || *x == 3.0 { 0.5 } else { 0.0 };
        assert!((w - expected).abs() < 1e-12, "weight {w} at {x}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn price_then_simulate_from_surface() {
    let dir = TempDir::new().unwrap();
    let (m, p) = three_atom_files(dir.path());
    let policy = dir.path().join("policy.json");
    let v = json_out(&run(&[
        "price", "--measure", &m, "--payoff", &p, "--allow-negative", "--grid", "40",
        "--policy-out", policy.to_str().unwrap(),
    ]));
    assert!((v["value"].as_f64().unwrap() - 0.5).abs() < 1e-2);
    assert!(v["policy"]["split_targets"].as_array().unwrap().len() >= 2);
    assert_eq!(v["manifest"]["inputs"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("policy.json.manifest.json").exists());

    let s = json_out(&run(&[
        "simulate", "--measure", &m, "--payoff", &p, "--allow-negative", "--policy", "from-surface",
        "--policy-file", policy.to_str().unwrap(), "--paths", "20000", "--seed", "3",
    ]));
    let mean = s["summary"]["mean_payoff"].as_f64().unwrap();
    let se = s["summary"]["std_error"].as_f64().unwrap();
    assert!((mean - 0.5).abs() <= 3.0 * se + 1e-2, "{mean} ± {se}");
}

#[test]
fn price_requires_a_measure() {
    let out = run(&["price", "--payoff", "p.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--measure"));
}

#[test]
fn from_surface_needs_a_policy_file() {
    let dir = TempDir::new().unwrap();
    let (m, p) = three_atom_files(dir.path());
    let out = run(&["simulate", "--measure", &m, "--payoff", &p, "--allow-negative", "--policy", "from-surface"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_and_dumps_paths() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", r#"{"atoms": [0, 2], "weights": [0.5, 0.5]}"#);
    let p = write(dir.path(), "p.json", r#"{"kind": "call", "strike": 1}"#);
    let dump = dir.path().join("paths.csv");
    let args = |threads: &str| {
        let mut c = bin();
        c.env("MVM_THREADS", threads).args([
            "simulate", "--measure", &m, "--payoff", &p, "--policy", "convex", "--paths", "3000", "--seed", "9", "--check",
            "--dump-paths", dump.to_str().unwrap(),
        ]);
        json_out(&c.output().unwrap())
    };
    let (a, b) = (args("1"), args("2"));
    assert_eq!(a["summary"], b["summary"]);
    assert_eq!(a["manifest"]["seed"], 9);
    assert_eq!(b["manifest"]["threads"], 2);
    let passed = ["weight_martingale", "terminal_law", "y_martingale", "termination"]
        .iter()
        .all(|k| a["checks"][k]["passed"] == true);
    assert!(passed, "{}", a["checks"]);
    let text = std::fs::read_to_string(&dump).unwrap();
    assert!(text.starts_with("path_id,t,S,A\n"));
    assert!(dir.path().join("paths.csv.manifest.json").exists());
}

#[test]
fn spread_policy_rejects_other_supports() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", r#"{"atoms": [0, 2], "weights": [0.5, 0.5]}"#);
    let p = write(dir.path(), "p.json", r#"{"kind": "call_spread", "k1": 0.5, "k2": 1}"#);
    let out = run(&["simulate", "--measure", &m, "--payoff", &p, "--policy", "spread"]);
    assert_eq!(out.status.code(), Some(2));
}
