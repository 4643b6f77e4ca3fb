use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(name)
}

fn dcmg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmg"))
        .args(args)
        .env_remove("DCMG_PRECISION")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const LONE_GRID_FORMING: &str = r#"{"microgrids": [{"name": "lone", "v_ref": 1000.0, "kappa": 5000.0,
  "nodes": [{"id": 1, "kind": "grid_forming", "c_f": 0.0022,
    "filter": {"l_f": 0.0018, "r_f": 0.2},
    "gains": {"k_alpha": 0.5644, "k_beta": -0.88, "k_gamma": 23.76},
    "load": {"y": 0.01}}]}]}"#;

const TWIN_FOLLOWERS: &str = r#"{"microgrids": [{"v_ref": 1000.0, "kappa": 5000.0,
  "nodes": [
    {"id": 1, "kind": "grid_forming", "c_f": 0.0022, "filter": {"l_f": 0.0018, "r_f": 0.2},
     "gains": {"k_alpha": 0.5644, "k_beta": -0.88, "k_gamma": 23.76}},
    {"id": 2, "kind": "grid_following", "c_f": 0.0022, "filter": {"l_f": 0.0018, "r_f": 0.2},
     "gains": {"k_alpha": 1.0, "k_beta": -0.556, "k_gamma": 0.162}, "cost": {"q": 1.0}, "tau": 10.0},
    {"id": 3, "kind": "grid_following", "c_f": 0.0022, "filter": {"l_f": 0.0018, "r_f": 0.2},
     "gains": {"k_alpha": 1.0, "k_beta": -0.556, "k_gamma": 0.162}, "cost": {"q": 1.0}, "tau": 10.0}],
  "lines": [{"from": 1, "to": 2, "r_pi": 0.07, "l_pi": 2e-6}, {"from": 2, "to": 3, "r_pi": 0.07, "l_pi": 2e-6}]}]}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn dispatch_shipped_costs() {
    let out = dcmg(&["dispatch", s(&config("two_microgrids.json")), "--total", "16000"]);
    assert!(out.status.success());
    let v = json(&out);
    let lambda = v["lambda"].as_f64().unwrap();
    assert!((lambda - 13811.8577).abs() < 1e-3);
    let total: f64 = v["dispatch"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["p"].as_f64().unwrap())
        .sum();
    assert!((total - 16000.0).abs() < 1e-9);
}

#[test]
fn dispatch_equal_costs_split_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "twin.json", TWIN_FOLLOWERS);
    let v = json(&dcmg(&["dispatch", s(&cfg), "--total", "10"]));
    let p: Vec<f64> = v["dispatch"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["p"].as_f64().unwrap())
        .collect();
    assert_eq!(p, vec![5.0, 5.0]);
    let v = json(&dcmg(&["dispatch", s(&cfg), "--total", "0"]));
    assert_eq!(v["lambda"].as_f64().unwrap(), 0.0);
}

#[test]
fn dispatch_without_followers_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lone.json", LONE_GRID_FORMING);
    let out = dcmg(&["dispatch", s(&cfg), "--total", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_json_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"microgrids\": [\n  {\"v_ref\": ,}\n]}");
    let out = dcmg(&[
        "simulate",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--horizon",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn economic_regime_needs_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcmg(&[
        "simulate",
        s(&config("reduced_two_node.json")),
        "--regime",
        "economic",
        "--out",
        s(&dir.path().join("o")),
        "--horizon",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_equilibrium_is_an_integration_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "heavy.json",
        &LONE_GRID_FORMING.replace(r#"{"y": 0.01}"#, r#"{"p": 1e9}"#),
    );
    let out = dcmg(&[
        "simulate",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--horizon",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn simulate_reduced(out: &Path, precision: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dcmg"));
    cmd.args([
        "simulate",
        s(&config("reduced_two_node.json")),
        "--out",
        s(out),
        "--horizon",
        "0.5",
        "--sample-hz",
        "20",
        "--svg",
    ]);
    match precision {
        Some(p) => cmd.env("DCMG_PRECISION", p),
        None => cmd.env_remove("DCMG_PRECISION"),
    };
    cmd.output().unwrap()
}

#[test]
fn simulate_writes_manifested_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(simulate_reduced(&out, None).status.success());
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let cfg_bytes = fs::read(config("reduced_two_node.json")).unwrap();
    assert_eq!(manifest["config"]["sha256"], hex(&cfg_bytes));
    let listed: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| {
            let name = o["path"].as_str().unwrap();
            assert_eq!(o["sha256"], hex(&fs::read(out.join(name)).unwrap()));
            name
        })
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed_sorted: Vec<String> = listed.iter().map(|s| s.to_string()).collect();
    listed_sorted.sort();
    assert_eq!(on_disk, listed_sorted);

    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("time,reduced.v.1,reduced.v.2,"));
    assert!(header.ends_with(",balance_residual"));
    assert_eq!(lines.count(), 11);
    for name in ["voltages.csv", "injections.csv", "prices.csv", "tie_currents.csv"] {
        assert!(fs::read_to_string(out.join(name)).unwrap().starts_with("time"));
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["regime"], "electric_only");
    assert_eq!(summary["intervals"].as_array().unwrap().len(), 1);
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(simulate_reduced(&a, None).status.success());
    assert!(simulate_reduced(&b, None).status.success());
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn precision_variable_controls_digits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    assert!(simulate_reduced(&out, Some("4")).status.success());
    let prices = fs::read_to_string(out.join("prices.csv")).unwrap();
    let first = prices.lines().nth(1).unwrap();
    assert_eq!(first.split(',').next().unwrap(), "0.000e0");
    assert_eq!(
        simulate_reduced(&dir.path().join("q"), Some("0")).status.code(),
        Some(2)
    );
}

#[test]
fn certify_and_reverify() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("cert.json");
    let cfg = config("reduced_two_node.json");
    let env = config("reduced_envelope.json");
    let out = dcmg(&[
        "certify",
        s(&cfg),
        "--kind",
        "stability",
        "--envelope",
        s(&env),
        "--out",
        s(&cert),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cert.report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["margin"].as_f64().unwrap() <= -1e-6);
    assert!(dir.path().join("cert.json.manifest.json").exists());

    let first = dcmg(&["verify-cert", s(&cfg), "--cert", s(&cert)]);
    let second = dcmg(&["verify-cert", s(&cfg), "--cert", s(&cert)]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(json(&first), report);
}

#[test]
fn certify_infeasible_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lone.json", LONE_GRID_FORMING);
    let env = config("reduced_envelope.json");
    let env_text = fs::read_to_string(&env)
        .unwrap()
        .replace("\"p_nodes\": [2]", "\"p_nodes\": []");
    let env = write(dir.path(), "env.json", &env_text);
    let cert = dir.path().join("cert.json");
    let out = dcmg(&[
        "certify",
        s(&cfg),
        "--kind",
        "stability",
        "--envelope",
        s(&env),
        "--out",
        s(&cert),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!cert.exists());
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cert.report.json")).unwrap()).unwrap();
    assert!(report["best_margin"].as_f64().unwrap() > -1e-6);
    assert!(report["worst_parameters"].is_array());
}

#[test]
fn certify_refuses_oversized_vertex_sets() {
    let dir = tempfile::tempdir().unwrap();
    let env_text = fs::read_to_string(config("reduced_envelope.json"))
        .unwrap()
        .replace(",\n  \"p_nodes\": [2]", "");
    let env = write(dir.path(), "env.json", &env_text);
    let out = dcmg(&[
        "certify",
        s(&config("two_microgrids.json")),
        "--kind",
        "stability",
        "--envelope",
        s(&env),
        "--out",
        s(&dir.path().join("cert.json")),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn tampered_certificate_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("cert.json");
    let cfg = config("reduced_two_node.json");
    let env = config("reduced_envelope.json");
    assert!(dcmg(&[
        "certify",
        s(&cfg),
        "--kind",
        "stability",
        "--envelope",
        s(&env),
        "--out",
        s(&cert)
    ])
    .status
    .success());
    let mut value: Value = serde_json::from_str(&fs::read_to_string(&cert).unwrap()).unwrap();
    for x in value["s"].as_array_mut().unwrap() {
        *x = Value::from(-x.as_f64().unwrap());
    }
    let bad = write(dir.path(), "bad.json", &value.to_string());
    let out = dcmg(&["verify-cert", s(&cfg), "--cert", s(&bad)]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json(&out)["pass"], false);
}

#[test]
fn certify_refuses_too_many_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let mut nodes = vec![serde_json::json!({"id": 1, "kind": "grid_forming", "c_f": 0.0022,
        "filter": {"l_f": 0.0018, "r_f": 0.2},
        "gains": {"k_alpha": 0.5644, "k_beta": -0.88, "k_gamma": 23.76}})];
    let mut lines = Vec::new();
    for id in 2..=26u32 {
        nodes.push(serde_json::json!({"id": id, "kind": "load_only", "c_f": 0.0022}));
        lines.push(serde_json::json!({"from": id - 1, "to": id, "r_pi": 0.07, "l_pi": 2e-6}));
    }
    let cfg = serde_json::json!({"microgrids": [{"v_ref": 1000.0, "kappa": 5000.0, "nodes": nodes, "lines": lines}]});
    let cfg = write(dir.path(), "chain.json", &cfg.to_string());
    let env_text = fs::read_to_string(config("reduced_envelope.json"))
        .unwrap()
        .replace(",\n  \"p_nodes\": [2]", "");
    let env = write(dir.path(), "env.json", &env_text);
    let out = dcmg(&[
        "certify",
        s(&cfg),
        "--kind",
        "stability",
        "--envelope",
        s(&env),
        "--out",
        s(&dir.path().join("c.json")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("26 uncertain parameters"));
}
