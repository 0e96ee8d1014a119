mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use common::qp_oracle;
use qotlab::DiscreteMeasure;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/two_point_oracle.json");
const FIXTURE_TOL: f64 = 1e-6;

fn qotlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qotlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn reports(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("out/reports.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn error_record(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap().to_string();
    serde_json::from_str(&line).unwrap()
}

#[test]
fn singleton_run_is_trivial() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"instance": {"generator": {"family": "singleton"}}, "eps_list": [0.5, 0.1, 0.01], "output_dir": "out"}"#,
    );
    let out = qotlab(&["run", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let reps = reports(dir.path());
    assert!(!reps.is_empty());
    for r in &reps {
        assert_ne!(r["holds"], Value::Bool(false));
        let eps = r["context"]["epsilon"].as_f64().unwrap();
        let lhs = r["lhs"].as_f64().unwrap();
        // f ≡ ε, g ≡ 0 and the surrogate is the constant 0
        let want = match (
            r["bound_id"].as_str().unwrap(),
            r["context"]["variant"].as_str().unwrap(),
        ) {
            ("DensityUB" | "CostSandwich", _) | ("ApproxConj", "mu") => eps,
            _ => 0.0,
        };
        assert!((lhs - want).abs() < 1e-12, "{r}");
    }
    for file in ["rates.csv", "rates.json", "spread.csv"] {
        assert!(dir.path().join("out").join(file).exists());
    }
}

#[test]
fn two_point_matches_oracle_fixture() {
    let fixture: Value = serde_json::from_str(&fs::read_to_string(FIXTURE).unwrap()).unwrap();
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"instance": {"generator": {"family": "two_point"}}, "eps_list": [1.0, 0.1, 0.01], "output_dir": "out"}"#,
    );
    let out = qotlab(&["run", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let reps = reports(dir.path());
    for entry in fixture["entries"].as_array().unwrap() {
        let eps = entry["epsilon"].as_f64().unwrap();
        let find = |id: &str| {
            reps.iter()
                .find(|r| r["bound_id"] == id && r["context"]["epsilon"].as_f64() == Some(eps))
                .unwrap()
        };
        let cost = find("CostSandwich")["context"]["extra"]["transport_cost"]
            .as_f64()
            .unwrap();
        let density = find("DensityUB")["lhs"].as_f64().unwrap();
        assert!(
            (cost - entry["transport_cost"].as_f64().unwrap()).abs() <= FIXTURE_TOL,
            "ε={eps}"
        );
        assert!(
            (density - entry["max_density_eps"].as_f64().unwrap()).abs() <= FIXTURE_TOL,
            "ε={eps}"
        );
    }
}

/// Writes the fixture from the projected-gradient oracle; run with `--ignored` to refresh.
#[test]
#[ignore]
fn regenerate_two_point_fixture() {
    let m = DiscreteMeasure::new(&[vec![-1.0], vec![1.0]], &[0.5, 0.5]).unwrap();
    let entries: Vec<Value> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&eps| {
            let o = qp_oracle::solve(&m, &m, eps);
            let mut cost = 0.0;
            let mut density: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let p = o.plan[i * 2 + j];
                    cost += p * 0.5 * (m.atom(i)[0] - m.atom(j)[0]).powi(2);
                    density = density.max(eps * p / (m.weight(i) * m.weight(j)));
                }
            }
            serde_json::json!({ "epsilon": eps, "plan": o.plan, "transport_cost": cost, "max_density_eps": density })
        })
        .collect();
    let body =
        serde_json::json!({ "instance": "two_point", "source": "projected-gradient QP oracle", "entries": entries });
    fs::write(FIXTURE, serde_json::to_string_pretty(&body).unwrap() + "\n").unwrap();
}

#[test]
fn nonpositive_epsilon_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"instance": {"generator": {"family": "singleton"}}, "eps_list": [0.1, 0.0], "output_dir": "out"}"#,
    );
    let out = qotlab(&["run", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "invalid_config");
    assert_eq!(rec["exit_code"], 2);

    let ok = write_config(
        dir.path(),
        r#"{"instance": {"generator": {"family": "singleton"}}, "eps_list": [0.1], "output_dir": "out"}"#,
    );
    assert_eq!(qotlab(&["run", "-c", &ok, "--eps=0.1,-0.01"]).status.code(), Some(2));
    assert_eq!(qotlab(&["run", "-c", &ok, "--tol", "0"]).status.code(), Some(2));
    assert_eq!(
        qotlab(&["run", "-c", "/nonexistent/config.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn non_convergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"instance": {"generator": {"family": "grid", "dim": 1, "spacing": 0.1}},
            "eps_list": [0.01], "solver": {"max_sweeps": 1}, "output_dir": "out"}"#,
    );
    let out = qotlab(&["run", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "non_convergence");
}

#[test]
fn eps_override_and_thread_cap() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"instance": {"generator": {"family": "grid", "dim": 1, "spacing": 0.1}}, "eps_list": [0.1], "output_dir": "out"}"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_qotlab"))
        .args(["run", "-c", &cfg, "--eps", "0.2,0.1,0.05,0.02", "--tol", "1e-11"])
        .env("QOTLAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let eps: Vec<f64> = reports(dir.path())
        .iter()
        .filter(|r| r["bound_id"] == "DensityUB")
        .map(|r| r["context"]["epsilon"].as_f64().unwrap())
        .collect();
    assert_eq!(eps, vec![0.2, 0.1, 0.05, 0.02]);
    let csv = fs::read_to_string(dir.path().join("out/rates.csv")).unwrap();
    let fitted = csv.lines().skip(1).count();
    let svgs = fs::read_dir(dir.path().join("out"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(fitted, svgs);

    let bad = Command::new(env!("CARGO_BIN_EXE_qotlab"))
        .args(["run", "-c", &cfg])
        .env("QOTLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let body = r#"{"instance": {"generator": {"family": "random", "dim": 2, "atoms": 12, "target_atoms": 9}},
                   "eps_list": [0.3, 0.1, 0.03, 0.01], "output_dir": "out", "seed": 5}"#;
    let cfg = write_config(dir.path(), body);
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = Command::new(env!("CARGO_BIN_EXE_qotlab"))
            .args(["run", "-c", &cfg])
            .env("QOTLAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        outputs.push(fs::read(dir.path().join("out/reports.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn generate_families() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"[{"family": "grid", "dim": 1, "spacing": 0.02}, {"family": "affine", "dim": 1, "spacing": 0.02, "scale": 0.5}]"#,
    )
    .unwrap();
    let out_dir = dir.path().join("gen");
    let out = qotlab(&["gen", "-s", spec.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let grid = DiscreteMeasure::from_json(&fs::read_to_string(out_dir.join("grid_d1_h0.02_mu.json")).unwrap()).unwrap();
    assert_eq!(grid.len(), 101);
    let mu =
        DiscreteMeasure::from_json(&fs::read_to_string(out_dir.join("affine_d1_h0.02_a0.5_mu.json")).unwrap()).unwrap();
    let nu =
        DiscreteMeasure::from_json(&fs::read_to_string(out_dir.join("affine_d1_h0.02_a0.5_nu.json")).unwrap()).unwrap();
    assert_eq!(mu.len(), 101);
    assert_eq!(nu.len(), 101);
    for (x, y) in mu.atoms().zip(nu.atoms()) {
        assert!((0.5 * x[0] - y[0]).abs() < 1e-15);
    }

    // generated files run through the file source
    let cfg = write_config(
        dir.path(),
        r#"{"instance": {"files": {"mu": "gen/affine_d1_h0.02_a0.5_mu.json", "nu": "gen/affine_d1_h0.02_a0.5_nu.json",
            "map": "gen/affine_d1_h0.02_a0.5_map.json"}}, "eps_list": [0.1, 0.01], "output_dir": "out"}"#,
    );
    let run = qotlab(&["run", "-c", &cfg]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(reports(dir.path()).iter().any(|r| r["bound_id"] == "BoundaryBias"));

    fs::write(&spec, r#"{"family": "grid", "dim": 4, "spacing": 0.5}"#).unwrap();
    let rejected = qotlab(&["gen", "-s", spec.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(rejected.status.code(), Some(2));
}
