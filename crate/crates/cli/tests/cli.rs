use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pik_cli::config::ScenarioConfig;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pik(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pik")).args(args).output().expect("pik runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A copy of a shipped config with `edit` applied, written into `dir`.
fn variant(dir: &TempDir, name: &str, edit: impl FnOnce(&mut toml::Table)) -> String {
    let text = std::fs::read_to_string(configs().join(name)).unwrap();
    let mut table: toml::Table = text.parse().unwrap();
    edit(&mut table);
    let path = dir.path().join(name);
    std::fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn set(table: &mut toml::Table, section: &str, key: &str, value: toml::Value) {
    table.get_mut(section).and_then(|s| s.as_table_mut()).unwrap().insert(key.into(), value);
}

fn short(dir: &TempDir, name: &str, horizon: f64) -> String {
    variant(dir, name, |t| set(t, "simulation", "horizon", horizon.into()))
}

fn all_finite(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        serde_json::Value::Array(a) => a.iter().all(all_finite),
        serde_json::Value::Object(o) => o.values().all(all_finite),
        _ => true,
    }
}

fn column(csv_text: &str, name: &str) -> Vec<Option<f64>> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().ok()).collect()
}

#[test]
fn certify_writes_a_finite_certificate() {
    let dir = TempDir::new().unwrap();
    let cfg = configs().join("minimal.toml");
    let out = pik(&["certify", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cert: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["certified"], true);
    assert!(cert["eta_inf"].as_f64().unwrap() > 0.0);
    assert!(all_finite(&cert));
}

#[test]
fn certify_to_stdout_is_the_same_document() {
    let cfg = configs().join("minimal.toml");
    let a = pik(&["certify", "--config", cfg.to_str().unwrap()]);
    let b = pik(&["certify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    serde_json::from_slice::<serde_json::Value>(&a.stdout).unwrap();
}

#[test]
fn nested_tubes_are_required() {
    let dir = TempDir::new().unwrap();
    let cfg = variant(&dir, "minimal.toml", |t| set(t, "region", "theta_prime", toml::Value::Array(vec![0.04.into()])));
    let out = pik(&["certify", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = variant(&dir, "minimal.toml", |t| set(t, "simulation", "stpe", 0.1.into()));
    let out = pik(&["certify", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpe"));
}

#[test]
fn singular_region_is_infeasible() {
    let cfg = configs().join("singular.toml");
    let out = pik(&["certify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let all = [out.stdout, out.stderr].concat();
    assert!(String::from_utf8_lossy(&all).contains("singularity_in_region"));
}

#[test]
fn simulate_writes_fixed_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = short(&dir, "minimal.toml", 1.0);
    let out_dir = dir.path().join("out");
    let out = pik(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("t,q_1,q_2,phi_1,u_1,u_2"));
    let times: Vec<f64> = column(&text, "t").into_iter().map(Option::unwrap).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    assert!((times.last().unwrap() - 1.0).abs() < 1e-9);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("simulation.json")).unwrap()).unwrap();
    assert_eq!(report["tube"]["contained_outer"], true);
    assert_eq!(report["samples"].as_u64().unwrap() as usize, times.len());
}

#[test]
fn oracle_adds_a_distance_column() {
    let dir = TempDir::new().unwrap();
    let cfg = short(&dir, "minimal.toml", 0.5);
    let out_dir = dir.path().join("out");
    let out = pik(&["simulate", "--config", &cfg, "--oracle", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",oracle_distance"));
    let d: Vec<f64> = column(&text, "oracle_distance").into_iter().map(Option::unwrap).collect();
    assert_eq!(d[0], 0.0);
    assert!(d.iter().all(|x| x.is_finite() && *x < 1e-3));
}

#[test]
fn oversized_step_is_a_violation() {
    let dir = TempDir::new().unwrap();
    let cfg = short(&dir, "three_link.toml", 5.0);
    let out = pik(&["simulate", "--config", &cfg, "--step", "0.5"]);
    assert_eq!(code(&out), 3);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["divergence"].is_string() || report["tube"]["contained_outer"] == false);
}

#[test]
fn w_sweep_drives_dn_toward_one() {
    let dir = TempDir::new().unwrap();
    let cfg = short(&dir, "minimal.toml", 0.2);
    let out = pik(&["sweep", "--config", &cfg, "--param", "w", "--values", "1,0.1,0.01,0.001"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let dn: Vec<f64> = column(&text, "dn_c").into_iter().map(Option::unwrap).collect();
    assert_eq!(dn.len(), 4);
    assert!(dn.windows(2).all(|w| w[1] >= w[0]), "{dn:?}");
    assert!(dn[3] > 0.99 && dn[3] <= 1.0 + 1e-12, "{dn:?}");
}

#[test]
fn step_sweep_keeps_row_order() {
    let dir = TempDir::new().unwrap();
    let cfg = short(&dir, "minimal.toml", 0.2);
    let out = pik(&["sweep", "--config", &cfg, "--param", "step", "--values", "1e-2,1e-4,1e-3", "--format", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let values: Vec<f64> = rows.iter().map(|r| r["value"].as_f64().unwrap()).collect();
    assert_eq!(values, vec![1e-2, 1e-4, 1e-3]);
    assert!(rows.iter().all(|r| r["contained"] == true));
}

#[test]
fn verify_is_json_only() {
    let out = pik(&["verify", "--format", "csv"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn shipped_configs_round_trip() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ScenarioConfig::load(&path).unwrap();
        let again = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
    }
}
