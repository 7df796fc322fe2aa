use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn meerkat(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meerkat"))
        .args(args)
        .env("MEERKAT_OUTPUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, body: &str) -> String {
    let path = dir.path().join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const QUADRATIC: &str = r#"{"version": 1, "master_seed": 7,
  "model": {"kind": "pl-quadratic", "dim": 12, "condition": 5, "heterogeneity": 0.5},
  "mask": {"kind": "meerkat", "density": 0.5},
  "round": {"local_steps": 3, "rounds": 6, "clients": 3, "eta": 0.05},
  "compare": ["meerkat", "random", "full"]}"#;

const LOGISTIC_VP: &str = r#"{"version": 1, "master_seed": 1,
  "model": {"kind": "logistic", "features": 4, "classes": 2},
  "data": {"per_class": 40, "partition": {"kind": "single-label"}},
  "mask": {"density": 0.5},
  "round": {"local_steps": 4, "rounds": 2, "clients": 2, "eta": 0.01},
  "vp": {"calibration_steps": 30, "initial_steps": 10, "later_steps": 10}}"#;

#[test]
fn run_writes_metrics_with_one_row_per_round() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, QUADRATIC);
    let out = dir.path().join("out");
    let res = meerkat(&["run", &cfg], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("round,global_loss,gap,up_bytes,down_bytes"));
    assert_eq!(lines.count(), 7);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 6);
}

#[test]
fn run_twice_gives_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, QUADRATIC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(meerkat(&["run", &cfg], &a).status.success());
    assert!(meerkat(&["run", &cfg], &b).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn zero_density_exits_with_2_and_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &QUADRATIC.replace(r#""density": 0.5"#, r#""density": 0"#));
    let res = meerkat(&["run", &cfg], dir.path());
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("mask.density"));
}

#[test]
fn unknown_key_exits_with_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &QUADRATIC.replace(r#""master_seed": 7"#, r#""master_seed": 7, "seeed": 1"#));
    assert_eq!(meerkat(&["run", &cfg], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_config_is_not_a_success() {
    let dir = TempDir::new().unwrap();
    let res = meerkat(&["run", dir.path().join("nope.json").to_str().unwrap()], dir.path());
    assert!(!res.status.success());
}

#[test]
fn divergence_exits_with_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &QUADRATIC.replace(r#""eta": 0.05"#, r#""eta": 1e200"#));
    let out = dir.path().join("out");
    let res = meerkat(&["run", &cfg], &out);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn full_density_mask_lists_every_index() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &QUADRATIC.replace(r#""density": 0.5"#, r#""density": 1.0"#));
    let path = dir.path().join("masks/m.txt");
    let res = meerkat(&["mask", &cfg, "-o", path.to_str().unwrap()], dir.path());
    assert!(res.status.success());
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("dim=12"));
    let idx: Vec<usize> = lines.map(|l| l.parse().unwrap()).collect();
    assert_eq!(idx, (0..12).collect::<Vec<_>>());
}

#[test]
fn compare_writes_one_row_per_kind() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, QUADRATIC);
    let out = dir.path().join("out");
    let res = meerkat(&["compare", &cfg], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "mask_kind,final_loss,final_gap,global_gap,up_bytes,down_bytes");
    let kinds: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(kinds, ["meerkat", "random", "full"]);
}

#[test]
fn gradip_writes_one_trajectory_per_client() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, LOGISTIC_VP);
    let out = dir.path().join("out");
    let res = meerkat(&["gradip", &cfg], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for k in 0..2 {
        let csv = fs::read_to_string(out.join(format!("gradip_client_{k}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 31);
    }
    assert!(!out.join("gradip_client_2.csv").exists());
    assert!(out.join("classification.json").exists());
}

#[test]
fn gradip_without_vp_section_exits_with_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, QUADRATIC);
    assert_eq!(meerkat(&["gradip", &cfg], dir.path()).status.code(), Some(2));
}
