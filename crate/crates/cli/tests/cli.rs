use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = "\
hidden_sizes = [6]
num_classes = 3
epochs = 1
local_size = 2
batch_size = 2
iterations = 15
trials = 1
seed = 5
";

fn gradinv(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gradinv"));
    cmd.args(args).env_remove("GRADINV_SEED");
    if let Some(s) = env_seed {
        cmd.env("GRADINV_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, format!("{QUICK}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("results.csv")).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn simulate_then_attack_saved_observation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("sim");
    let stdout = ok(&gradinv(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()], None));
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(summary["local_steps"], 1);
    assert!(out.join("observation.json").exists());
    assert!(out.join("client_1_truth.pgm").exists());

    let obs = out.join("observation.json");
    let stdout = ok(&gradinv(
        &["attack", "--config", &cfg, "--out", out.to_str().unwrap(), "--observation", obs.to_str().unwrap()],
        None,
    ));
    assert!(stdout.contains("\"variant\":\"nlsme\""));
    assert_eq!(fs::read_to_string(out.join("nlsme_t0_history.csv")).unwrap().lines().count(), 16);
    assert!(out.join("nlsme_t0_1_recon.pgm").exists());
}

#[test]
fn attack_without_observation_runs_one_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "variant = \"sme\"\nsweep_epochs = [1, 2]\n");
    ok(&gradinv(&["attack", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None));
    let rows = rows(dir.path());
    assert_eq!(rows.len(), 1);
    assert!(rows[0].contains(",sme,"));
}

#[test]
fn ablate_runs_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let stdout = ok(&gradinv(&["ablate", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--jobs", "2"], None));
    assert_eq!(stdout.lines().count(), 4);
    let rows = rows(dir.path());
    assert_eq!(rows.len(), 4);
    let flags: Vec<String> = rows.iter().map(|r| r.split(',').skip(5).take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(flags, ["sme,false,false", "nlsme,false,true", "nlsme,true,false", "nlsme,true,true"]);
}

#[test]
fn seed_comes_from_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep_variants = [\"sme\"]\n");
    let seed_of = |args: &[&str], env: Option<&str>| {
        let out = dir.path().join("o");
        let mut full = vec!["sweep", "--config", &cfg, "--out", out.to_str().unwrap()];
        full.extend_from_slice(args);
        ok(&gradinv(&full, env));
        rows(&out)[0].split(',').nth(9).unwrap().to_string()
    };
    assert_eq!(seed_of(&[], None), "5");
    assert_eq!(seed_of(&[], Some("42")), "42");
    assert_eq!(seed_of(&["--seed", "7"], Some("42")), "7");
}

#[test]
fn bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epoch = 3\n");
    let out = gradinv(&["sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let cfg = write_config(dir.path(), "sweep_variants = [\"magic\"]\n");
    assert!(!gradinv(&["sweep", "--config", &cfg], None).status.success());
    assert!(!gradinv(&["sweep", "--config", "/nonexistent.toml"], None).status.success());
    assert!(!gradinv(&["frobnicate"], None).status.success());
}
