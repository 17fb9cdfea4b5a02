//! End-to-end checks of the `dice-sim` binary: exit codes, output files and
//! the timeline export.

use std::path::Path;
use std::process::{Command, Output};

use dice_sim::metrics::{from_json_str, CSV_COLUMNS};

const SMALL: &str = r#"
schema_version = 1
seed = 3

[model]
preset = "xl-toy"
num_layers = 4
num_steps = 6

[policy]
warmup = 1
period = 3
"#;

fn dice_sim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dice-sim"))
        .args(args)
        .current_dir(dir)
        .env_remove("DICE_SIM_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_report_and_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dice_sim(&["run", "--config", &cfg, "--out", "o", "--timeline"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/report.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next().unwrap(), CSV_COLUMNS.join(","));
    let row = rows.next().unwrap();
    assert!(row.contains("interweaved"));
    assert!(rows.next().is_none());

    // timeline events on each device tile [0, makespan] exactly
    let rel = row.rsplit(',').next().unwrap();
    let tl: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o").join(rel)).unwrap()).unwrap();
    let makespan = tl["makespan"].as_f64().unwrap();
    let devices = tl["num_devices"].as_u64().unwrap();
    let mut longest = 0.0f64;
    for d in 0..devices {
        let mut at = 0.0;
        for e in tl["events"].as_array().unwrap().iter().filter(|e| e["device"] == d) {
            let (s, t) = (e["start"].as_f64().unwrap(), e["end"].as_f64().unwrap());
            assert!((s - at).abs() < 1e-12 && t >= s);
            at = t;
        }
        longest = longest.max(at);
    }
    assert!((longest - makespan).abs() < 1e-12);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("label"));
}

#[test]
fn compare_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dice_sim(&["compare", "--config", &cfg, "--out", "o", "--format", "json"], dir.path());
    assert!(out.status.success());
    let reports = from_json_str(&std::fs::read_to_string(dir.path().join("o/compare.json")).unwrap()).unwrap();
    let strategies: Vec<_> = reports.iter().map(|r| r.strategy.name()).collect();
    assert_eq!(strategies, ["synchronous", "displaced", "interweaved", "interweaved"]);
    assert_eq!(reports[0].divergence, 0.0);
    assert_eq!(reports[0].speedup_vs_sync, 1.0);
    assert!(reports.iter().all(|r| r.model_hash == reports[0].model_hash));
}

#[test]
fn seed_comes_from_environment_when_absent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("seed = 3\n", ""));
    let run = |seed: &str, out: &str| {
        let output = Command::new(env!("CARGO_BIN_EXE_dice-sim"))
            .args(["run", "--config", &cfg, "--out", out])
            .current_dir(dir.path())
            .env("DICE_SIM_SEED", seed)
            .output()
            .unwrap();
        assert!(output.status.success());
        std::fs::read_to_string(dir.path().join(out).join("report.csv")).unwrap()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
    assert_eq!(run("1", "c"), run("1", "d"));
}

#[test]
fn malformed_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        "schema_version = 1\n[model]\nbatch = \"four\"\n",
        "schema_version = 2\n",
        "schema_version = 1\nunknown_key = 1\n",
        "schema_version = 1\n[policy]\nrefresh_interval = 0\n",
        "schema_version = 1\n[cluster]\nnum_devices = 3\n",
        "not toml at all [",
    ] {
        let cfg = write_config(dir.path(), bad);
        let out = dice_sim(&["run", "--config", &cfg, "--out", "o"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    let out = dice_sim(&["run", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = dice_sim(&["run", "--config", "missing.toml"], dir.path());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn numerical_blowup_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dice_sim(
        &["run", "--config", &cfg, "--out", "o", "--set", "model.step_size=1e300"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_passes_and_catches_injected_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dice_sim(&["validate", "--grid", "16"], dir.path());
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("16 configurations: 0 mismatches"));
    let bad = dice_sim(&["validate", "--grid", "16", "--inject-staleness", "1"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("first divergence"));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let single = dice_sim::experiment::load_config(&root.join("xl-toy.toml"), &[]).unwrap();
    single.validate().unwrap();
    assert_eq!(single.run_spec(0).unwrap().model.batch, 8);
    let sweep = dice_sim::experiment::load_config(&root.join("sweep.toml"), &[]).unwrap();
    sweep.validate().unwrap();
    let specs = sweep.sweep_specs(0).unwrap();
    assert_eq!(specs.len(), 18);
    assert_eq!(specs[0].label, "batch=4 R=1 strategy=displaced");
}
