#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

pub fn repo_data(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(file)
}

/// Fresh scratch directory under cargo's per-target temp dir.
pub fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn esp(registry: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esp"))
        .arg("--registry")
        .arg(registry)
        .args(args)
        .output()
        .expect("esp binary runs")
}

/// Runs a subcommand with `--json` and returns its summary, failing on a non-zero exit.
pub fn esp_json(registry: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = esp(registry, &full);
    assert!(
        out.status.success(),
        "esp {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

pub fn ingest_snapshot(registry: &Path) -> Value {
    let csv = repo_data("snapshot.csv");
    let pop = repo_data("population.csv");
    esp_json(registry, &["ingest", "--csv", csv.to_str().unwrap(), "--population", pop.to_str().unwrap()])
}

/// A registry with a published manifest built by the CLI at reduced scale:
/// briefly trained predictor, small calibration fit and a short evolution.
pub fn published_registry() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let reg = scratch(&format!("published-{}", std::process::id()));
        ingest_snapshot(&reg);
        esp_json(&reg, &["train-predictor", "--max-epochs", "3", "--seed", "1"]);
        esp_json(&reg, &["fit-rio", "--restarts", "1", "--max-iter", "25", "--max-train", "300"]);
        let evo = esp_json(
            &reg,
            &["evolve", "--pop", "60", "--generations", "4", "--horizon", "30", "--countries", "3", "--seed", "1"],
        );
        assert_eq!(evo["representatives"], 20, "fixture front too small: {evo}");
        esp_json(&reg, &["publish"]);
        reg
    })
}
