use std::path::PathBuf;

use esp_core::data::synth::{write_snapshot, SynthConfig};
use esp_core::data::{build_dataset, load_csv, load_population, CsvSchema, DatasetConfig, DatasetFile};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn pinned_snapshot_is_reproducible_from_its_generator() {
    let mut csv = Vec::new();
    let mut pop = Vec::new();
    write_snapshot(&SynthConfig::default(), &mut csv, &mut pop).unwrap();
    assert!(csv == std::fs::read(data_dir().join("snapshot.csv")).unwrap(), "snapshot.csv drifted from its generator");
    assert!(pop == std::fs::read(data_dir().join("population.csv")).unwrap(), "population.csv drifted from its generator");
}

#[test]
fn pinned_snapshot_ingests_with_enough_countries() {
    let population = load_population(data_dir().join("population.csv")).unwrap();
    let report = load_csv(data_dir().join("snapshot.csv"), &CsvSchema::default(), &population).unwrap();
    assert!(report.series.len() >= 20, "only {} usable countries", report.series.len());
    assert_eq!(report.dropped.len(), 2);
    assert!(report.missing_population.is_empty());

    let file = DatasetFile::from_series("snapshot.csv", &report.series);
    let back = DatasetFile::from_series("snapshot.csv", &file.to_series().unwrap());
    assert_eq!(serde_json::to_string(&file).unwrap(), serde_json::to_string(&back).unwrap());
}

#[test]
fn every_unclipped_sample_reconstructs_its_case_count() {
    let population = load_population(data_dir().join("population.csv")).unwrap();
    let report = load_csv(data_dir().join("snapshot.csv"), &CsvSchema::default(), &population).unwrap();
    let split = build_dataset(&report.series, &DatasetConfig::default()).unwrap();
    let mut checked = 0;
    for s in split.all().filter(|s| s.raw_target == s.target) {
        let back = s.anchor.cases_for(s.raw_target);
        let x = s.anchor.new_cases;
        assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0), "{} {}: {back} vs {x}", s.country, s.date);
        checked += 1;
    }
    assert!(checked > 1000);
}
