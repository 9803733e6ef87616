//! Data ingestion, derived targets and the canonical dataset file.

pub mod dataset;
pub mod ingest;
pub mod series;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use dataset::{build_dataset, country_samples, CaseAnchor, DatasetConfig, DatasetSplit, TrainingSample};
pub use ingest::{load_csv, load_population, CsvSchema, IngestReport, PopulationTable};
pub use series::{
    cases_from_ratio, growth_ratio, ratio_targets, smooth, CountrySeries, FlagKind, QualityFlag,
    HISTORY_DAYS, MIN_USABLE_DAYS, SMOOTHING_WINDOW, TEST_DAYS,
};

use crate::error::{Error, Result};
use crate::npi::NpiVector;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub new_cases: u64,
    pub cumulative: u64,
    pub npis: NpiVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryRecord {
    pub id: String,
    pub name: String,
    pub population: u64,
    pub days: Vec<DayRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<QualityFlag>,
}

/// Versioned on-disk form of an ingested dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub source: String,
    pub countries: Vec<CountryRecord>,
}

impl DatasetFile {
    pub fn from_series(source: impl Into<String>, series: &BTreeMap<String, CountrySeries>) -> Self {
        let countries = series
            .values()
            .map(|s| {
                let cumulative = s.cumulative();
                CountryRecord {
                    id: s.id.clone(),
                    name: s.name.clone(),
                    population: s.population,
                    days: (0..s.len())
                        .map(|i| DayRecord {
                            date: s.dates[i],
                            new_cases: s.new_cases[i],
                            cumulative: cumulative[i],
                            npis: s.npis[i],
                        })
                        .collect(),
                    flags: s.flags.clone(),
                }
            })
            .collect();
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            source: source.into(),
            countries,
        }
    }

    pub fn to_series(&self) -> Result<BTreeMap<String, CountrySeries>> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: DATASET_SCHEMA_VERSION,
            });
        }
        let mut out = BTreeMap::new();
        for c in &self.countries {
            for pair in c.days.windows(2) {
                if pair[1].date != pair[0].date.succ_opt().unwrap_or(pair[0].date) {
                    return Err(Error::Config(format!(
                        "dataset days for {} are not contiguous at {}",
                        c.id, pair[1].date
                    )));
                }
            }
            out.insert(
                c.id.clone(),
                CountrySeries {
                    id: c.id.clone(),
                    name: c.name.clone(),
                    population: c.population,
                    dates: c.days.iter().map(|d| d.date).collect(),
                    new_cases: c.days.iter().map(|d| d.new_cases).collect(),
                    npis: c.days.iter().map(|d| d.npis).collect(),
                    flags: c.flags.clone(),
                },
            );
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// The `n` countries with the most recorded cases at the end of their series.
/// Ties are broken by id.
pub fn top_countries_by_cases(series: &BTreeMap<String, CountrySeries>, n: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, u64)> = series.iter().map(|(id, s)| (id, s.total_cases())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(n).map(|(id, _)| id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_file_round_trips_series() {
        let start = NaiveDate::from_ymd_opt(2020, 4, 1).unwrap();
        let s = CountrySeries {
            id: "X".into(),
            name: "Xland".into(),
            population: 1234,
            dates: (0..5).map(|i| start + chrono::Duration::days(i)).collect(),
            new_cases: vec![1, 0, 4, 2, 2],
            npis: vec![NpiVector::MAX; 5],
            flags: vec![],
        };
        let map = BTreeMap::from([("X".to_string(), s)]);
        let file = DatasetFile::from_series("unit", &map);
        assert_eq!(file.countries[0].days[4].cumulative, 9);
        let json = serde_json::to_string(&file).unwrap();
        let back: DatasetFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_series().unwrap(), map);
    }

    #[test]
    fn rejects_future_schema() {
        let file = DatasetFile {
            schema_version: 99,
            source: String::new(),
            countries: vec![],
        };
        assert!(matches!(file.to_series(), Err(Error::SchemaVersion { found: 99, .. })));
    }
}
