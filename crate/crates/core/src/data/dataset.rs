//! Supervised samples and the train / validation / test split.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::series::{
    cases_from_ratio, ratio_input, ratio_targets, CountrySeries, HISTORY_DAYS, SMOOTHING_WINDOW,
    TEST_DAYS,
};
use crate::error::{Error, Result};
use crate::npi::NpiVector;

/// Quantities needed to turn a ratio on day n back into new cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseAnchor {
    pub population: f64,
    /// y_{n-1}
    pub prev_cumulative: f64,
    /// z_{n-1}
    pub prev_smoothed: f64,
    /// x_{n-K}
    pub lagged_cases: f64,
    /// x_n
    pub new_cases: f64,
}

impl CaseAnchor {
    pub fn cases_for(&self, ratio: f64) -> f64 {
        cases_from_ratio(
            ratio,
            self.population,
            self.prev_cumulative,
            self.prev_smoothed,
            self.lagged_cases,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub country: String,
    pub date: NaiveDate,
    /// Index of the target day within the country series.
    pub day: usize,
    /// NPI levels for days n-21 .. n-1, oldest first.
    pub actions: Vec<NpiVector>,
    /// Ratio history for days n-21 .. n-1, clipped, oldest first.
    pub ratios: Vec<f64>,
    /// Target used for fitting (clipped outside the test split).
    pub target: f64,
    pub raw_target: f64,
    pub anchor: CaseAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub history: usize,
    pub clip_max: f64,
    pub test_days: usize,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            history: HISTORY_DAYS,
            clip_max: 2.0,
            test_days: TEST_DAYS,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TrainingSample>,
    pub validation: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &TrainingSample> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }
}

/// Emits every sample of one country, with unclipped targets, in day order.
pub fn country_samples(series: &CountrySeries, history: usize, clip_max: f64) -> Result<Vec<TrainingSample>> {
    let ratios = ratio_targets(series)?;
    let z = series.smoothed();
    let x = series.new_cases_f64();
    let y = series.cumulative();
    let first_target = SMOOTHING_WINDOW + history;
    let mut out = Vec::new();
    for n in first_target..series.len() {
        let Some(raw) = ratios[n] else { continue };
        let window = n - history..n;
        out.push(TrainingSample {
            country: series.id.clone(),
            date: series.dates[n],
            day: n,
            actions: series.npis[window.clone()].to_vec(),
            ratios: window.map(|d| ratio_input(ratios[d], z[d], clip_max)).collect(),
            target: raw,
            raw_target: raw,
            anchor: CaseAnchor {
                population: series.population as f64,
                prev_cumulative: y[n - 1] as f64,
                prev_smoothed: z[n - 1].expect("defined when ratio is"),
                lagged_cases: x[n - SMOOTHING_WINDOW],
                new_cases: x[n],
            },
        });
    }
    Ok(out)
}

/// Builds samples for all countries, withholds each country's last
/// `test_days` calendar days, clips the remaining targets and splits them
/// into train / validation with a seeded shuffle.
pub fn build_dataset(series: &BTreeMap<String, CountrySeries>, cfg: &DatasetConfig) -> Result<DatasetSplit> {
    if series.is_empty() {
        return Err(Error::Empty("no country series".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_frac) {
        return Err(Error::Config(format!("val_frac {} outside [0, 1)", cfg.val_frac)));
    }
    let mut rest = Vec::new();
    let mut test = Vec::new();
    for s in series.values() {
        let test_start = s.len().saturating_sub(cfg.test_days);
        for mut sample in country_samples(s, cfg.history, cfg.clip_max)? {
            if sample.day >= test_start {
                test.push(sample);
            } else {
                sample.target = sample.raw_target.clamp(0.0, cfg.clip_max);
                rest.push(sample);
            }
        }
    }
    if rest.is_empty() && test.is_empty() {
        return Err(Error::Empty("no samples could be built".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rest.shuffle(&mut rng);
    let n_val = (rest.len() as f64 * cfg.val_frac).round() as usize;
    let train = rest.split_off(n_val);
    Ok(DatasetSplit {
        train,
        validation: rest,
        test,
        split_seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn synthetic_series(id: &str, days: usize, seed: u64) -> CountrySeries {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = NaiveDate::from_ymd_opt(2020, 2, 1).unwrap();
        let mut cases = Vec::new();
        let mut level = 5.0f64;
        for _ in 0..days {
            level *= rng.random_range(0.85..1.2);
            cases.push(level.round().max(1.0) as u64);
        }
        CountrySeries {
            id: id.into(),
            name: id.into(),
            population: 10_000_000,
            dates: (0..days).map(|i| start + chrono::Duration::days(i as i64)).collect(),
            new_cases: cases,
            npis: (0..days)
                .map(|i| NpiVector::saturating([(i / 10) as i64; 8]))
                .collect(),
            flags: vec![],
        }
    }

    #[test]
    fn thirty_six_usable_days_give_one_training_window() {
        let s = synthetic_series("A", 36 + SMOOTHING_WINDOW, 1);
        assert_eq!(s.usable_days(), 36);
        let map = BTreeMap::from([(s.id.clone(), s)]);
        let split = build_dataset(&map, &DatasetConfig::default()).unwrap();
        assert_eq!(split.train.len() + split.validation.len(), 1);
        assert_eq!(split.test.len(), 14);
    }

    #[test]
    fn windows_are_aligned_oldest_first() {
        let s = synthetic_series("A", 60, 2);
        let samples = country_samples(&s, HISTORY_DAYS, 2.0).unwrap();
        let first = &samples[0];
        assert_eq!(first.actions.len(), 21);
        assert_eq!(first.actions[0], s.npis[first.day - 21]);
        assert_eq!(first.actions[20], s.npis[first.day - 1]);
    }

    #[test]
    fn training_targets_clipped_test_targets_raw() {
        let mut s = synthetic_series("A", 80, 3);
        // Force a large jump inside the training region and the test region.
        s.new_cases[40] *= 40;
        s.new_cases[75] *= 40;
        let map = BTreeMap::from([(s.id.clone(), s)]);
        let split = build_dataset(&map, &DatasetConfig::default()).unwrap();
        let fit: Vec<_> = split.train.iter().chain(&split.validation).collect();
        assert!(fit.iter().any(|t| t.raw_target > 2.0 && t.target == 2.0));
        assert!(fit.iter().all(|t| t.target <= 2.0));
        assert!(split.test.iter().any(|t| t.target > 2.0));
        assert!(split.test.iter().all(|t| t.target == t.raw_target));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let map: BTreeMap<_, _> = (0..4)
            .map(|i| {
                let s = synthetic_series(&format!("C{i}"), 90, i);
                (s.id.clone(), s)
            })
            .collect();
        let cfg = DatasetConfig { seed: 9, ..Default::default() };
        let a = build_dataset(&map, &cfg).unwrap();
        let b = build_dataset(&map, &cfg).unwrap();
        assert_eq!(a, b);
        let total: usize = map
            .values()
            .map(|s| country_samples(s, 21, 2.0).unwrap().len())
            .sum();
        assert_eq!(a.len(), total);
        let mut keys: Vec<_> = a.all().map(|s| (s.country.clone(), s.day)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), total);
        let c = build_dataset(&map, &DatasetConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(
            build_dataset(&BTreeMap::new(), &DatasetConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn anchor_reconstructs_cases() {
        let s = synthetic_series("A", 70, 5);
        for t in country_samples(&s, 21, 2.0).unwrap() {
            let x = t.anchor.cases_for(t.raw_target);
            assert!((x - t.anchor.new_cases).abs() <= 1e-9 * t.anchor.new_cases.max(1.0));
        }
    }
}
