#![allow(dead_code)]

use chrono::NaiveDate;
use esp_core::data::{CaseAnchor, TrainingSample};
use esp_core::npi::{NpiVector, NPI_COUNT, NPI_MAX_LEVELS};
use rand::Rng;

pub fn random_npis<R: Rng>(rng: &mut R) -> NpiVector {
    let mut l = [0i64; NPI_COUNT];
    for (k, v) in l.iter_mut().enumerate() {
        *v = rng.random_range(0..=NPI_MAX_LEVELS[k] as i64);
    }
    NpiVector::saturating(l)
}

pub fn random_sample<R: Rng>(rng: &mut R, target: f64) -> TrainingSample {
    TrainingSample {
        country: "SYN".into(),
        date: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
        day: 0,
        actions: (0..21).map(|_| random_npis(rng)).collect(),
        ratios: (0..21).map(|_| rng.random_range(0.0..2.0)).collect(),
        target,
        raw_target: target,
        anchor: CaseAnchor {
            population: 1e6,
            prev_cumulative: 0.0,
            prev_smoothed: 1.0,
            lagged_cases: 1.0,
            new_cases: 1.0,
        },
    }
}
