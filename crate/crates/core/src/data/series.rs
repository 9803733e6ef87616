//! Per-country daily series and the derived smoothed / ratio quantities.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npi::NpiVector;

/// Moving-average window for smoothed cases.
pub const SMOOTHING_WINDOW: usize = 7;

/// Days of NPI and ratio history fed to the predictor.
pub const HISTORY_DAYS: usize = 21;

/// Days withheld at the end of each country for testing.
pub const TEST_DAYS: usize = 14;

/// Minimum number of ratio-bearing days for a country to be usable:
/// 21 days of history, 14 test days and one training target.
pub const MIN_USABLE_DAYS: usize = HISTORY_DAYS + TEST_DAYS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    /// Cumulative count decreased; the daily difference was floored at zero.
    NegativeRevision,
    /// Calendar day absent from the source, filled with zero cases.
    GapFilled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFlag {
    pub date: NaiveDate,
    pub kind: FlagKind,
}

/// Daily history of one country, contiguous in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySeries {
    pub id: String,
    pub name: String,
    pub population: u64,
    pub dates: Vec<NaiveDate>,
    pub new_cases: Vec<u64>,
    pub npis: Vec<NpiVector>,
    #[serde(default)]
    pub flags: Vec<QualityFlag>,
}

impl CountrySeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Cumulative recorded cases, the prefix sum of daily cases.
    pub fn cumulative(&self) -> Vec<u64> {
        self.new_cases
            .iter()
            .scan(0u64, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect()
    }

    pub fn new_cases_f64(&self) -> Vec<f64> {
        self.new_cases.iter().map(|&x| x as f64).collect()
    }

    /// Smoothed cases aligned with the series; `None` before the first full window.
    pub fn smoothed(&self) -> Vec<Option<f64>> {
        let x = self.new_cases_f64();
        let mut out = vec![None; x.len()];
        if let Ok(z) = smooth(&x, SMOOTHING_WINDOW) {
            for (j, v) in z.into_iter().enumerate() {
                out[j + SMOOTHING_WINDOW - 1] = Some(v);
            }
        }
        out
    }

    /// Days on which a ratio target can exist (index >= K).
    pub fn usable_days(&self) -> usize {
        self.len().saturating_sub(SMOOTHING_WINDOW)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.dates.first()?;
        let offset = (date - first).num_days();
        if offset < 0 || offset as usize >= self.len() {
            None
        } else {
            Some(offset as usize)
        }
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.dates.last().copied()
    }

    pub fn total_cases(&self) -> u64 {
        self.new_cases.iter().sum()
    }
}

/// Trailing K-day mean. Element `j` of the result is the mean of `x[j..j+k]`,
/// i.e. the smoothed value for day `j + k - 1`.
pub fn smooth(x: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("smoothing window must be positive".into()));
    }
    if x.len() < k {
        return Err(Error::InsufficientHistory {
            needed: k,
            got: x.len(),
        });
    }
    // Direct window sums: no running accumulator, so no drift over long series.
    Ok(x.windows(k)
        .map(|w| w.iter().sum::<f64>() / k as f64)
        .collect())
}

/// Growth ratio of smoothed cases corrected for the susceptible fraction:
/// `R_n = P z_n / ((P - y_{n-1}) z_{n-1})`.
pub fn growth_ratio(population: f64, prev_cumulative: f64, smoothed: f64, prev_smoothed: f64) -> f64 {
    population * smoothed / ((population - prev_cumulative) * prev_smoothed)
}

/// Inverse of [`growth_ratio`]: new cases on day n given a ratio, the previous
/// smoothed value, the previous cumulative count and the case count K days back.
pub fn cases_from_ratio(
    ratio: f64,
    population: f64,
    prev_cumulative: f64,
    prev_smoothed: f64,
    lagged_cases: f64,
) -> f64 {
    let k = SMOOTHING_WINDOW as f64;
    (ratio * (population - prev_cumulative) / population - 1.0) * k * prev_smoothed + lagged_cases
}

/// Ratio targets aligned with the series days. Days before K and days whose
/// previous smoothed value is zero carry `None`.
pub fn ratio_targets(series: &CountrySeries) -> Result<Vec<Option<f64>>> {
    if series.population == 0 {
        return Err(Error::Config(format!(
            "population for {} must be positive",
            series.id
        )));
    }
    let p = series.population as f64;
    let z = series.smoothed();
    let y = series.cumulative();
    let mut out = vec![None; series.len()];
    for n in SMOOTHING_WINDOW..series.len() {
        let (Some(zn), Some(zp)) = (z[n], z[n - 1]) else {
            continue;
        };
        if zp <= 0.0 {
            continue;
        }
        if y[n - 1] >= series.population {
            return Err(Error::PopulationExhausted {
                country: series.id.clone(),
                day: n,
            });
        }
        out[n] = Some(growth_ratio(p, y[n - 1] as f64, zn, zp));
    }
    Ok(out)
}

/// Value fed to a model as ratio history for `day`. Undefined ratios become 0
/// when nothing is circulating and the clip ceiling when cases appear from zero.
pub(crate) fn ratio_input(ratio: Option<f64>, smoothed: Option<f64>, clip_max: f64) -> f64 {
    match ratio {
        Some(r) => r.clamp(0.0, clip_max),
        None if smoothed.unwrap_or(0.0) > 0.0 => clip_max,
        None => 0.0,
    }
}
