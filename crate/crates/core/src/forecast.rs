//! Autoregressive multi-day rollout with case-count recovery.
//!
//! A context anchored at start date `s` holds the NPIs for `s-21 ..= s-1`, the
//! ratios for `s-20 ..= s` and the raw cases for the 14 days ending at `s`. On
//! step `t` the action for day `s+t` (from a schedule or a policy) is shifted
//! into the NPI window, the model predicts the ratio for day `s+t+1`, and new
//! cases for that day are recovered from the ratio and the running case window.

use std::io::Write;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::series::ratio_input;
use crate::data::{ratio_targets, CountrySeries, HISTORY_DAYS, SMOOTHING_WINDOW};
use crate::error::{Error, Result};
use crate::npi::NpiVector;
use crate::predictor::RatioModel;

pub const MAX_HORIZON: usize = 365;

/// Window for the active-case estimate.
pub const ACTIVE_WINDOW: usize = 14;

/// Maps a 21-day ratio history to the NPIs for the current day.
pub trait Policy: Sync {
    fn prescribe(&self, ratios: &[f64]) -> NpiVector;
}

impl<F> Policy for F
where
    F: Fn(&[f64]) -> NpiVector + Sync,
{
    fn prescribe(&self, ratios: &[f64]) -> NpiVector {
        self(ratios)
    }
}

#[derive(Clone, Copy)]
pub enum Actions<'a> {
    Schedule(&'a [NpiVector]),
    Policy(&'a dyn Policy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastContext {
    pub country: String,
    /// First day whose NPIs come from the schedule or policy.
    pub start_date: NaiveDate,
    /// NPIs in force on `s-21 ..= s-1`.
    pub actions: Vec<NpiVector>,
    /// Ratios for `s-20 ..= s`.
    pub ratios: Vec<f64>,
    /// Raw daily cases for `s-13 ..= s`.
    pub recent_cases: Vec<f64>,
    /// Cumulative cases through `s`.
    pub cumulative: f64,
    pub population: f64,
}

impl ForecastContext {
    /// Context anchored at series index `start`.
    pub fn from_series(series: &CountrySeries, start: usize, clip_max: f64) -> Result<Self> {
        let earliest = HISTORY_DAYS.max(ACTIVE_WINDOW - 1);
        if start < earliest || start >= series.len() {
            return Err(Error::InsufficientHistory {
                needed: earliest + 1,
                got: start.min(series.len()) + 1,
            });
        }
        let ratios = ratio_targets(series)?;
        let z = series.smoothed();
        let x = series.new_cases_f64();
        Ok(Self {
            country: series.id.clone(),
            start_date: series.dates[start],
            actions: series.npis[start - HISTORY_DAYS..start].to_vec(),
            ratios: (start + 1 - HISTORY_DAYS..=start)
                .map(|d| ratio_input(ratios[d], z[d], clip_max))
                .collect(),
            recent_cases: x[start + 1 - ACTIVE_WINDOW..=start].to_vec(),
            cumulative: x[..=start].iter().sum(),
            population: series.population as f64,
        })
    }

    pub fn at_date(series: &CountrySeries, date: NaiveDate, clip_max: f64) -> Result<Self> {
        let idx = series.index_of(date).ok_or_else(|| Error::NotFound {
            kind: "date",
            id: date.to_string(),
        })?;
        Self::from_series(series, idx, clip_max)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what, got| {
            if got == HISTORY_DAYS {
                Ok(())
            } else {
                Err(Error::Shape {
                    what,
                    expected: HISTORY_DAYS,
                    got,
                })
            }
        };
        check("context actions", self.actions.len())?;
        check("context ratios", self.ratios.len())?;
        if self.recent_cases.len() < SMOOTHING_WINDOW {
            return Err(Error::Shape {
                what: "context cases",
                expected: ACTIVE_WINDOW,
                got: self.recent_cases.len(),
            });
        }
        if self.population <= 0.0 {
            return Err(Error::Config("population must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDay {
    pub date: NaiveDate,
    pub r_hat: f64,
    pub new_cases: f64,
    pub cumulative: f64,
    pub active: f64,
    /// NPIs applied on the preceding day, which drove this prediction.
    pub npis: NpiVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub country: String,
    pub start_date: NaiveDate,
    pub days: Vec<ForecastDay>,
}

impl ForecastResult {
    pub fn total_cases(&self) -> f64 {
        self.days.iter().map(|d| d.new_cases).sum()
    }

    pub fn new_cases(&self) -> Vec<f64> {
        self.days.iter().map(|d| d.new_cases).collect()
    }

    pub fn schedule(&self) -> Vec<NpiVector> {
        self.days.iter().map(|d| d.npis).collect()
    }

    /// CSV export with columns `date,r_hat,new_cases,cumulative,active`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Numerical(format!("csv write: {e}"));
        w.write_record(["date", "r_hat", "new_cases", "cumulative", "active"])
            .map_err(csv_err)?;
        for d in &self.days {
            w.write_record([
                d.date.to_string(),
                d.r_hat.to_string(),
                d.new_cases.to_string(),
                d.cumulative.to_string(),
                d.active.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Trailing sums over `window` days; the first days sum what is available.
pub fn active_cases(x: &[f64], window: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| x[(i + 1).saturating_sub(window)..=i].iter().sum())
        .collect()
}

/// Rollout driven by an arbitrary one-step function returning the ratio to
/// feed back. Used directly by the Monte-Carlo forecaster.
pub fn rollout_with<F>(ctx: &ForecastContext, horizon: usize, actions: Actions<'_>, mut step: F) -> Result<ForecastResult>
where
    F: FnMut(&[NpiVector], &[f64]) -> Result<f64>,
{
    ctx.validate()?;
    if horizon > MAX_HORIZON {
        return Err(Error::Config(format!("horizon {horizon} exceeds {MAX_HORIZON}")));
    }
    if let Actions::Schedule(s) = actions {
        if s.len() < horizon {
            return Err(Error::Shape {
                what: "npi schedule",
                expected: horizon,
                got: s.len(),
            });
        }
    }
    let k = SMOOTHING_WINDOW as f64;
    let p = ctx.population;
    let mut npi_window = ctx.actions.clone();
    let mut ratio_window = ctx.ratios.clone();
    let mut cases = ctx.recent_cases.clone();
    let mut cumulative = ctx.cumulative.min(p);
    let mut days = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let action = match actions {
            Actions::Schedule(s) => s[t],
            Actions::Policy(policy) => policy.prescribe(&ratio_window),
        };
        npi_window.remove(0);
        npi_window.push(action);

        let r_hat = step(&npi_window, &ratio_window)?;
        let tail = &cases[cases.len() - SMOOTHING_WINDOW..];
        let prev_smoothed = tail.iter().sum::<f64>() / k;
        let lagged = tail[0];
        let raw = (r_hat * (p - cumulative) / p - 1.0) * k * prev_smoothed + lagged;
        let new_cases = if raw.is_finite() { raw.max(0.0).min(p - cumulative) } else { 0.0 };
        cumulative += new_cases;
        cases.push(new_cases);

        ratio_window.remove(0);
        ratio_window.push(r_hat);

        let active = cases[cases.len().saturating_sub(ACTIVE_WINDOW)..].iter().sum();
        days.push(ForecastDay {
            date: ctx.start_date + Duration::days(t as i64 + 1),
            r_hat,
            new_cases,
            cumulative,
            active,
            npis: action,
        });
    }
    Ok(ForecastResult {
        country: ctx.country.clone(),
        start_date: ctx.start_date,
        days,
    })
}

pub fn rollout<M: RatioModel + ?Sized>(model: &M, ctx: &ForecastContext, horizon: usize, actions: Actions<'_>) -> Result<ForecastResult> {
    rollout_with(ctx, horizon, actions, |a, r| model.predict_ratio(a, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(cases: f64, cumulative: f64, population: f64) -> ForecastContext {
        ForecastContext {
            country: "T".into(),
            start_date: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
            actions: vec![NpiVector::ZERO; 21],
            ratios: vec![1.0; 21],
            recent_cases: vec![cases; 14],
            cumulative,
            population,
        }
    }

    fn unit(_: &[NpiVector], _: &[f64]) -> f64 {
        1.0
    }

    #[test]
    fn unit_ratio_keeps_constant_cases() {
        let c = ctx(50.0, 0.0, 1e15);
        let sched = vec![NpiVector::ZERO; 30];
        let f = rollout(&unit, &c, 30, Actions::Schedule(&sched)).unwrap();
        for d in &f.days {
            assert!((d.new_cases - 50.0).abs() < 1e-6, "{d:?}");
        }
        assert_eq!(f.days[0].date, NaiveDate::from_ymd_opt(2020, 5, 2).unwrap());
        assert!((f.days[29].active - 700.0).abs() < 1e-4);
    }

    #[test]
    fn prefix_consistency() {
        let c = ctx(20.0, 1000.0, 1e6);
        let model = |a: &[NpiVector], r: &[f64]| 0.9 + 0.01 * a[20].stringency() as f64 + 0.05 * r[20];
        let sched: Vec<_> = (0..2).map(|i| NpiVector::saturating([i; 8])).collect();
        let one = rollout(&model, &c, 1, Actions::Schedule(&sched)).unwrap();
        let two = rollout(&model, &c, 2, Actions::Schedule(&sched)).unwrap();
        assert_eq!(one.days[0], two.days[0]);
    }

    #[test]
    fn exhausted_population_yields_zero_cases() {
        let c = ctx(10.0, 1e5, 1e5);
        // Raw value: (R * 0 - 1) * 7 * 10 + 10 = -60, floored to 0.
        let sched = vec![NpiVector::ZERO; 5];
        let f = rollout(&unit, &c, 5, Actions::Schedule(&sched)).unwrap();
        assert!(f.days.iter().all(|d| d.new_cases == 0.0 && d.cumulative == 1e5));
    }

    #[test]
    fn cumulative_capped_at_population() {
        let c = ctx(1000.0, 9_000.0, 10_000.0);
        let big = |_: &[NpiVector], _: &[f64]| 50.0;
        let sched = vec![NpiVector::ZERO; 20];
        let f = rollout(&big, &c, 20, Actions::Schedule(&sched)).unwrap();
        let mut prev = 9_000.0;
        for d in &f.days {
            assert!(d.cumulative <= 10_000.0);
            assert!((d.cumulative - prev - d.new_cases).abs() < 1e-9);
            prev = d.cumulative;
        }
        assert_eq!(f.days.last().unwrap().cumulative, 10_000.0);
    }

    #[test]
    fn horizon_zero_and_short_schedule() {
        let c = ctx(1.0, 0.0, 1e6);
        let sched = vec![NpiVector::ZERO; 3];
        assert!(rollout(&unit, &c, 0, Actions::Schedule(&sched)).unwrap().days.is_empty());
        assert!(matches!(
            rollout(&unit, &c, 4, Actions::Schedule(&sched)),
            Err(Error::Shape { what: "npi schedule", .. })
        ));
        assert!(rollout(&unit, &c, 366, Actions::Schedule(&[NpiVector::ZERO; 400])).is_err());
    }

    #[test]
    fn policy_sees_latest_ratios() {
        let c = ctx(10.0, 0.0, 1e9);
        let policy = |r: &[f64]| {
            if r[20] > 1.0 {
                NpiVector::MAX
            } else {
                NpiVector::ZERO
            }
        };
        let model = |a: &[NpiVector], _: &[f64]| if a[20] == NpiVector::MAX { 0.8 } else { 1.2 };
        let f = rollout(&model, &c, 4, Actions::Policy(&policy)).unwrap();
        let s: Vec<_> = f.days.iter().map(|d| d.npis.stringency()).collect();
        assert_eq!(s, vec![0, 23, 0, 23]);
    }

    #[test]
    fn active_case_windows() {
        assert_eq!(active_cases(&[1.0; 20], 14)[19], 14.0);
        let mut spike = vec![0.0; 20];
        spike[0] = 100.0;
        let a = active_cases(&spike, 14);
        assert_eq!(a[13], 100.0);
        assert_eq!(a[14], 0.0);
        let ramp: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        // 7 + 8 + ... + 20
        let oracle: f64 = (7..=20).map(|v| v as f64).sum();
        assert_eq!(oracle, 189.0);
        assert_eq!(active_cases(&ramp, 14)[19], oracle);
    }

    #[test]
    fn context_from_series_alignment() {
        use crate::data::CountrySeries;
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let n = 40;
        let s = CountrySeries {
            id: "A".into(),
            name: "A".into(),
            population: 1_000_000,
            dates: (0..n).map(|i| start + Duration::days(i as i64)).collect(),
            new_cases: (0..n).map(|i| 10 + i as u64).collect(),
            npis: (0..n).map(|i| NpiVector::saturating([(i % 3) as i64; 8])).collect(),
            flags: vec![],
        };
        let c = ForecastContext::from_series(&s, 30, 2.0).unwrap();
        assert_eq!(c.actions[20], s.npis[29]);
        assert_eq!(c.recent_cases[13], 40.0);
        assert_eq!(c.cumulative, (0..=30).map(|i| 10.0 + i as f64).sum::<f64>());
        assert!(ForecastContext::from_series(&s, 5, 2.0).is_err());
    }
}
