//! Predictor comparison metrics over a held-out forecast window.
//!
//! For every country the window starts the day after training data ends.
//! One-step error uses ground-truth histories; the three case metrics use a
//! full autoregressive forecast over the window driven by the actual NPIs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::data::{build_dataset, country_samples, CountrySeries, DatasetConfig, HISTORY_DAYS, TEST_DAYS};
use crate::error::{Error, Result};
use crate::forecast::{rollout, Actions, ForecastContext};
use crate::predictor::{fit_baseline, train, BaselineKind, PredictorModel, RatioModel, TrainConfig, HIDDEN_UNITS};

/// One method's results for one country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryOutcome {
    pub country: String,
    /// `|R - R_hat|` for each window day with a defined ratio.
    pub one_step_errors: Vec<f64>,
    pub true_total: f64,
    pub predicted_total: f64,
}

impl CountryOutcome {
    pub fn case_error(&self) -> f64 {
        (self.true_total - self.predicted_total).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcomes {
    pub method: String,
    pub countries: Vec<CountryOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryRow {
    pub country: String,
    pub one_step_mae: f64,
    pub case_error: f64,
    pub normalized_error: f64,
    pub rank: f64,
    /// The window had no true cases; the normalizer was clamped to 1.
    pub zero_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub one_step_r_mae: f64,
    pub raw_case_mae: f64,
    pub normalized_case_mae: f64,
    pub mean_rank: f64,
    pub per_country: Vec<CountryRow>,
}

/// 0-based ranks in ascending order; tied values share the mean of their ranks.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Computes the four metrics for every method. All methods must cover the
/// same countries in the same order.
pub fn compute_metrics(methods: &[MethodOutcomes]) -> Result<Vec<MetricReport>> {
    let first = methods.first().ok_or_else(|| Error::Empty("no methods to compare".into()))?;
    let countries: Vec<&str> = first.countries.iter().map(|c| c.country.as_str()).collect();
    if countries.is_empty() {
        return Err(Error::Empty("no countries to compare".into()));
    }
    for m in methods {
        let ids: Vec<&str> = m.countries.iter().map(|c| c.country.as_str()).collect();
        if ids != countries {
            return Err(Error::Config(format!("method {} covers a different country list", m.method)));
        }
    }
    let mut ranks = vec![vec![0.0; countries.len()]; methods.len()];
    for (c, _) in countries.iter().enumerate() {
        let errs: Vec<f64> = methods.iter().map(|m| m.countries[c].case_error()).collect();
        for (mi, r) in fractional_ranks(&errs).into_iter().enumerate() {
            ranks[mi][c] = r;
        }
    }
    let n_c = countries.len() as f64;
    Ok(methods
        .iter()
        .zip(&ranks)
        .map(|(m, rk)| {
            let per_country: Vec<CountryRow> = m
                .countries
                .iter()
                .zip(rk)
                .map(|(c, &rank)| {
                    let zero_truth = c.true_total <= 0.0;
                    if zero_truth {
                        warn!(country = %c.country, method = %m.method, "no true cases in window; normalizer clamped to 1");
                    }
                    CountryRow {
                        country: c.country.clone(),
                        one_step_mae: mean(&c.one_step_errors),
                        case_error: c.case_error(),
                        normalized_error: c.case_error() / c.true_total.max(1.0),
                        rank,
                        zero_truth,
                    }
                })
                .collect();
            let steps: Vec<f64> = m.countries.iter().flat_map(|c| c.one_step_errors.iter().copied()).collect();
            MetricReport {
                method: m.method.clone(),
                one_step_r_mae: mean(&steps),
                raw_case_mae: per_country.iter().map(|r| r.case_error).sum(),
                normalized_case_mae: per_country.iter().map(|r| r.normalized_error).sum::<f64>() / n_c,
                mean_rank: rk.iter().sum::<f64>() / n_c,
                per_country,
            }
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores `model` on the last `window` days of each listed country.
pub fn country_outcomes<M: RatioModel + ?Sized>(
    model: &M,
    series: &BTreeMap<String, CountrySeries>,
    countries: &[String],
    window: usize,
    clip_max: f64,
) -> Result<Vec<CountryOutcome>> {
    countries
        .iter()
        .map(|id| {
            let s = series.get(id).ok_or_else(|| Error::NotFound {
                kind: "country",
                id: id.clone(),
            })?;
            if s.len() <= window + HISTORY_DAYS {
                return Err(Error::InsufficientHistory {
                    needed: window + HISTORY_DAYS + 1,
                    got: s.len(),
                });
            }
            let last_train = s.len() - window - 1;
            let mut one_step_errors = Vec::new();
            for smp in country_samples(s, HISTORY_DAYS, clip_max)? {
                if smp.day > last_train {
                    one_step_errors.push((model.predict_ratio(&smp.actions, &smp.ratios)? - smp.raw_target).abs());
                }
            }
            let ctx = ForecastContext::from_series(s, last_train, clip_max)?;
            let schedule = &s.npis[last_train..last_train + window];
            let forecast = rollout(model, &ctx, window, Actions::Schedule(schedule))?;
            Ok(CountryOutcome {
                country: id.clone(),
                one_step_errors,
                true_total: s.new_cases[last_train + 1..].iter().map(|&v| v as f64).sum(),
                predicted_total: forecast.total_cases(),
            })
        })
        .collect()
}

pub fn default_window() -> usize {
    TEST_DAYS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let m = mean(values);
        let stderr = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        Self { mean: m, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub trials: usize,
    pub normalized_case_mae: MeanStderr,
    pub raw_case_mae: MeanStderr,
    pub mean_rank: MeanStderr,
    pub one_step_r_mae: MeanStderr,
}

/// Mean and standard error of each metric over trials, per method (in the
/// order methods first appear).
pub fn aggregate(trials: &[Vec<MetricReport>]) -> Vec<AggregateRow> {
    let mut names: Vec<String> = Vec::new();
    for t in trials {
        for r in t {
            if !names.contains(&r.method) {
                names.push(r.method.clone());
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rows: Vec<&MetricReport> = trials.iter().flatten().filter(|r| r.method == name).collect();
            let col = |f: fn(&MetricReport) -> f64| MeanStderr::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                trials: rows.len(),
                normalized_case_mae: col(|r| r.normalized_case_mae),
                raw_case_mae: col(|r| r.raw_case_mae),
                mean_rank: col(|r| r.mean_rank),
                one_step_r_mae: col(|r| r.one_step_r_mae),
                method: name,
            }
        })
        .collect()
}

pub const TRIAL_CSV_HEADER: [&str; 6] = [
    "trial",
    "method",
    "normalized_case_mae",
    "raw_case_mae",
    "mean_rank",
    "one_step_r_mae",
];

/// Per-trial rows with [`TRIAL_CSV_HEADER`] columns.
pub fn write_trials_csv<W: Write>(out: W, trials: &[Vec<MetricReport>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Numerical(format!("csv write: {e}"));
    w.write_record(TRIAL_CSV_HEADER).map_err(err)?;
    for (i, t) in trials.iter().enumerate() {
        for r in t {
            w.write_record([
                i.to_string(),
                r.method.clone(),
                r.normalized_case_mae.to_string(),
                r.raw_case_mae.to_string(),
                r.mean_rank.to_string(),
                r.one_step_r_mae.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Fixed-width table of mean ± stderr, one row per method.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let mut s = format!(
        "{:<10} | {:>16} | {:>22} | {:>14} | {:>16}\n",
        "Method", "Norm. Case MAE", "Raw Case MAE", "Mean Rank", "1-step R MAE"
    );
    s.push_str(&"-".repeat(s.len() - 1));
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} | {:>7.3} ± {:<6.3} | {:>11.0} ± {:<8.0} | {:>5.2} ± {:<5.2} | {:>6.3} ± {:<6.3}",
            r.method,
            r.normalized_case_mae.mean,
            r.normalized_case_mae.stderr,
            r.raw_case_mae.mean,
            r.raw_case_mae.stderr,
            r.mean_rank.mean,
            r.mean_rank.stderr,
            r.one_step_r_mae.mean,
            r.one_step_r_mae.stderr,
        );
    }
    s
}

pub const LSTM_METHOD: &str = "NPI-LSTM";
pub const LINEAR_METHOD: &str = "Linear";
pub const MLP_METHOD: &str = "MLP";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

/// One seeded trial: split the data, fit the recurrent predictor and both
/// flat baselines, and score all three on every country's test window.
/// The baselines see train and validation samples since they do not early
/// stop.
pub fn comparison_trial(series: &BTreeMap<String, CountrySeries>, cfg: &ComparisonConfig, seed: u64) -> Result<Vec<MetricReport>> {
    let dataset = DatasetConfig { seed, ..cfg.dataset };
    let split = build_dataset(series, &dataset)?;
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let (lstm, _) = train(PredictorModel::new(HIDDEN_UNITS, seed), &split, &train_cfg)?;
    let fit_pool: Vec<_> = split.train.iter().chain(&split.validation).cloned().collect();
    let linear = fit_baseline(BaselineKind::Linear, &fit_pool, seed)?;
    let mlp = fit_baseline(BaselineKind::Mlp, &fit_pool, seed)?;

    let countries: Vec<String> = series
        .values()
        .filter(|s| s.len() > dataset.test_days + HISTORY_DAYS)
        .map(|s| s.id.clone())
        .collect();
    let window = dataset.test_days;
    let score = |name: &str, model: &dyn RatioModel| -> Result<MethodOutcomes> {
        Ok(MethodOutcomes {
            method: name.to_string(),
            countries: country_outcomes(model, series, &countries, window, dataset.clip_max)?,
        })
    };
    compute_metrics(&[
        score(LSTM_METHOD, &lstm)?,
        score(LINEAR_METHOD, &linear)?,
        score(MLP_METHOD, &mlp)?,
    ])
}
