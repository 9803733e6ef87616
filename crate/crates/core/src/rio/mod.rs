//! Residual calibration of the predictor with a Gaussian process, and
//! Monte-Carlo uncertainty bands for forecasts.

pub mod gp;
pub mod mc;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

pub use gp::{
    log_marginal_likelihood, optimize_hyperparams, CalibratedPrediction, Calibrator, GpData, GpModel, Hyperparams,
    OptimizationReport, OptimizerConfig,
};
pub use mc::{calibrated_rollout, mc_forecast, quantile_sorted, sample_ratio, BandDay, McBands, McConfig};

use crate::data::{country_samples, CountrySeries, HISTORY_DAYS};
use crate::error::{Error, Result};
use crate::predictor::PredictorModel;

pub const GP_SCHEMA_VERSION: u32 = 1;
pub const MIN_RIO_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RioConfig {
    /// Samples whose observed ratio exceeds this are discarded.
    pub outlier_ratio: f64,
    /// Earliest samples of each country that are discarded.
    pub drop_first: usize,
    /// Days per country held out at random for evaluation.
    pub heldout_days: usize,
    /// Cap on the number of points the GP is conditioned on.
    pub max_train: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for RioConfig {
    fn default() -> Self {
        Self {
            outlier_ratio: 2.0,
            drop_first: 10,
            heldout_days: 14,
            max_train: 2000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

/// One predictor evaluation with its hidden features and the observed ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RioSample {
    pub country: String,
    pub day: usize,
    pub features: Vec<f64>,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySelection {
    pub countries: Vec<String>,
    pub fell_back: bool,
}

/// Among the first `top_n` of `ranked` (most affected first), keeps the
/// countries whose predictor MAE is below `threshold`. Falls back to all
/// `top_n` when none qualifies.
pub fn select_rio_countries(mae: &BTreeMap<String, f64>, ranked: &[String], threshold: f64, top_n: usize) -> CountrySelection {
    let top: Vec<String> = ranked.iter().take(top_n).cloned().collect();
    let kept: Vec<String> = top
        .iter()
        .filter(|c| mae.get(*c).is_some_and(|m| *m < threshold))
        .cloned()
        .collect();
    if kept.is_empty() {
        warn!(threshold, top_n, "no country under the MAE threshold; using all top countries");
        CountrySelection {
            countries: top,
            fell_back: true,
        }
    } else {
        CountrySelection {
            countries: kept,
            fell_back: false,
        }
    }
}

/// Per-country one-step MAE of the predictor on raw targets.
pub fn per_country_mae(model: &PredictorModel, series: &BTreeMap<String, CountrySeries>, clip_max: f64) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (id, s) in series {
        let samples = country_samples(s, HISTORY_DAYS, clip_max)?;
        if samples.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for smp in &samples {
            total += (model.forward(&smp.actions, &smp.ratios)?.ratio - smp.raw_target).abs();
        }
        out.insert(id.clone(), total / samples.len() as f64);
    }
    Ok(out)
}

/// Evaluates the predictor on every eligible sample of the chosen countries
/// and splits off `heldout_days` random samples per country.
pub fn rio_samples(
    model: &PredictorModel,
    series: &BTreeMap<String, CountrySeries>,
    countries: &[String],
    cfg: &RioConfig,
    clip_max: f64,
) -> Result<(Vec<RioSample>, Vec<RioSample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for id in countries {
        let s = series.get(id).ok_or_else(|| Error::NotFound {
            kind: "country",
            id: id.clone(),
        })?;
        let mut rows = Vec::new();
        for smp in country_samples(s, HISTORY_DAYS, clip_max)?.into_iter().skip(cfg.drop_first) {
            if smp.raw_target > cfg.outlier_ratio {
                continue;
            }
            let f = model.forward(&smp.actions, &smp.ratios)?;
            rows.push(RioSample {
                country: id.clone(),
                day: smp.day,
                features: f.features(),
                prediction: f.ratio,
                target: smp.raw_target,
            });
        }
        rows.shuffle(&mut rng);
        let k = cfg.heldout_days.min(rows.len());
        let mut held: Vec<_> = rows.drain(..k).collect();
        held.sort_by_key(|r| r.day);
        rows.sort_by_key(|r| r.day);
        heldout.extend(held);
        train.extend(rows);
    }
    Ok((train, heldout))
}

pub fn gp_data(samples: &[RioSample]) -> GpData {
    GpData {
        features: samples.iter().map(|s| s.features.clone()).collect(),
        predictions: samples.iter().map(|s| s.prediction).collect(),
        residuals: samples.iter().map(|s| s.target - s.prediction).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct RioFit {
    pub gp: GpModel,
    pub report: OptimizationReport,
    /// Indices of the training pool the GP was conditioned on.
    pub conditioned_on: Vec<usize>,
    pub heldout: Vec<RioSample>,
}

/// Fits the residual GP on `train`, subsampling to `cfg.max_train` points.
pub fn fit_rio(train: &[RioSample], heldout: Vec<RioSample>, cfg: &RioConfig) -> Result<RioFit> {
    if train.len() < MIN_RIO_SAMPLES {
        return Err(Error::InsufficientHistory {
            needed: MIN_RIO_SAMPLES,
            got: train.len(),
        });
    }
    let conditioned_on: Vec<usize> = if train.len() > cfg.max_train {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
        let mut idx = rand::seq::index::sample(&mut rng, train.len(), cfg.max_train).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..train.len()).collect()
    };
    let chosen: Vec<RioSample> = conditioned_on.iter().map(|&i| train[i].clone()).collect();
    let (gp, report) = GpModel::fit(gp_data(&chosen), &cfg.optimizer)?;
    Ok(RioFit {
        gp,
        report,
        conditioned_on,
        heldout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutScore {
    pub original_mae: f64,
    pub calibrated_mae: f64,
    /// Fraction of targets inside the 95% predictive interval.
    pub coverage_95: f64,
}

pub fn score<C: Calibrator + ?Sized>(gp: &GpModel, calibrator: &C, samples: &[RioSample]) -> Result<HeldoutScore> {
    if samples.is_empty() {
        return Err(Error::Empty("no held-out samples".into()));
    }
    let (mut orig, mut cal_err, mut covered) = (0.0, 0.0, 0usize);
    for s in samples {
        let c = calibrator.calibrate(&s.features, s.prediction)?;
        orig += (s.prediction - s.target).abs();
        cal_err += (c.mean - s.target).abs();
        if (s.target - c.mean).abs() <= 1.959_963_984_540_054 * gp.predictive_variance(&c).sqrt() {
            covered += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(HeldoutScore {
        original_mae: orig / n,
        calibrated_mae: cal_err / n,
        coverage_95: covered as f64 / n,
    })
}

/// Serialized GP: hyperparameters plus the conditioning data, so the model
/// can be restored without re-running the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub schema_version: u32,
    pub hyper: Hyperparams,
    pub data: GpData,
    pub conditioned_on: Vec<usize>,
    pub countries: Vec<String>,
    pub dataset_fingerprint: Option<String>,
}

impl GpSnapshot {
    pub fn new(fit: &RioFit, countries: Vec<String>, dataset_fingerprint: Option<String>) -> Self {
        Self {
            schema_version: GP_SCHEMA_VERSION,
            hyper: fit.gp.hyper,
            data: fit.gp.data.clone(),
            conditioned_on: fit.conditioned_on.clone(),
            countries,
            dataset_fingerprint,
        }
    }

    pub fn restore(&self) -> Result<GpModel> {
        if self.schema_version != GP_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: GP_SCHEMA_VERSION,
            });
        }
        GpModel::condition(self.data.clone(), self.hyper)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("C{i:02}")).collect()
    }

    #[test]
    fn selection_threshold_and_fallback() {
        let r = ranked(40);
        let low: BTreeMap<_, _> = r.iter().map(|c| (c.clone(), 0.01)).collect();
        let sel = select_rio_countries(&low, &r, 0.04, 30);
        assert_eq!(sel.countries.len(), 30);
        assert!(!sel.fell_back);
        let high: BTreeMap<_, _> = r.iter().map(|c| (c.clone(), 0.1)).collect();
        let sel = select_rio_countries(&high, &r, 0.04, 30);
        assert!(sel.fell_back);
        assert_eq!(sel.countries, r[..30].to_vec());
        let mut mixed = high.clone();
        mixed.insert("C03".into(), 0.02);
        mixed.insert("C35".into(), 0.02);
        assert_eq!(select_rio_countries(&mixed, &r, 0.04, 30).countries, vec!["C03".to_string()]);
    }

    #[test]
    fn too_few_samples_rejected() {
        let s = RioSample {
            country: "A".into(),
            day: 0,
            features: vec![0.0; 2],
            prediction: 1.0,
            target: 1.0,
        };
        assert!(matches!(
            fit_rio(&vec![s; 10], vec![], &RioConfig::default()),
            Err(Error::InsufficientHistory { .. })
        ));
    }
}
