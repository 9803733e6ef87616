//! Monte-Carlo rollouts that sample each step's ratio from the calibrated
//! distribution and summarize the trajectories with empirical quantiles.

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gp::{CalibratedPrediction, Calibrator};
use crate::error::{Error, Result};
use crate::forecast::{rollout_with, Actions, ForecastContext, ForecastResult};
use crate::predictor::PredictorModel;

pub const MIN_ROLLOUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { rollouts: 100, seed: 0 }
    }
}

/// Draws from `N(mean, variance)` and clamps at 0.
pub fn sample_ratio<R: rand::Rng + ?Sized>(cal: &CalibratedPrediction, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cal.mean + cal.variance.max(0.0).sqrt() * z).max(0.0)
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDay {
    pub date: NaiveDate,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub r_median: f64,
    pub r_q25: f64,
    pub r_q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McBands {
    pub rollouts: usize,
    pub seed: u64,
    pub days: Vec<BandDay>,
}

/// Rollout that feeds back the calibrated mean at every step.
pub fn calibrated_rollout<C: Calibrator + ?Sized>(
    model: &PredictorModel,
    calibrator: &C,
    ctx: &ForecastContext,
    horizon: usize,
    actions: Actions<'_>,
) -> Result<ForecastResult> {
    rollout_with(ctx, horizon, actions, |a, r| {
        let f = model.forward(a, r)?;
        Ok(calibrator.calibrate(&f.features(), f.ratio)?.mean.max(0.0))
    })
}

fn one_rollout<C: Calibrator + ?Sized>(
    model: &PredictorModel,
    calibrator: &C,
    ctx: &ForecastContext,
    horizon: usize,
    actions: Actions<'_>,
    seed: u64,
) -> Result<ForecastResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout_with(ctx, horizon, actions, |a, r| {
        let f = model.forward(a, r)?;
        let cal = calibrator.calibrate(&f.features(), f.ratio)?;
        Ok(sample_ratio(&cal, &mut rng))
    })
}

/// Runs `cfg.rollouts` sampled rollouts (rollout `i` seeded with `seed + i`)
/// and returns per-day quartiles and medians of new cases and ratios.
pub fn mc_forecast<C: Calibrator + ?Sized>(
    model: &PredictorModel,
    calibrator: &C,
    ctx: &ForecastContext,
    horizon: usize,
    actions: Actions<'_>,
    cfg: &McConfig,
) -> Result<McBands> {
    if cfg.rollouts < MIN_ROLLOUTS {
        return Err(Error::Config(format!(
            "at least {MIN_ROLLOUTS} rollouts are needed for quartiles, got {}",
            cfg.rollouts
        )));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.rollouts);
    let per = cfg.rollouts.div_ceil(threads);
    let runs: Vec<Result<ForecastResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t * per..((t + 1) * per).min(cfg.rollouts))
                        .map(|i| one_rollout(model, calibrator, ctx, horizon, actions, cfg.seed.wrapping_add(i as u64)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("rollout thread panicked"))
            .collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut days = Vec::with_capacity(horizon);
    let mut cases = vec![0.0; runs.len()];
    let mut ratios = vec![0.0; runs.len()];
    for d in 0..horizon {
        for (i, run) in runs.iter().enumerate() {
            cases[i] = run.days[d].new_cases;
            ratios[i] = run.days[d].r_hat;
        }
        cases.sort_by(f64::total_cmp);
        ratios.sort_by(f64::total_cmp);
        days.push(BandDay {
            date: runs[0].days[d].date,
            median: quantile_sorted(&cases, 0.5),
            q25: quantile_sorted(&cases, 0.25),
            q75: quantile_sorted(&cases, 0.75),
            r_median: quantile_sorted(&ratios, 0.5),
            r_q25: quantile_sorted(&ratios, 0.25),
            r_q75: quantile_sorted(&ratios, 0.75),
        });
    }
    Ok(McBands {
        rollouts: cfg.rollouts,
        seed: cfg.seed,
        days,
    })
}
