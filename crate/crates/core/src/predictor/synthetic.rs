//! Ratio series generated by a known model, for recovery experiments.

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{PredictorModel, RatioModel, HIDDEN_UNITS};
use crate::data::{CaseAnchor, DatasetSplit, TrainingSample, HISTORY_DAYS, TEST_DAYS};
use crate::error::Result;
use crate::npi::{NpiVector, NPI_COUNT, NPI_MAX_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthConfig {
    pub countries: usize,
    pub days: usize,
    /// Shortest and longest NPI regime, in days.
    pub regime_days: (usize, usize),
    /// Stationary standard deviation of the log ratio-history process.
    pub ratio_spread: f64,
    /// Day-to-day persistence of the log ratio-history process, in [0, 1).
    pub ratio_persistence: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            countries: 5,
            days: 200,
            regime_days: (7, 30),
            ratio_spread: 0.3,
            ratio_persistence: 0.9,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

/// A random projected model rescaled so that the action branch spans logits
/// -1..1 between constant NPI windows at 20% and 80% of maximum stringency,
/// and the context branch maps constant ratio histories 0.5 and 1.5 to
/// growth 1.2 and 2.4.
pub fn ground_truth_model(seed: u64) -> Result<PredictorModel> {
    let mut m = PredictorModel::new(HIDDEN_UNITS, seed);
    let flat = [1.0; HISTORY_DAYS];
    let at = |u: f64| [NpiVector::saturating(std::array::from_fn(|i| (u * f64::from(NPI_MAX_LEVELS[i])).round() as i64)); HISTORY_DAYS];
    let logit = |m: &PredictorModel, a: &[NpiVector]| -> Result<f64> {
        let g = m.forward(a, &flat)?.g;
        Ok((g / (1.0 - g)).ln())
    };
    let lo = logit(&m, &at(0.2))?;
    let hi = logit(&m, &at(0.8))?;
    let scale = 2.0 / (hi - lo).max(1e-9);
    let hb = m.action.head_bias_index();
    let bias = m.action.params[hb];
    for w in &mut m.action.params[hb - HIDDEN_UNITS..hb] {
        *w *= scale;
    }
    m.action.params[hb] = -scale * ((lo + hi) / 2.0 - bias);

    let inv_softplus = |y: f64| y.exp_m1().ln();
    let pre_h = |m: &PredictorModel, r: f64| -> Result<f64> {
        Ok(inv_softplus(m.forward(&[NpiVector::ZERO; HISTORY_DAYS], &[r; HISTORY_DAYS])?.h))
    };
    let (a, b) = (pre_h(&m, 0.5)?, pre_h(&m, 1.5)?);
    let (ta, tb) = (inv_softplus(1.2), inv_softplus(2.4));
    let k = (tb - ta) / (b - a);
    let cb = m.context.head_bias_index();
    let bias = m.context.params[cb];
    for w in &mut m.context.params[cb - HIDDEN_UNITS..cb] {
        *w *= k;
    }
    m.context.params[cb] = ta - k * (a - bias);
    Ok(m)
}

/// Builds a split whose targets are exactly `truth(A, r)`. Each country gets
/// a regime-switching NPI schedule and a mean-reverting log-normal ratio
/// history. The last `TEST_DAYS` samples of each country form the test
/// split; the rest are shuffled into train/validation.
pub fn ground_truth_split<M: RatioModel + ?Sized>(truth: &M, cfg: &GroundTruthConfig) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rho = cfg.ratio_persistence.clamp(0.0, 0.999);
    let innovation = Normal::new(0.0, cfg.ratio_spread.max(0.0) * (1.0 - rho * rho).sqrt()).expect("finite std");
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date");
    let anchor = CaseAnchor {
        population: 1.0,
        prev_cumulative: 0.0,
        prev_smoothed: 0.0,
        lagged_cases: 0.0,
        new_cases: 0.0,
    };
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for c in 0..cfg.countries {
        let mut actions = Vec::with_capacity(cfg.days);
        while actions.len() < cfg.days {
            let intensity: f64 = rng.random();
            let length = rng.random_range(cfg.regime_days.0.max(1)..=cfg.regime_days.1.max(cfg.regime_days.0.max(1)));
            let levels: [i64; NPI_COUNT] = std::array::from_fn(|i| {
                let jitter: f64 = rng.random_range(-0.75..0.75);
                (intensity * f64::from(NPI_MAX_LEVELS[i]) + jitter).round() as i64
            });
            actions.extend(std::iter::repeat_n(NpiVector::saturating(levels), length));
        }
        actions.truncate(cfg.days);
        let mut log_r = 0.0;
        let ratios: Vec<f64> = (0..cfg.days)
            .map(|_| {
                log_r = rho * log_r + innovation.sample(&mut rng);
                log_r.exp().clamp(0.0, 2.0)
            })
            .collect();
        let mut samples = Vec::new();
        for n in HISTORY_DAYS..cfg.days {
            let a = &actions[n - HISTORY_DAYS..n];
            let r = &ratios[n - HISTORY_DAYS..n];
            let target = truth.predict_ratio(a, r)?;
            samples.push(TrainingSample {
                country: format!("GT{c}"),
                date: start + Duration::days(n as i64),
                day: n,
                actions: a.to_vec(),
                ratios: r.to_vec(),
                target,
                raw_target: target,
                anchor,
            });
        }
        let cut = samples.len().saturating_sub(TEST_DAYS);
        test.extend(samples.drain(cut..));
        pool.extend(samples);
    }
    pool.shuffle(&mut rng);
    let n_val = ((pool.len() as f64) * cfg.val_frac).round() as usize;
    let train = pool.split_off(n_val);
    Ok(DatasetSplit {
        train,
        validation: pool,
        test,
        split_seed: cfg.seed,
    })
}
