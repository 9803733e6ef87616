//! Mini-batch Adam training with projection and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::adam::{Adam, AdamConfig};
use super::model::{Gradient, PredictorModel, Workspace};
use super::RatioModel;
use crate::data::{DatasetSplit, TrainingSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 20,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_mae: f64,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochLog>,
}

/// Mean absolute error of `model` on the (fit) targets of `samples`.
pub fn mean_absolute_error<M: RatioModel + ?Sized>(model: &M, samples: &[TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += (model.predict_ratio(&s.actions, &s.ratios)? - s.target).abs();
    }
    Ok(total / samples.len() as f64)
}

/// Trains both branches end to end on MAE. The action branch is projected to
/// non-negative parameters after every optimizer step; the weights from the
/// epoch with the lowest validation MAE are returned.
pub fn train(mut model: PredictorModel, data: &DatasetSplit, cfg: &TrainConfig) -> Result<(PredictorModel, TrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    model.project_nonneg();
    let mut opt_action = Adam::new(cfg.adam, model.action.params.len());
    let mut opt_context = Adam::new(cfg.adam, model.context.params.len());
    let mut grad = Gradient::zeros_like(&model);
    let mut ws = Workspace::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let initial_val_mae = mean_absolute_error(&model, &data.validation)?;
    let mut best = model.clone();
    let mut best_val = initial_val_mae;
    let mut best_epoch = 0;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.reset();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data.train[i];
                let pred = model.run(&s.actions, &s.ratios, &mut ws)?;
                let err = pred - s.target;
                batch_loss += err.abs();
                model.backward(&mut ws, err.signum() * scale, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;
            opt_action.step(&mut model.action.params, &grad.action);
            opt_context.step(&mut model.context.params, &grad.context);
            model.project_nonneg();
        }
        let train_mae = epoch_loss / data.train.len() as f64;
        let val_mae = mean_absolute_error(&model, &data.validation)?;
        if !val_mae.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        debug!(epoch, train_mae, val_mae, "epoch");
        history.push(EpochLog {
            epoch,
            train_mae,
            val_mae,
        });
        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    best.meta.epochs_run = history.len();
    best.meta.best_epoch = best_epoch;
    best.meta.best_val_mae = Some(best_val);
    best.meta.seed = cfg.seed;
    Ok((
        best,
        TrainReport {
            initial_val_mae,
            best_epoch,
            best_val_mae: best_val,
            history,
        },
    ))
}
