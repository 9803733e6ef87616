//! The NPI-aware ratio predictor, its training loop and comparison baselines.

pub mod adam;
pub mod baseline;
pub mod gradcheck;
pub mod synthetic;
pub mod lstm;
pub mod model;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use baseline::{fit_baseline, BaselineKind, BaselineModel, LinearModel, MlpConfig, MlpModel};
pub use gradcheck::{gradient_check, loss_and_gradient};
pub use lstm::{HeadActivation, LstmBranch};
pub use model::{Forward, Gradient, PredictorModel, TrainingMeta, HIDDEN_UNITS};
pub use train::{mean_absolute_error, train, EpochLog, TrainConfig, TrainReport};

use crate::error::Result;
use crate::npi::NpiVector;

/// Anything that maps 21 days of NPIs and ratios to the next-day ratio.
pub trait RatioModel: Sync {
    fn predict_ratio(&self, actions: &[NpiVector], ratios: &[f64]) -> Result<f64>;
}

impl<F> RatioModel for F
where
    F: Fn(&[NpiVector], &[f64]) -> f64 + Sync,
{
    fn predict_ratio(&self, actions: &[NpiVector], ratios: &[f64]) -> Result<f64> {
        Ok(self(actions, ratios))
    }
}
