//! The factored predictor `R = (1 - g(A)) * h(r)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{BranchCache, HeadActivation, LstmBranch};
use super::RatioModel;
use crate::data::HISTORY_DAYS;
use crate::error::{Error, Result};
use crate::npi::{NpiVector, NPI_COUNT};

pub const HIDDEN_UNITS: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub seed: u64,
    /// Registry fingerprint of the dataset the model was trained on.
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub history: usize,
    /// Action branch g: NPI history -> social-distancing effect in [0, 1].
    pub action: LstmBranch,
    /// Context branch h: ratio history -> endogenous growth rate >= 0.
    pub context: LstmBranch,
    pub meta: TrainingMeta,
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub ratio: f64,
    pub g: f64,
    pub h: f64,
    pub hidden_action: Vec<f64>,
    pub hidden_context: Vec<f64>,
}

impl Forward {
    /// Concatenated final hidden states, action branch first.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.hidden_action.clone();
        f.extend_from_slice(&self.hidden_context);
        f
    }
}

/// Reusable buffers for forward/backward passes.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    pub(crate) action_in: Vec<f64>,
    pub(crate) action: BranchCache,
    pub(crate) context: BranchCache,
    pub(crate) scratch: Vec<f64>,
}

/// Gradient with the same layout as the two branch parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub action: Vec<f64>,
    pub context: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(model: &PredictorModel) -> Self {
        Self {
            action: vec![0.0; model.action.params.len()],
            context: vec![0.0; model.context.params.len()],
        }
    }

    pub fn reset(&mut self) {
        self.action.fill(0.0);
        self.context.fill(0.0);
    }
}

impl PredictorModel {
    /// Freshly initialised model with the action branch already projected.
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let action = LstmBranch::init(NPI_COUNT, hidden, HeadActivation::Sigmoid, &mut rng);
        let context = LstmBranch::init(1, hidden, HeadActivation::Softplus, &mut rng);
        let mut model = Self {
            history: HISTORY_DAYS,
            action,
            context,
            meta: TrainingMeta {
                seed,
                ..Default::default()
            },
        };
        model.project_nonneg();
        model
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            history: HISTORY_DAYS,
            action: LstmBranch::zeros(NPI_COUNT, hidden, HeadActivation::Sigmoid),
            context: LstmBranch::zeros(1, hidden, HeadActivation::Softplus),
            meta: TrainingMeta::default(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.action.hidden
    }

    pub fn param_count(&self) -> usize {
        self.action.params.len() + self.context.params.len()
    }

    /// Replaces every action-branch parameter by its absolute value except the
    /// dense-head bias. Keeps g monotone non-decreasing in every NPI level.
    pub fn project_nonneg(&mut self) {
        project_nonneg(&mut self.action);
    }

    fn check_shapes(&self, actions: &[NpiVector], ratios: &[f64]) -> Result<()> {
        if actions.len() != self.history {
            return Err(Error::Shape {
                what: "action history",
                expected: self.history,
                got: actions.len(),
            });
        }
        if ratios.len() != self.history {
            return Err(Error::Shape {
                what: "ratio history",
                expected: self.history,
                got: ratios.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn run(&self, actions: &[NpiVector], ratios: &[f64], ws: &mut Workspace) -> Result<f64> {
        self.check_shapes(actions, ratios)?;
        ws.action_in.clear();
        for a in actions {
            ws.action_in.extend_from_slice(&a.normalized());
        }
        self.action.forward(&ws.action_in, &mut ws.action);
        self.context.forward(ratios, &mut ws.context);
        Ok((1.0 - ws.action.output) * ws.context.output)
    }

    pub fn forward(&self, actions: &[NpiVector], ratios: &[f64]) -> Result<Forward> {
        let mut ws = Workspace::default();
        let ratio = self.run(actions, ratios, &mut ws)?;
        let h = self.hidden();
        Ok(Forward {
            ratio,
            g: ws.action.output,
            h: ws.context.output,
            hidden_action: ws.action.final_hidden(h).to_vec(),
            hidden_context: ws.context.final_hidden(h).to_vec(),
        })
    }

    /// Adds `d_ratio * dR/dθ` for the pass currently held in `ws`.
    pub(crate) fn backward(&self, ws: &mut Workspace, d_ratio: f64, grad: &mut Gradient) {
        let g = ws.action.output;
        let h = ws.context.output;
        self.action
            .backward(&ws.action, -d_ratio * h, &mut grad.action, &mut ws.scratch);
        self.context
            .backward(&ws.context, d_ratio * (1.0 - g), &mut grad.context, &mut ws.scratch);
    }
}

pub fn project_nonneg(branch: &mut LstmBranch) {
    let bias = branch.head_bias_index();
    for (i, p) in branch.params.iter_mut().enumerate() {
        if i != bias {
            *p = p.abs();
        }
    }
}

impl RatioModel for PredictorModel {
    fn predict_ratio(&self, actions: &[NpiVector], ratios: &[f64]) -> Result<f64> {
        let mut ws = Workspace::default();
        self.run(actions, ratios, &mut ws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(rng: &mut ChaCha8Rng) -> (Vec<NpiVector>, Vec<f64>) {
        let a = (0..21)
            .map(|_| {
                let mut l = [0i64; 8];
                for (k, v) in l.iter_mut().enumerate() {
                    *v = rng.random_range(0..=crate::npi::NPI_MAX_LEVELS[k] as i64);
                }
                NpiVector::saturating(l)
            })
            .collect();
        let r = (0..21).map(|_| rng.random_range(0.0..2.0)).collect();
        (a, r)
    }

    #[test]
    fn zero_model_output() {
        let m = PredictorModel::zeros(HIDDEN_UNITS);
        let f = m.forward(&[NpiVector::MAX; 21], &[1.0; 21]).unwrap();
        assert_eq!(f.g, 0.5);
        assert!((f.h - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((f.ratio - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((f.ratio - 0.34657).abs() < 1e-5);
        assert_eq!(f.features().len(), 64);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let m = PredictorModel::zeros(4);
        assert!(matches!(
            m.forward(&[NpiVector::ZERO; 20], &[1.0; 21]),
            Err(Error::Shape { what: "action history", .. })
        ));
        assert!(matches!(
            m.forward(&[NpiVector::ZERO; 21], &[1.0; 3]),
            Err(Error::Shape { what: "ratio history", .. })
        ));
    }

    #[test]
    fn projection_keeps_head_bias_and_is_idempotent() {
        let mut m = PredictorModel::zeros(4);
        m.action.params[0] = -0.5;
        let bias = m.action.head_bias_index();
        m.action.params[bias] = -0.3;
        m.project_nonneg();
        assert_eq!(m.action.params[0], 0.5);
        assert_eq!(m.action.params[bias], -0.3);
        let once = m.clone();
        m.project_nonneg();
        assert_eq!(m, once);
    }

    #[test]
    fn output_nonnegative_and_monotone_in_stringency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let m = PredictorModel::new(HIDDEN_UNITS, seed);
            let (_, r) = random_inputs(&mut rng);
            let hi = m.forward(&[NpiVector::MAX; 21], &r).unwrap();
            let lo = m.forward(&[NpiVector::ZERO; 21], &r).unwrap();
            assert!(hi.ratio <= lo.ratio);
            let (a, r) = random_inputs(&mut rng);
            let f = m.forward(&a, &r).unwrap();
            assert!(f.ratio >= 0.0 && (0.0..=1.0).contains(&f.g));
        }
    }
}
