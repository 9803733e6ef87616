//! Finite-difference verification of the hand-written backward pass.

use super::model::{Gradient, PredictorModel, Workspace};
use crate::data::TrainingSample;
use crate::error::Result;

/// Mean absolute error over `samples` and its analytic gradient.
pub fn loss_and_gradient(model: &PredictorModel, samples: &[TrainingSample]) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros_like(model);
    let mut ws = Workspace::default();
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    for s in samples {
        let err = model.run(&s.actions, &s.ratios, &mut ws)? - s.target;
        loss += err.abs() * scale;
        model.backward(&mut ws, err.signum() * scale, &mut grad);
    }
    Ok((loss, grad))
}

fn loss(model: &PredictorModel, samples: &[TrainingSample], ws: &mut Workspace) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += (model.run(&s.actions, &s.ratios, ws)? - s.target).abs();
    }
    Ok(total / samples.len() as f64)
}

/// Relative discrepancy used by the check: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_discrepancy(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative discrepancy between the analytic MAE gradient and central
/// finite differences with step `epsilon`, over every parameter of both branches.
pub fn gradient_check(model: &PredictorModel, samples: &[TrainingSample], epsilon: f64) -> Result<f64> {
    let (_, analytic) = loss_and_gradient(model, samples)?;
    let mut probe = model.clone();
    let mut ws = Workspace::default();
    let mut worst: f64 = 0.0;
    for branch in 0..2 {
        let n = if branch == 0 {
            model.action.params.len()
        } else {
            model.context.params.len()
        };
        for i in 0..n {
            let original = param(&probe, branch, i);
            *param_mut(&mut probe, branch, i) = original + epsilon;
            let up = loss(&probe, samples, &mut ws)?;
            *param_mut(&mut probe, branch, i) = original - epsilon;
            let down = loss(&probe, samples, &mut ws)?;
            *param_mut(&mut probe, branch, i) = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = if branch == 0 {
                analytic.action[i]
            } else {
                analytic.context[i]
            };
            worst = worst.max(relative_discrepancy(a, numeric));
        }
    }
    Ok(worst)
}

fn param(m: &PredictorModel, branch: usize, i: usize) -> f64 {
    if branch == 0 {
        m.action.params[i]
    } else {
        m.context.params[i]
    }
}

fn param_mut(m: &mut PredictorModel, branch: usize, i: usize) -> &mut f64 {
    if branch == 0 {
        &mut m.action.params[i]
    } else {
        &mut m.context.params[i]
    }
}
