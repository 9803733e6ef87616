//! Residual Gaussian process with a sum of two squared-exponential kernels:
//! one over the predictor's hidden-state features, one over its scalar output.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-2;
const LOG_BOUND: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub input_variance: f64,
    pub input_length: f64,
    pub output_variance: f64,
    pub output_length: f64,
    pub noise_variance: f64,
}

impl Hyperparams {
    fn to_log(self) -> [f64; 5] {
        [
            self.input_variance.ln(),
            self.input_length.ln(),
            self.output_variance.ln(),
            self.output_length.ln(),
            self.noise_variance.ln(),
        ]
    }

    fn from_log(t: &[f64; 5]) -> Self {
        Self {
            input_variance: t[0].exp(),
            input_length: t[1].exp(),
            output_variance: t[2].exp(),
            output_length: t[3].exp(),
            noise_variance: t[4].exp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.input_variance,
            self.input_length,
            self.output_variance,
            self.output_length,
            self.noise_variance,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("hyperparameters must be positive and finite: {self:?}")))
        }
    }

    /// Prior variance of the latent residual at any point.
    pub fn prior_variance(&self) -> f64 {
        self.input_variance + self.output_variance
    }
}

/// Training inputs and residual targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GpData {
    pub features: Vec<Vec<f64>>,
    pub predictions: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl GpData {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("GP training data".into()));
        }
        let d = self.dim();
        if self.features.len() != self.len() || self.predictions.len() != self.len() {
            return Err(Error::Shape {
                what: "GP training columns",
                expected: self.len(),
                got: self.features.len().min(self.predictions.len()),
            });
        }
        if let Some(bad) = self.features.iter().find(|f| f.len() != d) {
            return Err(Error::Shape {
                what: "GP feature width",
                expected: d,
                got: bad.len(),
            });
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            predictions: idx.iter().map(|&i| self.predictions[i]).collect(),
            residuals: idx.iter().map(|&i| self.residuals[i]).collect(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise squared distances in feature space and output space.
struct Distances {
    input: DMatrix<f64>,
    output: DMatrix<f64>,
}

impl Distances {
    fn new(data: &GpData) -> Self {
        let n = data.len();
        let mut input = DMatrix::zeros(n, n);
        let mut output = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let di = sq_dist(&data.features[i], &data.features[j]);
                let dout = (data.predictions[i] - data.predictions[j]).powi(2);
                input[(i, j)] = di;
                input[(j, i)] = di;
                output[(i, j)] = dout;
                output[(j, i)] = dout;
            }
        }
        Self { input, output }
    }

    fn kernel_parts(&self, h: &Hyperparams) -> (DMatrix<f64>, DMatrix<f64>) {
        let ki = self.input.map(|d| h.input_variance * (-0.5 * d / (h.input_length * h.input_length)).exp());
        let ko = self.output.map(|d| h.output_variance * (-0.5 * d / (h.output_length * h.output_length)).exp());
        (ki, ko)
    }
}

fn factor(mut k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = JITTER_START;
    let mut added = 0.0;
    while jitter <= JITTER_MAX * (1.0 + 1e-12) {
        for i in 0..n {
            k[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = Cholesky::new(k.clone()) {
            debug!(jitter, "cholesky needed jitter");
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: added })
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Log marginal likelihood and its gradient with respect to the log-space
/// hyperparameters.
fn lml_and_grad(dist: &Distances, e: &DVector<f64>, h: &Hyperparams, want_grad: bool) -> Result<(f64, [f64; 5])> {
    let n = e.len();
    let (ki, ko) = dist.kernel_parts(h);
    let mut k = &ki + &ko;
    for i in 0..n {
        k[(i, i)] += h.noise_variance;
    }
    let (chol, _) = factor(k)?;
    let alpha = chol.solve(e);
    let lml = -0.5 * e.dot(&alpha) - 0.5 * log_det(&chol) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return Err(Error::Numerical("non-finite log marginal likelihood".into()));
    }
    let mut grad = [0.0; 5];
    if want_grad {
        let kinv = chol.inverse();
        let li2 = h.input_length * h.input_length;
        let lo2 = h.output_length * h.output_length;
        for i in 0..n {
            for j in 0..n {
                let w = alpha[i] * alpha[j] - kinv[(i, j)];
                grad[0] += w * ki[(i, j)];
                grad[1] += w * ki[(i, j)] * dist.input[(i, j)] / li2;
                grad[2] += w * ko[(i, j)];
                grad[3] += w * ko[(i, j)] * dist.output[(i, j)] / lo2;
            }
            grad[4] += (alpha[i] * alpha[i] - kinv[(i, i)]) * h.noise_variance;
        }
        for g in &mut grad {
            *g *= 0.5;
        }
    }
    Ok((lml, grad))
}

/// Log marginal likelihood of `data` under `hyper`.
pub fn log_marginal_likelihood(data: &GpData, hyper: &Hyperparams) -> Result<f64> {
    data.validate()?;
    hyper.validate()?;
    let e = DVector::from_column_slice(&data.residuals);
    Ok(lml_and_grad(&Distances::new(data), &e, hyper, false)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Hyperparameters are optimized on at most this many points.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 200,
            max_points: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub initial: Hyperparams,
    pub initial_lml: Option<f64>,
    pub final_lml: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub best: Hyperparams,
    pub best_lml: f64,
    /// Indices (into the training data) of the optimization subsample.
    pub subsample: Vec<usize>,
    pub starts: Vec<StartResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn initial_guess(data: &GpData, dist: &Distances) -> Hyperparams {
    let n = data.len();
    let mean = data.residuals.iter().sum::<f64>() / n as f64;
    let var = (data.residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64).max(1e-6);
    let upper = |m: &DMatrix<f64>| -> Vec<f64> {
        (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .filter(|d| *d > 0.0)
            .collect()
    };
    let li = median(upper(&dist.input)).sqrt().max(1e-3);
    let lo = median(upper(&dist.output)).sqrt().max(1e-3);
    Hyperparams {
        input_variance: var / 2.0,
        input_length: li,
        output_variance: var / 2.0,
        output_length: lo,
        noise_variance: var / 4.0,
    }
}

const HISTORY: usize = 6;

fn dot5(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory quasi-Newton ascent with a backtracking line search. Trial
/// points are evaluated without the gradient; only accepted points pay for it.
fn ascend(dist: &Distances, e: &DVector<f64>, start: &Hyperparams, max_iter: usize) -> Result<(Hyperparams, f64, usize)> {
    let mut theta = start.to_log();
    let (mut f, mut g) = lml_and_grad(dist, e, start, true)?;
    let mut memory: std::collections::VecDeque<([f64; 5], [f64; 5], f64)> = std::collections::VecDeque::new();
    let mut iters = 0;
    let mut stalls = 0;
    while iters < max_iter && norm(&g) > 1e-7 {
        iters += 1;
        // Two-loop recursion on the negated objective, flipped back to ascent.
        let mut q = g;
        let mut alphas = [0.0; HISTORY];
        for (k, (sk, yk, rho)) in memory.iter().enumerate().rev() {
            alphas[k] = rho * dot5(sk, &q);
            for i in 0..5 {
                q[i] -= alphas[k] * yk[i];
            }
        }
        let gamma = memory.back().map_or(0.1 / norm(&g).max(1e-12), |(sk, yk, _)| dot5(sk, yk) / dot5(yk, yk));
        for v in &mut q {
            *v *= gamma;
        }
        for (k, (sk, yk, rho)) in memory.iter().enumerate() {
            let beta = rho * dot5(yk, &q);
            for i in 0..5 {
                q[i] += (alphas[k] - beta) * sk[i];
            }
        }
        let mut dir = q;
        if dot5(&dir, &g) <= 0.0 {
            memory.clear();
            let scale = 0.1 / norm(&g).max(1e-12);
            dir = std::array::from_fn(|i| g[i] * scale);
        }
        let slope = dot5(&dir, &g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: [f64; 5] = std::array::from_fn(|i| (theta[i] + t * dir[i]).clamp(-LOG_BOUND, LOG_BOUND));
            if let Ok((fc, _)) = lml_and_grad(dist, e, &Hyperparams::from_log(&cand), false) {
                if fc >= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let Ok((_, gc)) = lml_and_grad(dist, e, &Hyperparams::from_log(&cand), true) else {
            break;
        };
        // Curvature pair for maximization: s = step, y = -(change in gradient).
        let sk: [f64; 5] = std::array::from_fn(|i| cand[i] - theta[i]);
        let yk: [f64; 5] = std::array::from_fn(|i| g[i] - gc[i]);
        let sy = dot5(&sk, &yk);
        if sy > 1e-12 {
            if memory.len() == HISTORY {
                memory.pop_front();
            }
            memory.push_back((sk, yk, 1.0 / sy));
        }
        let gain = fc - f;
        theta = cand;
        f = fc;
        g = gc;
        if gain <= 1e-9 * f.abs().max(1.0) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Ok((Hyperparams::from_log(&theta), f, iters))
}

fn norm(g: &[f64; 5]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Multi-start quasi-Newton ascent on the log marginal likelihood. The first start
/// is a data-driven guess; the others perturb it by up to e^±1.5 per parameter.
pub fn optimize_hyperparams(data: &GpData, cfg: &OptimizerConfig) -> Result<OptimizationReport> {
    data.validate()?;
    if cfg.restarts == 0 {
        return Err(Error::Config("at least one optimizer start is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subsample = if data.len() > cfg.max_points {
        let mut idx = rand::seq::index::sample(&mut rng, data.len(), cfg.max_points).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..data.len()).collect()
    };
    let sub = data.subset(&subsample);
    let dist = Distances::new(&sub);
    let e = DVector::from_column_slice(&sub.residuals);
    let base = initial_guess(&sub, &dist).to_log();

    let mut best: Option<(Hyperparams, f64)> = None;
    let mut starts = Vec::with_capacity(cfg.restarts);
    for s in 0..cfg.restarts {
        let theta: [f64; 5] = if s == 0 {
            base
        } else {
            std::array::from_fn(|i| base[i] + rng.random_range(-1.5..1.5))
        };
        let initial = Hyperparams::from_log(&theta);
        let initial_lml = lml_and_grad(&dist, &e, &initial, false).ok().map(|r| r.0);
        let outcome = if initial_lml.is_some() {
            ascend(&dist, &e, &initial, cfg.max_iter).ok()
        } else {
            None
        };
        if let Some((h, f, _)) = outcome {
            if best.is_none_or(|(_, bf)| f > bf) {
                best = Some((h, f));
            }
        }
        starts.push(StartResult {
            initial,
            initial_lml,
            final_lml: outcome.map(|o| o.1),
            iterations: outcome.map_or(0, |o| o.2),
        });
    }
    let (best, best_lml) = best.ok_or_else(|| Error::Numerical("log marginal likelihood non-finite at every start".into()))?;
    Ok(OptimizationReport {
        best,
        best_lml,
        subsample,
        starts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPrediction {
    /// Original prediction plus the residual mean.
    pub mean: f64,
    /// Posterior variance of the residual, clamped at 0.
    pub variance: f64,
}

/// Anything that turns a predictor output and its hidden features into a
/// calibrated distribution over the ratio.
pub trait Calibrator: Sync {
    fn calibrate(&self, features: &[f64], prediction: f64) -> Result<CalibratedPrediction>;
}

/// A GP conditioned on residual data.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: Hyperparams,
    pub data: GpData,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn condition(data: GpData, hyper: Hyperparams) -> Result<Self> {
        data.validate()?;
        hyper.validate()?;
        let dist = Distances::new(&data);
        let (ki, ko) = dist.kernel_parts(&hyper);
        let mut k = ki + ko;
        for i in 0..data.len() {
            k[(i, i)] += hyper.noise_variance;
        }
        let (chol, jitter) = factor(k)?;
        let alpha = chol.solve(&DVector::from_column_slice(&data.residuals));
        Ok(Self {
            hyper,
            data,
            jitter,
            chol,
            alpha,
        })
    }

    pub fn fit(data: GpData, cfg: &OptimizerConfig) -> Result<(Self, OptimizationReport)> {
        let report = optimize_hyperparams(&data, cfg)?;
        Ok((Self::condition(data, report.best)?, report))
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    fn cross_kernel(&self, features: &[f64], prediction: f64) -> DVector<f64> {
        let h = &self.hyper;
        DVector::from_iterator(
            self.data.len(),
            self.data.features.iter().zip(&self.data.predictions).map(|(f, p)| {
                h.input_variance * (-0.5 * sq_dist(f, features) / (h.input_length * h.input_length)).exp()
                    + h.output_variance * (-0.5 * (p - prediction).powi(2) / (h.output_length * h.output_length)).exp()
            }),
        )
    }

    /// Residual mean and latent variance at a query.
    pub fn posterior(&self, features: &[f64], prediction: f64) -> Result<(f64, f64)> {
        if features.len() != self.dim() {
            return Err(Error::Shape {
                what: "GP query features",
                expected: self.dim(),
                got: features.len(),
            });
        }
        let ks = self.cross_kernel(features, prediction);
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let var = (self.hyper.prior_variance() - v.norm_squared()).max(0.0);
        Ok((mean, var))
    }

    /// Variance of a new noisy observation at the query.
    pub fn predictive_variance(&self, cal: &CalibratedPrediction) -> f64 {
        cal.variance + self.hyper.noise_variance
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let e = DVector::from_column_slice(&self.data.residuals);
        -0.5 * e.dot(&self.alpha) - 0.5 * log_det(&self.chol) - 0.5 * self.data.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

impl Calibrator for GpModel {
    fn calibrate(&self, features: &[f64], prediction: f64) -> Result<CalibratedPrediction> {
        let (correction, variance) = self.posterior(features, prediction)?;
        Ok(CalibratedPrediction {
            mean: prediction + correction,
            variance,
        })
    }
}
