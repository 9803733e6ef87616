//! Fixed-topology prescriptor network: 21 ratios -> 32 tanh -> 8 sigmoid,
//! scaled to NPI levels.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::HISTORY_DAYS;
use crate::forecast::Policy;
use crate::npi::{NpiVector, NPI_COUNT, NPI_MAX_LEVELS};
use crate::predictor::lstm::sigmoid;

pub const PRESCRIPTOR_INPUTS: usize = HISTORY_DAYS;
pub const PRESCRIPTOR_HIDDEN: usize = 32;
pub const GENOME_LEN: usize =
    PRESCRIPTOR_INPUTS * PRESCRIPTOR_HIDDEN + PRESCRIPTOR_HIDDEN + PRESCRIPTOR_HIDDEN * NPI_COUNT + NPI_COUNT;

const W1: usize = PRESCRIPTOR_INPUTS * PRESCRIPTOR_HIDDEN;
const B1: usize = W1 + PRESCRIPTOR_HIDDEN;
const W2: usize = B1 + PRESCRIPTOR_HIDDEN * NPI_COUNT;

/// Flat weights, laid out as `[W1 (21x32 row-major) | b1 | W2 (32x8 row-major) | b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescriptorNet {
    pub weights: Vec<f64>,
}

/// Rounds half away from zero, then clamps into `[0, max]`.
fn to_level(raw: f64, max: u8) -> u8 {
    (raw * f64::from(max)).round().clamp(0.0, f64::from(max)) as u8
}

impl PrescriptorNet {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; GENOME_LEN],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> crate::Result<Self> {
        if weights.len() != GENOME_LEN {
            return Err(crate::Error::Shape {
                what: "prescriptor genome",
                expected: GENOME_LEN,
                got: weights.len(),
            });
        }
        Ok(Self { weights })
    }

    /// Orthogonal weight matrices (QR of a standard-normal draw, sign
    /// corrected so the factorization is unique), zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut w = vec![0.0; GENOME_LEN];
        w[..W1].copy_from_slice(&orthogonal_matrix(PRESCRIPTOR_INPUTS, PRESCRIPTOR_HIDDEN, rng));
        w[B1..W2].copy_from_slice(&orthogonal_matrix(PRESCRIPTOR_HIDDEN, NPI_COUNT, rng));
        Self { weights: w }
    }

    /// Sigmoid outputs in (0, 1) before scaling.
    pub fn raw_outputs(&self, ratios: &[f64]) -> [f64; NPI_COUNT] {
        let w = &self.weights;
        let mut hidden = [0.0; PRESCRIPTOR_HIDDEN];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = w[W1 + j];
            for (i, x) in ratios.iter().take(PRESCRIPTOR_INPUTS).enumerate() {
                s += x * w[i * PRESCRIPTOR_HIDDEN + j];
            }
            *h = s.tanh();
        }
        std::array::from_fn(|k| {
            let mut s = w[W2 + k];
            for (j, h) in hidden.iter().enumerate() {
                s += h * w[B1 + j * NPI_COUNT + k];
            }
            sigmoid(s)
        })
    }

    pub fn prescribe(&self, ratios: &[f64]) -> NpiVector {
        let raw = self.raw_outputs(ratios);
        NpiVector::new(std::array::from_fn(|k| to_level(raw[k], NPI_MAX_LEVELS[k]))).expect("levels clamped into bounds")
    }

    /// Sets every output bias, e.g. to force saturated outputs.
    pub fn set_output_bias(&mut self, bias: f64) {
        self.weights[W2..].iter_mut().for_each(|b| *b = bias);
    }
}

impl Policy for PrescriptorNet {
    fn prescribe(&self, ratios: &[f64]) -> NpiVector {
        PrescriptorNet::prescribe(self, ratios)
    }
}

fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..short {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    let m = if rows < cols { q.transpose() } else { q };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn genome_length() {
        assert_eq!(GENOME_LEN, 968);
    }

    #[test]
    fn zero_net_prescribes_half_levels() {
        assert_eq!(PrescriptorNet::zeros().prescribe(&[1.0; 21]).levels(), &[2, 2, 1, 2, 1, 2, 1, 2]);
    }

    #[test]
    fn saturated_biases() {
        let mut net = PrescriptorNet::zeros();
        net.set_output_bias(-50.0);
        assert_eq!(net.prescribe(&[1.0; 21]), NpiVector::ZERO);
        net.set_output_bias(50.0);
        assert_eq!(net.prescribe(&[1.0; 21]), NpiVector::MAX);
    }

    #[test]
    fn random_nets_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let net = PrescriptorNet {
                weights: (0..GENOME_LEN).map(|_| rng.random_range(-5.0..5.0)).collect(),
            };
            let r: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..3.0)).collect();
            let raw = net.raw_outputs(&r);
            assert!(raw.iter().all(|v| (0.0..=1.0).contains(v)));
            let a = net.prescribe(&r);
            assert!(a.levels().iter().zip(NPI_MAX_LEVELS).all(|(l, m)| *l <= m));
        }
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = PrescriptorNet::orthogonal(&mut rng);
        let w1 = DMatrix::from_row_slice(21, 32, &net.weights[..W1]);
        let gram = &w1 * w1.transpose();
        assert!((gram - DMatrix::identity(21, 21)).abs().max() < 1e-12);
        let w2 = DMatrix::from_row_slice(32, 8, &net.weights[B1..W2]);
        let gram = w2.transpose() * &w2;
        assert!((gram - DMatrix::identity(8, 8)).abs().max() < 1e-12);
        assert!(net.weights[W1..B1].iter().chain(&net.weights[W2..]).all(|b| *b == 0.0));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(to_level(0.5, 3), 2);
        assert_eq!(to_level(0.5, 2), 1);
        assert_eq!(to_level(0.49, 2), 1);
        assert_eq!(to_level(0.24, 2), 0);
    }
}
