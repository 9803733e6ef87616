//! Single-layer LSTM branch with a one-unit dense head, forward and BPTT.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Sigmoid,
    Softplus,
}

impl HeadActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            HeadActivation::Sigmoid => sigmoid(x),
            HeadActivation::Softplus => softplus(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            HeadActivation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            HeadActivation::Softplus => sigmoid(x),
        }
    }
}

/// Dot product with four independent partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// LSTM parameters stored in one flat vector:
/// `[W_x (4H x I) | W_h (4H x H) | b (4H) | head_w (H) | head_b]`,
/// gate blocks ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmBranch {
    pub input: usize,
    pub hidden: usize,
    pub head: HeadActivation,
    pub params: Vec<f64>,
}

/// Per-step activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct BranchCache {
    steps: usize,
    inputs: Vec<f64>,
    /// Post-activation gates per step, `4H` each.
    gates: Vec<f64>,
    /// Cell states, `(steps + 1) * H`, index 0 is the zero initial state.
    cells: Vec<f64>,
    /// Hidden states, same layout as `cells`.
    hiddens: Vec<f64>,
    head_pre: f64,
    pub output: f64,
}

impl BranchCache {
    pub fn final_hidden(&self, hidden: usize) -> &[f64] {
        &self.hiddens[self.steps * hidden..(self.steps + 1) * hidden]
    }
}

impl LstmBranch {
    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * input + 4 * hidden * hidden + 4 * hidden + hidden + 1
    }

    pub fn zeros(input: usize, hidden: usize, head: HeadActivation) -> Self {
        Self {
            input,
            hidden,
            head,
            params: vec![0.0; Self::param_count(input, hidden)],
        }
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(input: usize, hidden: usize, head: HeadActivation, rng: &mut R) -> Self {
        let mut b = Self::zeros(input, hidden, head);
        let scale = 1.0 / (hidden as f64).sqrt();
        let (wx, wh, bias, hw, _) = b.split_mut();
        for w in wx.iter_mut().chain(wh.iter_mut()).chain(hw.iter_mut()) {
            *w = rng.random_range(-scale..scale);
        }
        for v in &mut bias[hidden..2 * hidden] {
            *v = 1.0;
        }
        b
    }

    fn offsets(&self) -> [usize; 5] {
        let h4 = 4 * self.hidden;
        let wx = h4 * self.input;
        let wh = wx + h4 * self.hidden;
        let b = wh + h4;
        let hw = b + self.hidden;
        [wx, wh, b, hw, hw + 1]
    }

    pub fn split(&self) -> (&[f64], &[f64], &[f64], &[f64], f64) {
        let [wx, wh, b, hw, _] = self.offsets();
        (
            &self.params[..wx],
            &self.params[wx..wh],
            &self.params[wh..b],
            &self.params[b..hw],
            self.params[hw],
        )
    }

    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64], &mut f64) {
        let [wx, wh, b, hw, _] = self.offsets();
        let (p_wx, rest) = self.params.split_at_mut(wx);
        let (p_wh, rest) = rest.split_at_mut(wh - wx);
        let (p_b, rest) = rest.split_at_mut(b - wh);
        let (p_hw, rest) = rest.split_at_mut(hw - b);
        (p_wx, p_wh, p_b, p_hw, &mut rest[0])
    }

    /// Index of the dense-head bias within `params`.
    pub fn head_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Runs the branch over `steps` inputs laid out row-major (`steps x input`).
    pub fn forward(&self, inputs: &[f64], cache: &mut BranchCache) {
        let (h, n_in) = (self.hidden, self.input);
        let steps = inputs.len() / n_in;
        let (wx, wh, bias, hw, hb) = self.split();
        cache.steps = steps;
        cache.inputs.clear();
        cache.inputs.extend_from_slice(inputs);
        cache.gates.resize(steps * 4 * h, 0.0);
        cache.cells.resize((steps + 1) * h, 0.0);
        cache.hiddens.resize((steps + 1) * h, 0.0);
        cache.cells[..h].fill(0.0);
        cache.hiddens[..h].fill(0.0);

        for t in 0..steps {
            let x = &inputs[t * n_in..(t + 1) * n_in];
            let (prev_h, next_h) = cache.hiddens.split_at_mut((t + 1) * h);
            let h_prev = &prev_h[t * h..];
            let gates = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
            for (g, row) in gates.iter_mut().enumerate() {
                *row = bias[g] + dot(&wx[g * n_in..(g + 1) * n_in], x) + dot(&wh[g * h..(g + 1) * h], &h_prev[..h]);
            }
            for j in 0..h {
                gates[j] = sigmoid(gates[j]);
                gates[h + j] = sigmoid(gates[h + j]);
                gates[2 * h + j] = gates[2 * h + j].tanh();
                gates[3 * h + j] = sigmoid(gates[3 * h + j]);
            }
            let (prev_c, next_c) = cache.cells.split_at_mut((t + 1) * h);
            let c_prev = &prev_c[t * h..];
            for j in 0..h {
                let c = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                next_c[j] = c;
                next_h[j] = gates[3 * h + j] * c.tanh();
            }
        }
        let last = cache.final_hidden(h);
        let pre = hb + hw.iter().zip(last).map(|(w, v)| w * v).sum::<f64>();
        cache.head_pre = pre;
        cache.output = self.head.apply(pre);
    }

    /// Accumulates `d_output * d(output)/d(params)` into `grad`.
    pub fn backward(&self, cache: &BranchCache, d_output: f64, grad: &mut [f64], scratch: &mut Vec<f64>) {
        let (h, n_in) = (self.hidden, self.input);
        let steps = cache.steps;
        let (_, wh, _, hw, _) = self.split();
        // End offsets of W_x, W_h, bias and head weights; head bias sits at `o_hw`.
        let [o_wx, o_wh, o_b, o_hw, _] = self.offsets();

        let d_pre = d_output * self.head.derivative(cache.head_pre);
        let last = cache.final_hidden(h);
        for j in 0..h {
            grad[o_b + j] += d_pre * last[j];
        }
        grad[o_hw] += d_pre;

        scratch.clear();
        scratch.resize(7 * h, 0.0);
        let (dh, rest) = scratch.split_at_mut(h);
        let (dc, rest) = rest.split_at_mut(h);
        let (da, dh_prev) = rest.split_at_mut(4 * h);
        for j in 0..h {
            dh[j] = d_pre * hw[j];
        }

        for t in (0..steps).rev() {
            let gates = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_prev = &cache.cells[t * h..(t + 1) * h];
            let c = &cache.cells[(t + 1) * h..(t + 2) * h];
            let h_prev = &cache.hiddens[t * h..(t + 1) * h];
            let x = &cache.inputs[t * n_in..(t + 1) * n_in];
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                da[j] = dcj * g * i * (1.0 - i);
                da[h + j] = dcj * c_prev[j] * f * (1.0 - f);
                da[2 * h + j] = dcj * i * (1.0 - g * g);
                da[3 * h + j] = d_o * o * (1.0 - o);
                dc[j] = dcj * f;
            }
            dh_prev.fill(0.0);
            for g in 0..4 * h {
                let a = da[g];
                if a == 0.0 {
                    continue;
                }
                let gx = &mut grad[g * n_in..(g + 1) * n_in];
                for (d, v) in gx.iter_mut().zip(x) {
                    *d += a * v;
                }
                let gh = &mut grad[o_wx + g * h..o_wx + (g + 1) * h];
                for (d, v) in gh.iter_mut().zip(h_prev) {
                    *d += a * v;
                }
                grad[o_wh + g] += a;
                let wh_row = &wh[g * h..(g + 1) * h];
                for (d, w) in dh_prev.iter_mut().zip(wh_row) {
                    *d += a * w;
                }
            }
            dh.copy_from_slice(dh_prev);
        }
    }
}
