//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a forward pass as a flat list of nodes; each node
//! holds its value and the operation that produced it. [`Tape::backward`]
//! walks the list in reverse and accumulates vector-Jacobian products.
//! The op set is exactly what the encoder-decoder network needs, plus a
//! weighted-sum reduction used by tests.

use nalgebra::DMatrix;
use thiserror::Error;

/// Dense f64 matrix used throughout the model.
pub type Mat = DMatrix<f64>;

/// Raw log-std outputs are clamped to this magnitude before `exp`.
pub const SIGMA_RAW_CLAMP: f64 = 12.0;
/// Raw correlation outputs are clamped to this magnitude before `tanh`.
pub const RHO_RAW_CLAMP: f64 = 8.0;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("attention row {row} has no valid key to attend to")]
    EmptyAttentionRow { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the tape; usable as an index into [`Tape::backward`]'s
    /// result.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-side attention mask.
#[derive(Debug, Clone)]
pub enum Mask {
    /// All keys valid.
    None,
    /// Keys flagged `false` receive zero attention weight in every row.
    Keys(Vec<bool>),
    /// Row `i` may attend to keys `0..=i`.
    Causal,
}

impl Mask {
    fn valid(&self, row: usize, col: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Keys(v) => v[col],
            Mask::Causal => col <= row,
        }
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `A * B^T` without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a `1 × c` bias row to every row of `A`.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    MaskedSoftmax(NodeId, Mask),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Mean bivariate Gaussian negative log-likelihood of displacement
    /// targets under raw head outputs `[mu_s mu_d log_sigma_s log_sigma_d
    /// atanh_rho]`.
    GaussianNll {
        raw: NodeId,
        target: Mat,
    },
    /// `sum(x ⊙ w)`: scalar reduction for gradient tests.
    WeightedSum(NodeId, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Distribution parameters recovered from one raw head output row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStep {
    pub mu_s: f64,
    pub mu_d: f64,
    pub sigma_s: f64,
    pub sigma_d: f64,
    pub rho: f64,
}

/// Applies the output activations: identity on means, `exp` on the
/// (clamped) log-stds, `tanh` on the (clamped) correlation.
pub fn gaussian_step_from_raw(raw: &[f64]) -> GaussianStep {
    GaussianStep {
        mu_s: raw[0],
        mu_d: raw[1],
        sigma_s: raw[2].clamp(-SIGMA_RAW_CLAMP, SIGMA_RAW_CLAMP).exp(),
        sigma_d: raw[3].clamp(-SIGMA_RAW_CLAMP, SIGMA_RAW_CLAMP).exp(),
        rho: raw[4].clamp(-RHO_RAW_CLAMP, RHO_RAW_CLAMP).tanh(),
    }
}

/// Per-step bivariate Gaussian NLL for a displacement pair.
pub fn gaussian_nll_step(step: &GaussianStep, target: (f64, f64)) -> f64 {
    let a = (target.0 - step.mu_s) / step.sigma_s;
    let b = (target.1 - step.mu_d) / step.sigma_d;
    let q = 1.0 - step.rho * step.rho;
    let z = a * a - 2.0 * step.rho * a * b + b * b;
    LN_2PI + step.sigma_s.ln() + step.sigma_d.ln() + 0.5 * q.ln() + z / (2.0 * q)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b).transpose();
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        debug_assert_eq!(b.nrows(), 1);
        debug_assert_eq!(b.ncols(), self.value(a).ncols());
        let mut value = self.value(a).clone();
        for mut row in value.row_iter_mut() {
            row += self.nodes[bias.0].value.row(0);
        }
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(a).columns(start, len).into_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = Mat::zeros(rows, total);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            value.columns_mut(at, m.ncols()).copy_from(m);
            at += m.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise softmax over the unmasked columns; masked weights are
    /// exactly zero. A row with no valid key is an error.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Mask) -> Result<NodeId, TapeError> {
        let scores = self.value(a);
        let (rows, cols) = scores.shape();
        let mut value = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if mask.valid(i, j) {
                    max = max.max(scores[(i, j)]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TapeError::EmptyAttentionRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if mask.valid(i, j) {
                    let e = (scores[(i, j)] - max).exp();
                    value[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                value[(i, j)] /= sum;
            }
        }
        Ok(self.push(value, Op::MaskedSoftmax(a, mask)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = Mat::zeros(rows, cols);
        for i in 0..rows {
            let row = input.row(i);
            let mean = row.mean();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                value[(i, j)] = g[(0, j)] * (input[(i, j)] - mean) * inv + b[(0, j)];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta })
    }

    pub fn gaussian_nll(&mut self, raw: NodeId, target: Mat) -> NodeId {
        let r = self.value(raw);
        debug_assert_eq!(r.ncols(), 5);
        debug_assert_eq!(target.ncols(), 2);
        debug_assert_eq!(r.nrows(), target.nrows());
        let steps = r.nrows();
        let mut total = 0.0;
        for i in 0..steps {
            let step = gaussian_step_from_raw(&[r[(i, 0)], r[(i, 1)], r[(i, 2)], r[(i, 3)], r[(i, 4)]]);
            total += gaussian_nll_step(&step, (target[(i, 0)], target[(i, 1)]));
        }
        let value = Mat::from_element(1, 1, total / steps as f64);
        self.push(value, Op::GaussianNll { raw, target })
    }

    pub fn weighted_sum(&mut self, a: NodeId, weights: Mat) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), weights.shape());
        let value = Mat::from_element(1, 1, self.value(a).dot(&weights));
        self.push(value, Op::WeightedSum(a, weights))
    }

    /// Gradients of the scalar at `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Vec<Mat> {
        debug_assert_eq!(self.value(loss).shape(), (1, 1));
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.nrows(), n.value.ncols()))
            .collect();
        grads[loss.0][(0, 0)] = 1.0;

        for idx in (0..=loss.0).rev() {
            if grads[idx].iter().all(|v| *v == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = &g * self.value(*b).transpose();
                    let db = self.value(*a).transpose() * &g;
                    grads[a.0] += da;
                    grads[b.0] += db;
                }
                Op::MatMulNT(a, b) => {
                    let da = &g * self.value(*b);
                    let db = g.transpose() * self.value(*a);
                    grads[a.0] += da;
                    grads[b.0] += db;
                }
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::AddBias(a, bias) => {
                    grads[a.0] += &g;
                    let mut db = Mat::zeros(1, g.ncols());
                    for row in g.row_iter() {
                        let mut acc = db.row_mut(0);
                        acc += row;
                    }
                    grads[bias.0] += db;
                }
                Op::Scale(a, factor) => {
                    grads[a.0] += &g * *factor;
                }
                Op::Relu(a) => {
                    let mut da = g.clone();
                    let x = self.value(*a);
                    for (dv, xv) in da.iter_mut().zip(x.iter()) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    grads[a.0] += da;
                }
                Op::SliceCols(a, start, len) => {
                    let mut da = Mat::zeros(grads[a.0].nrows(), grads[a.0].ncols());
                    da.columns_mut(*start, *len).copy_from(&g);
                    grads[a.0] += da;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let dp = g.columns(at, w).into_owned();
                        grads[p.0] += dp;
                        at += w;
                    }
                }
                Op::MaskedSoftmax(a, mask) => {
                    let p = &self.nodes[idx].value;
                    let (rows, cols) = p.shape();
                    let mut da = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[(i, j)] * p[(i, j)];
                        }
                        for j in 0..cols {
                            if mask.valid(i, j) {
                                da[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                            }
                        }
                    }
                    grads[a.0] += da;
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let eps = 1e-5;
                    let input = self.value(*x);
                    let (rows, cols) = input.shape();
                    let gam = self.value(*gamma);
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for i in 0..rows {
                        let row = input.row(i);
                        let mean = row.mean();
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..cols).map(|j| g[(i, j)] * gam[(0, j)]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols as f64;
                        for j in 0..cols {
                            dg[(0, j)] += g[(i, j)] * xhat[j];
                            db[(0, j)] += g[(i, j)];
                            dx[(i, j)] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    grads[x.0] += dx;
                    grads[gamma.0] += dg;
                    grads[beta.0] += db;
                }
                Op::GaussianNll { raw, target } => {
                    let r = self.value(*raw);
                    let steps = r.nrows();
                    let scale = g[(0, 0)] / steps as f64;
                    let mut dr = Mat::zeros(steps, 5);
                    for i in 0..steps {
                        let raw_row =
                            [r[(i, 0)], r[(i, 1)], r[(i, 2)], r[(i, 3)], r[(i, 4)]];
                        let s = gaussian_step_from_raw(&raw_row);
                        let a = (target[(i, 0)] - s.mu_s) / s.sigma_s;
                        let b = (target[(i, 1)] - s.mu_d) / s.sigma_d;
                        let q = 1.0 - s.rho * s.rho;
                        let z = a * a - 2.0 * s.rho * a * b + b * b;
                        dr[(i, 0)] = -(a - s.rho * b) / (s.sigma_s * q) * scale;
                        dr[(i, 1)] = -(b - s.rho * a) / (s.sigma_d * q) * scale;
                        // d/d(log sigma); zero where the clamp is active.
                        if raw_row[2].abs() < SIGMA_RAW_CLAMP {
                            dr[(i, 2)] = (1.0 - (a * a - s.rho * a * b) / q) * scale;
                        }
                        if raw_row[3].abs() < SIGMA_RAW_CLAMP {
                            dr[(i, 3)] = (1.0 - (b * b - s.rho * a * b) / q) * scale;
                        }
                        if raw_row[4].abs() < RHO_RAW_CLAMP {
                            let dnll_drho = -s.rho / q + (s.rho * z - a * b * q) / (q * q);
                            dr[(i, 4)] = dnll_drho * q * scale;
                        }
                    }
                    grads[raw.0] += dr;
                }
                Op::WeightedSum(a, weights) => {
                    grads[a.0] += weights * g[(0, 0)];
                }
            }
        }
        grads
    }
}
