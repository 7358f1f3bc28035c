//! Sparse autoencoder with TopK (or ReLU) gating and a manifold smoothness
//! penalty on pre-activations.
//!
//! The encoder computes `a = W_enc (h - b_pre) + b_enc`; the gate keeps the
//! k largest positive entries (ties to the smaller index); the decoder
//! reconstructs `h_hat = W_dec z + b_pre` with unit-norm columns. The penalty
//! couples pre-activations of neighbors on the embedding k-NN graph, which is
//! what feeds gradient to dictionary elements the gate would otherwise starve.

mod adam;
mod grad;
mod train;

pub use adam::{adam_step, AdamState};
pub use grad::{loss_and_gradients, Gradients, LossBreakdown};
pub use train::{
    activation_stats, alive_census, explained_variance, redundancy, train, EpochLoss,
    FeatureStats, RedundancyReport, TrainData, TrainProvenance, TrainedSae,
};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum SaeError {
    DimensionMismatch { expected: usize, found: usize },
    InvalidConfig { detail: String },
    InvalidParams { detail: String },
    /// A single objective evaluation came out non-finite.
    NonFiniteLoss,
    /// Loss became non-finite: training diverged.
    Divergence { epoch: usize, batch: usize },
    GraphMismatch { detail: String },
    TooFewAliveFeatures { alive: usize },
}

impl core::fmt::Display for SaeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SaeError::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            SaeError::InvalidConfig { detail } => write!(f, "invalid train config: {detail}"),
            SaeError::InvalidParams { detail } => write!(f, "invalid parameters: {detail}"),
            SaeError::NonFiniteLoss => write!(f, "loss is not finite"),
            SaeError::Divergence { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            SaeError::GraphMismatch { detail } => write!(f, "graph mismatch: {detail}"),
            SaeError::TooFewAliveFeatures { alive } => {
                write!(f, "need at least 2 alive features, have {alive}")
            }
        }
    }
}

impl core::error::Error for SaeError {}

/// Sparsity gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    TopK { k: usize },
    Relu,
}

/// Encoder/decoder parameters. Decoder columns are kept unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// d_sae x d.
    pub(crate) w_enc: Matrix,
    pub(crate) b_enc: Vec<f64>,
    /// d x d_sae with unit-norm columns.
    pub(crate) w_dec: Matrix,
    pub(crate) b_pre: Vec<f64>,
}

impl SaeParams {
    pub fn new(
        w_enc: Matrix,
        b_enc: Vec<f64>,
        w_dec: Matrix,
        b_pre: Vec<f64>,
    ) -> Result<Self, SaeError> {
        let d_sae = w_enc.rows();
        let d = w_enc.cols();
        if w_dec.rows() != d || w_dec.cols() != d_sae {
            return Err(SaeError::InvalidParams {
                detail: format!(
                    "w_dec is {}x{}, expected {}x{}",
                    w_dec.rows(),
                    w_dec.cols(),
                    d,
                    d_sae
                ),
            });
        }
        if b_enc.len() != d_sae || b_pre.len() != d {
            return Err(SaeError::InvalidParams {
                detail: "bias lengths do not match weight shapes".into(),
            });
        }
        if !(w_enc.is_finite()
            && w_dec.is_finite()
            && b_enc.iter().all(|v| v.is_finite())
            && b_pre.iter().all(|v| v.is_finite()))
        {
            return Err(SaeError::InvalidParams {
                detail: "non-finite parameter entry".into(),
            });
        }
        for j in 0..d_sae {
            let mut s = 0.0;
            for r in 0..d {
                let v = w_dec.get(r, j);
                s += v * v;
            }
            let norm = libm::sqrt(s);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(SaeError::InvalidParams {
                    detail: format!("decoder column {j} has norm {norm}"),
                });
            }
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
        })
    }

    /// Build parameters checking shapes and finiteness but not the decoder
    /// unit-norm constraint. Intended for objective probing (finite
    /// differences walk raw coordinates) and tests; training always goes
    /// through [`SaeParams::new`].
    pub fn new_raw(
        w_enc: Matrix,
        b_enc: Vec<f64>,
        w_dec: Matrix,
        b_pre: Vec<f64>,
    ) -> Result<Self, SaeError> {
        let d_sae = w_enc.rows();
        let d = w_enc.cols();
        if w_dec.rows() != d || w_dec.cols() != d_sae || b_enc.len() != d_sae || b_pre.len() != d
        {
            return Err(SaeError::InvalidParams {
                detail: "shape mismatch".into(),
            });
        }
        if !(w_enc.is_finite()
            && w_dec.is_finite()
            && b_enc.iter().all(|v| v.is_finite())
            && b_pre.iter().all(|v| v.is_finite()))
        {
            return Err(SaeError::InvalidParams {
                detail: "non-finite parameter entry".into(),
            });
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
        })
    }

    pub fn d(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn w_enc(&self) -> &Matrix {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f64] {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &Matrix {
        &self.w_dec
    }

    pub fn b_pre(&self) -> &[f64] {
        &self.b_pre
    }

    /// Decoder column j.
    pub fn dict_column(&self, j: usize) -> Vec<f64> {
        (0..self.d()).map(|r| self.w_dec.get(r, j)).collect()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub activation: Activation,
    /// Dictionary expansion factor: d_sae = d * expansion.
    pub expansion: usize,
    /// Manifold penalty weight; 0 recovers the standard SAE.
    pub lambda: f64,
    /// Manifold graph out-degree.
    pub k_nn: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train fraction of the subject-level holdout split.
    pub split_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self, d: usize) -> Result<(), SaeError> {
        let d_sae = d * self.expansion;
        if self.expansion == 0 || d_sae == 0 {
            return Err(SaeError::InvalidConfig {
                detail: "expansion must be positive".into(),
            });
        }
        if let Activation::TopK { k } = self.activation {
            if k == 0 || k > d_sae {
                return Err(SaeError::InvalidConfig {
                    detail: format!("topk k={k} out of range for d_sae={d_sae}"),
                });
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SaeError::InvalidConfig {
                detail: "lambda must be finite and >= 0".into(),
            });
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SaeError::InvalidConfig {
                detail: "epochs and batch_size must be positive".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SaeError::InvalidConfig {
                detail: "lr must be finite and positive".into(),
            });
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(SaeError::InvalidConfig {
                detail: "split_fraction must lie in (0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// Pre-activations `a = W_enc (h - b_pre) + b_enc`.
pub fn encode_pre(params: &SaeParams, h: &[f64]) -> Result<Vec<f64>, SaeError> {
    if h.len() != params.d() {
        return Err(SaeError::DimensionMismatch {
            expected: params.d(),
            found: h.len(),
        });
    }
    Ok(encode_pre_unchecked(params, h))
}

pub(crate) fn encode_pre_unchecked(params: &SaeParams, h: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = h.iter().zip(&params.b_pre).map(|(x, b)| x - b).collect();
    let mut a = params.w_enc.matvec(&shifted);
    for (ai, bi) in a.iter_mut().zip(&params.b_enc) {
        *ai += bi;
    }
    a
}

/// Indices of the k largest entries of `a` under the total order
/// (value descending, index ascending), returned in ascending index order.
pub(crate) fn topk_indices(a: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= a.len());
    // Bounded insertion, mirroring the neighbor selection in `manifold`.
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (j, &v) in a.iter().enumerate() {
        if best.len() == k {
            let (lj, lv) = best[k - 1];
            if v < lv || (v == lv && j > lj) {
                continue;
            }
        }
        let pos = best
            .iter()
            .position(|&(bj, bv)| v > bv || (v == bv && j < bj))
            .unwrap_or(best.len());
        best.insert(pos, (j, v));
        if best.len() > k {
            best.pop();
        }
    }
    let mut idx: Vec<usize> = best.into_iter().map(|(j, _)| j).collect();
    idx.sort_unstable();
    idx
}

/// TopK gate: keep the k largest entries (ties to the smaller index), then
/// ReLU. At most k nonzeros; fewer when fewer than k entries are positive.
pub fn topk_activate(a: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1 && k <= a.len(), "k={} out of range", k);
    let mut z = vec![0.0; a.len()];
    for j in topk_indices(a, k) {
        if a[j] > 0.0 {
            z[j] = a[j];
        }
    }
    z
}

/// Elementwise ReLU.
pub fn relu_activate(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn apply_activation(a: &[f64], activation: Activation) -> Vec<f64> {
    match activation {
        Activation::TopK { k } => topk_activate(a, k),
        Activation::Relu => relu_activate(a),
    }
}

/// Decoder: `h_hat = W_dec z + b_pre`.
pub fn decode(params: &SaeParams, z: &[f64]) -> Result<Vec<f64>, SaeError> {
    if z.len() != params.d_sae() {
        return Err(SaeError::DimensionMismatch {
            expected: params.d_sae(),
            found: z.len(),
        });
    }
    Ok(decode_support(
        params,
        &z.iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, &v)| (j, v))
            .collect::<Vec<_>>(),
    ))
}

/// Decode from an explicit (index, value) support list.
pub(crate) fn decode_support(params: &SaeParams, support: &[(usize, f64)]) -> Vec<f64> {
    let mut out = params.b_pre.clone();
    let d_sae = params.d_sae();
    for &(j, zj) in support {
        let col = &params.w_dec.data()[j..];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot += col[c * d_sae] * zj;
        }
    }
    out
}

/// An edge prepared for the penalty: batch-local source row, slot into the
/// neighbor pre-activation block, kernel weight.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyEdge {
    pub src_row: usize,
    pub neighbor_slot: usize,
    pub weight: f64,
}

/// Mean-normalized manifold penalty over the given edges:
/// `(1 / |edges|) * sum_e w_e * ||a_src - a_tgt||^2`.
///
/// Returns 0 for an empty edge list (the caller is expected to warn).
pub fn manifold_penalty(
    pre_batch: &Matrix,
    pre_neighbors: &Matrix,
    edges: &[PenaltyEdge],
) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for e in edges {
        let ai = pre_batch.row(e.src_row);
        let aj = pre_neighbors.row(e.neighbor_slot);
        let mut s = 0.0;
        for (x, y) in ai.iter().zip(aj) {
            let diff = x - y;
            s += diff * diff;
        }
        total += e.weight * s;
    }
    total / edges.len() as f64
}

/// Unit-norm check helper for tests.
#[cfg(test)]
pub(crate) fn decoder_column_norms(w_dec: &Matrix) -> Vec<f64> {
    let d = w_dec.rows();
    let d_sae = w_dec.cols();
    let mut norms = vec![0.0; d_sae];
    for r in 0..d {
        let row = w_dec.row(r);
        for (j, v) in row.iter().enumerate() {
            norms[j] += v * v;
        }
    }
    for n in &mut norms {
        *n = libm::sqrt(*n);
    }
    norms
}

pub(crate) fn dict_column_dot(w_dec: &Matrix, j: usize, x: &[f64]) -> f64 {
    let d_sae = w_dec.cols();
    let col = &w_dec.data()[j..];
    let mut s = 0.0;
    for (c, xi) in x.iter().enumerate() {
        s += col[c * d_sae] * xi;
    }
    s
}
