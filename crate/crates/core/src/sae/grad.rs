//! Analytic gradients of the full training objective.
//!
//! Objective over a batch B with edge set E drawn from the manifold graph:
//!
//! ```text
//! L = (1/B) sum_i ||h_i - h_hat_i||^2
//!   + lambda * (1/|E|) sum_(i,j) w_ij ||a_i - a_j||^2
//! ```
//!
//! The gate is treated as a fixed selection mask: the reconstruction term
//! backpropagates only through coordinates with z > 0. The penalty term acts
//! on raw pre-activations of both batch samples and their graph neighbors,
//! so it reaches every encoder row regardless of the gate. Neighbors carry
//! no reconstruction loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::manifold::{neighbor_batch, ManifoldGraph};
use crate::matrix::Matrix;
use crate::sae::{
    decode_support, dict_column_dot, encode_pre_unchecked, topk_indices, Activation, SaeError,
    SaeParams,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean squared reconstruction error over the batch.
    pub reconstruction: f64,
    /// Mean-over-edges penalty value, before the lambda weight.
    pub manifold: f64,
    /// reconstruction + lambda * manifold.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    pub w_dec: Matrix,
    pub b_pre: Vec<f64>,
}

/// Support (index, value) pairs of the gated code for one sample.
fn support_of(a: &[f64], activation: Activation) -> Vec<(usize, f64)> {
    match activation {
        Activation::TopK { k } => topk_indices(a, k)
            .into_iter()
            .filter(|&j| a[j] > 0.0)
            .map(|j| (j, a[j]))
            .collect(),
        Activation::Relu => a
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(j, &v)| (j, v))
            .collect(),
    }
}

pub fn loss_and_gradients(
    params: &SaeParams,
    h: &Matrix,
    batch_indices: &[usize],
    graph: Option<&ManifoldGraph>,
    lambda: f64,
    activation: Activation,
) -> Result<(LossBreakdown, Gradients), SaeError> {
    let d = params.d();
    let d_sae = params.d_sae();
    if h.cols() != d {
        return Err(SaeError::DimensionMismatch {
            expected: d,
            found: h.cols(),
        });
    }
    if batch_indices.is_empty() {
        return Err(SaeError::InvalidConfig {
            detail: "empty batch".into(),
        });
    }
    let use_manifold = lambda != 0.0;
    if use_manifold && graph.is_none() {
        return Err(SaeError::GraphMismatch {
            detail: "lambda > 0 requires a manifold graph".into(),
        });
    }

    let b = batch_indices.len();
    let inv_b = 1.0 / b as f64;

    let mut grad_w_enc = Matrix::zeros(d_sae, d);
    let mut grad_b_enc = vec![0.0; d_sae];
    let mut grad_w_dec = Matrix::zeros(d, d_sae);
    let mut grad_b_pre = vec![0.0; d];
    // Sum of dL/da over every encoded sample; used for the b_pre chain rule.
    let mut g_sum = vec![0.0; d_sae];

    // Forward pass over the batch.
    let mut x_batch = Matrix::zeros(b, d);
    let mut a_batch = Matrix::zeros(b, d_sae);
    let mut supports: Vec<Vec<(usize, f64)>> = Vec::with_capacity(b);
    for (row, &idx) in batch_indices.iter().enumerate() {
        let h_row = h.row(idx);
        for (c, slot) in x_batch.row_mut(row).iter_mut().enumerate() {
            *slot = h_row[c] - params.b_pre[c];
        }
        let a = encode_pre_unchecked(params, h_row);
        supports.push(support_of(&a, activation));
        a_batch.row_mut(row).copy_from_slice(&a);
    }

    // Reconstruction term and its gradients.
    let mut rec_raw = 0.0;
    // Scaled residuals r_i = (2/B)(h_hat_i - h_i), and the per-sample
    // reconstruction gradient on the support, kept for the encoder pass.
    let mut residuals = Matrix::zeros(b, d);
    let mut g_rec: Vec<Vec<(usize, f64)>> = Vec::with_capacity(b);
    for (row, &idx) in batch_indices.iter().enumerate() {
        let h_hat = decode_support(params, &supports[row]);
        let h_row = h.row(idx);
        let r = residuals.row_mut(row);
        for c in 0..d {
            let raw = h_hat[c] - h_row[c];
            rec_raw += raw * raw;
            r[c] = 2.0 * inv_b * raw;
        }
        let r = residuals.row(row);
        for c in 0..d {
            grad_b_pre[c] += r[c];
        }
        let mut g_row = Vec::with_capacity(supports[row].len());
        for &(j, zj) in &supports[row] {
            // dL/dW_dec[:,j] += r * z_j
            for (c, rc) in r.iter().enumerate() {
                let cur = grad_w_dec.get(c, j);
                grad_w_dec.set(c, j, cur + rc * zj);
            }
            // dL/da_j through the gate: column_j . r
            g_row.push((j, dict_column_dot(&params.w_dec, j, r)));
        }
        g_rec.push(g_row);
    }

    // Manifold term: pre-activations of batch rows and of their neighbors.
    let mut manifold = 0.0;
    if use_manifold {
        let graph = graph.expect("checked above");
        if graph.n_nodes() != h.rows() {
            return Err(SaeError::GraphMismatch {
                detail: alloc::format!(
                    "graph has {} nodes but data has {} rows",
                    graph.n_nodes(),
                    h.rows()
                ),
            });
        }
        let (edges, unique) =
            neighbor_batch(graph, batch_indices).map_err(|e| SaeError::GraphMismatch {
                detail: alloc::string::ToString::to_string(&e),
            })?;

        let u = unique.len();
        let mut x_nbrs = Matrix::zeros(u, d);
        let mut a_nbrs = Matrix::zeros(u, d_sae);
        for (slot, &idx) in unique.iter().enumerate() {
            let h_row = h.row(idx);
            for (c, s) in x_nbrs.row_mut(slot).iter_mut().enumerate() {
                *s = h_row[c] - params.b_pre[c];
            }
            let a = encode_pre_unchecked(params, h_row);
            a_nbrs.row_mut(slot).copy_from_slice(&a);
        }

        let coef = 2.0 * lambda / edges.len() as f64;
        let mut g_man_batch = Matrix::zeros(b, d_sae);
        let mut g_man_nbrs = Matrix::zeros(u, d_sae);
        let mut man_raw = 0.0;
        for e in &edges {
            let ai = a_batch.row(e.src_in_batch);
            let aj = a_nbrs.row(e.target_slot);
            let mut sq = 0.0;
            for c in 0..d_sae {
                let diff = ai[c] - aj[c];
                sq += diff * diff;
                let push = coef * e.weight * diff;
                let cur = g_man_batch.get(e.src_in_batch, c);
                g_man_batch.set(e.src_in_batch, c, cur + push);
                let cur = g_man_nbrs.get(e.target_slot, c);
                g_man_nbrs.set(e.target_slot, c, cur - push);
            }
            man_raw += e.weight * sq;
        }
        manifold = man_raw / edges.len() as f64;

        // Dense encoder backward: dL/da is nonzero on every coordinate.
        for row in 0..b {
            let mut g = g_man_batch.row(row).to_vec();
            for &(j, gr) in &g_rec[row] {
                g[j] += gr;
            }
            let x = x_batch.row(row);
            for j in 0..d_sae {
                let gj = g[j];
                grad_b_enc[j] += gj;
                g_sum[j] += gj;
                let w_row = grad_w_enc.row_mut(j);
                for (c, xc) in x.iter().enumerate() {
                    w_row[c] += gj * xc;
                }
            }
        }
        for slot in 0..u {
            let g = g_man_nbrs.row(slot);
            let x = x_nbrs.row(slot);
            for j in 0..d_sae {
                let gj = g[j];
                grad_b_enc[j] += gj;
                g_sum[j] += gj;
                let w_row = grad_w_enc.row_mut(j);
                for (c, xc) in x.iter().enumerate() {
                    w_row[c] += gj * xc;
                }
            }
        }
    } else {
        // Sparse encoder backward: only gated coordinates carry gradient.
        for row in 0..b {
            let x = x_batch.row(row);
            for &(j, gj) in &g_rec[row] {
                grad_b_enc[j] += gj;
                g_sum[j] += gj;
                let w_row = grad_w_enc.row_mut(j);
                for (c, xc) in x.iter().enumerate() {
                    w_row[c] += gj * xc;
                }
            }
        }
    }

    // b_pre enters every pre-activation with weight -W_enc.
    let enc_pullback = params.w_enc.matvec_t(&g_sum);
    for (c, slot) in grad_b_pre.iter_mut().enumerate() {
        *slot -= enc_pullback[c];
    }

    let reconstruction = rec_raw * inv_b;
    let total = reconstruction + lambda * manifold;
    if !total.is_finite() {
        return Err(SaeError::NonFiniteLoss);
    }
    Ok((
        LossBreakdown {
            reconstruction,
            manifold,
            total,
        },
        Gradients {
            w_enc: grad_w_enc,
            b_enc: grad_b_enc,
            w_dec: grad_w_dec,
            b_pre: grad_b_pre,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingMatrix;
    use crate::manifold::build_knn_graph;
    use crate::matrix::dot;
    use crate::rng::Rng;
    use alloc::format;
    use alloc::string::String;

    /// Evaluate only the loss at the given parameters (finite-difference probe).
    fn loss_at(
        params: &SaeParams,
        h: &Matrix,
        batch: &[usize],
        graph: Option<&ManifoldGraph>,
        lambda: f64,
        activation: Activation,
    ) -> f64 {
        loss_and_gradients(params, h, batch, graph, lambda, activation)
            .unwrap()
            .0
            .total
    }

    fn perturbed(params: &SaeParams, block: usize, idx: usize, eps: f64) -> SaeParams {
        let mut w_enc = params.w_enc().clone();
        let mut b_enc = params.b_enc().to_vec();
        let mut w_dec = params.w_dec().clone();
        let mut b_pre = params.b_pre().to_vec();
        match block {
            0 => w_enc.data_mut()[idx] += eps,
            1 => b_enc[idx] += eps,
            2 => w_dec.data_mut()[idx] += eps,
            _ => b_pre[idx] += eps,
        }
        // Bypass the unit-norm validation: finite differences probe raw
        // coordinates of the objective.
        SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
        }
    }

    pub(crate) fn finite_difference_check(
        params: &SaeParams,
        h: &Matrix,
        batch: &[usize],
        graph: Option<&ManifoldGraph>,
        lambda: f64,
        activation: Activation,
        step: f64,
        tol: f64,
    ) -> Result<(), String> {
        let (_, grads) = loss_and_gradients(params, h, batch, graph, lambda, activation).unwrap();
        let blocks: [(&str, &[f64]); 4] = [
            ("w_enc", grads.w_enc.data()),
            ("b_enc", &grads.b_enc),
            ("w_dec", grads.w_dec.data()),
            ("b_pre", &grads.b_pre),
        ];
        for (block, (name, analytic)) in blocks.iter().enumerate() {
            for (idx, &g) in analytic.iter().enumerate() {
                let plus = loss_at(
                    &perturbed(params, block, idx, step),
                    h,
                    batch,
                    graph,
                    lambda,
                    activation,
                );
                let minus = loss_at(
                    &perturbed(params, block, idx, -step),
                    h,
                    batch,
                    graph,
                    lambda,
                    activation,
                );
                let numeric = (plus - minus) / (2.0 * step);
                let denom = f64::max(1e-8, f64::max(libm::fabs(g), libm::fabs(numeric)));
                let rel = libm::fabs(g - numeric) / denom;
                if rel >= tol && libm::fabs(g - numeric) > 1e-9 {
                    return Err(format!(
                        "{name}[{idx}]: analytic {g:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
                    ));
                }
            }
        }
        Ok(())
    }

    fn random_instance(seed: u64) -> (SaeParams, Matrix, ManifoldGraph) {
        let d = 6;
        let d_sae = 12;
        let n = 10;
        let params = crate::sae::tests::random_params(d, d_sae, seed);
        let mut rng = Rng::new(seed ^ 0xabcdef);
        let h = Matrix::from_vec(n, d, rng.normal_vec(n * d));
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let emb = EmbeddingMatrix::new(h.clone(), ids, None).unwrap();
        let graph = build_knn_graph(&emb, 2).unwrap();
        (params, h, graph)
    }

    #[test]
    fn gradients_match_finite_differences_topk() {
        let (params, h, graph) = random_instance(21);
        finite_difference_check(
            &params,
            &h,
            &[0, 3, 5, 7],
            Some(&graph),
            0.5,
            Activation::TopK { k: 2 },
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn gradients_match_finite_differences_relu_lambda_zero() {
        let (params, h, _) = random_instance(22);
        finite_difference_check(
            &params,
            &h,
            &[1, 2, 4, 8],
            None,
            0.0,
            Activation::Relu,
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn perfect_autoencoder_has_vanishing_gradients() {
        // Data lies in the span of k orthonormal directions with positive
        // coefficients; the decoder holds those directions, the encoder is
        // its transpose. Reconstruction is exact, so its gradient vanishes.
        let d = 6;
        let d_sae = 12;
        let k = 3;
        let mut rng = Rng::new(33);
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..d_sae {
            let mut v = rng.normal_vec(d);
            for existing in dirs.iter().take(k) {
                let p = dot(&v, existing);
                for (vi, ei) in v.iter_mut().zip(existing) {
                    *vi -= p * ei;
                }
            }
            let norm = libm::sqrt(dot(&v, &v));
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
        let w_dec = Matrix::from_fn(d, d_sae, |r, c| dirs[c][r]);
        let w_enc = Matrix::from_fn(d_sae, d, |r, c| dirs[r][c]);
        let params =
            SaeParams::new(w_enc, vec![0.0; d_sae], w_dec, vec![0.0; d]).unwrap();

        let n = 8;
        let mut h = Matrix::zeros(n, d);
        for r in 0..n {
            let coeffs: Vec<f64> = (0..k).map(|_| libm::fabs(rng.normal()) + 0.1).collect();
            for c in 0..d {
                let mut v = 0.0;
                for (f, coeff) in coeffs.iter().enumerate() {
                    v += coeff * dirs[f][c];
                }
                h.set(r, c, v);
            }
        }
        let batch: Vec<usize> = (0..n).collect();
        let (loss, grads) = loss_and_gradients(
            &params,
            &h,
            &batch,
            None,
            0.0,
            Activation::TopK { k },
        )
        .unwrap();
        assert!(loss.reconstruction < 1e-20, "rec {}", loss.reconstruction);
        for g in [
            grads.w_enc.data(),
            &grads.b_enc[..],
            grads.w_dec.data(),
            &grads.b_pre[..],
        ] {
            let norm = libm::sqrt(g.iter().map(|v| v * v).sum::<f64>());
            assert!(norm < 1e-8, "gradient norm {norm}");
        }
    }

    #[test]
    fn manifold_contributes_nothing_when_preactivations_equal() {
        // W_enc = 0 makes every pre-activation equal to b_enc, putting the
        // penalty at its minimum: gradients must match the lambda = 0 run
        // exactly.
        let d = 4;
        let d_sae = 8;
        let base = crate::sae::tests::random_params(d, d_sae, 44);
        let params = SaeParams {
            w_enc: Matrix::zeros(d_sae, d),
            b_enc: base.b_enc().to_vec(),
            w_dec: base.w_dec().clone(),
            b_pre: base.b_pre().to_vec(),
        };
        let mut rng = Rng::new(45);
        let n = 8;
        let h = Matrix::from_vec(n, d, rng.normal_vec(n * d));
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let emb = EmbeddingMatrix::new(h.clone(), ids, None).unwrap();
        let graph = build_knn_graph(&emb, 2).unwrap();
        let batch = [0, 2, 5];

        let (loss_m, grads_m) = loss_and_gradients(
            &params,
            &h,
            &batch,
            Some(&graph),
            1.5,
            Activation::TopK { k: 3 },
        )
        .unwrap();
        let (loss_0, grads_0) =
            loss_and_gradients(&params, &h, &batch, None, 0.0, Activation::TopK { k: 3 })
                .unwrap();
        assert_eq!(loss_m.manifold, 0.0);
        assert_eq!(loss_m.reconstruction, loss_0.reconstruction);
        assert_eq!(grads_m.w_enc, grads_0.w_enc);
        assert_eq!(grads_m.b_enc, grads_0.b_enc);
        assert_eq!(grads_m.w_dec, grads_0.w_dec);
        assert_eq!(grads_m.b_pre, grads_0.b_pre);
    }

    #[test]
    fn empty_batch_rejected() {
        let (params, h, _) = random_instance(50);
        assert!(matches!(
            loss_and_gradients(&params, &h, &[], None, 0.0, Activation::Relu),
            Err(SaeError::InvalidConfig { .. })
        ));
    }
}
