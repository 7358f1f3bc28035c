//! Training loop, alive-feature census, activation statistics, and the
//! explained-variance metric.
//!
//! Training is one sequential stream of Adam steps: fixed seeded
//! initialization, fixed seeded epoch shuffles, batches in permutation order
//! with the last short batch kept. The result is bit-identical across runs
//! and thread counts.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::manifold::ManifoldGraph;
use crate::matrix::{dot, pearson, Matrix};
use crate::rng::{sub_seed, Rng};
use crate::sae::{
    adam_step, apply_activation, encode_pre_unchecked, loss_and_gradients, AdamState, SaeError,
    SaeParams, TrainConfig,
};

/// Per-epoch loss record (batch-size-weighted means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub reconstruction: f64,
    /// Mean-over-edges penalty value before the lambda weight; 0 when
    /// lambda = 0.
    pub manifold: f64,
    pub total: f64,
}

/// Auditable facts about how a model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    /// The penalty divides by the number of edges in the batch (B*k), so
    /// lambda is comparable across batch sizes.
    pub penalty_normalization: String,
    pub n_train_rows: usize,
    pub n_valid_rows: usize,
    pub graph_k: Option<usize>,
    pub graph_sigma: Option<f64>,
}

/// Training data: the rows the optimizer sees plus an optional held-out
/// block for the explained-variance report.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Matrix,
    pub valid: Option<&'a Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSae {
    pub params: SaeParams,
    pub config: TrainConfig,
    pub loss_history: Vec<EpochLoss>,
    /// 1 - ||H - H_hat||^2_F / ||H - mean(H)||^2_F on the held-out rows;
    /// `None` when no held-out rows were provided.
    pub explained_variance: Option<f64>,
    /// Computed over the full training set after the final step.
    pub alive_mask: Vec<bool>,
    pub provenance: TrainProvenance,
}

impl TrainedSae {
    /// Wrap frozen parameters as a usable model (checkpoint loading,
    /// hand-built reference decompositions). The alive mask is computed over
    /// the given rows.
    pub fn from_parts(
        params: SaeParams,
        config: TrainConfig,
        loss_history: Vec<EpochLoss>,
        explained_variance: Option<f64>,
        provenance: TrainProvenance,
        census_rows: &Matrix,
    ) -> Self {
        let mut model = TrainedSae {
            params,
            config,
            loss_history,
            explained_variance,
            alive_mask: vec![],
            provenance,
        };
        let alive = alive_census(&model, census_rows);
        let mut mask = vec![false; model.d_sae()];
        for j in alive {
            mask[j] = true;
        }
        model.alive_mask = mask;
        model
    }

    /// Rebuild with an explicit alive mask (checkpoint deserialization).
    pub fn from_saved(
        params: SaeParams,
        config: TrainConfig,
        loss_history: Vec<EpochLoss>,
        explained_variance: Option<f64>,
        provenance: TrainProvenance,
        alive_mask: Vec<bool>,
    ) -> Self {
        TrainedSae {
            params,
            config,
            loss_history,
            explained_variance,
            alive_mask,
            provenance,
        }
    }

    pub fn d(&self) -> usize {
        self.params.d()
    }

    pub fn d_sae(&self) -> usize {
        self.params.d_sae()
    }

    pub fn alive_features(&self) -> Vec<usize> {
        self.alive_mask
            .iter()
            .enumerate()
            .filter(|(_, alive)| **alive)
            .map(|(j, _)| j)
            .collect()
    }

    /// Post-gate activations for every row (N x d_sae).
    pub fn activations(&self, rows: &Matrix) -> Matrix {
        let mut z = Matrix::zeros(rows.rows(), self.d_sae());
        for r in 0..rows.rows() {
            let a = encode_pre_unchecked(&self.params, rows.row(r));
            let act = apply_activation(&a, self.config.activation);
            z.row_mut(r).copy_from_slice(&act);
        }
        z
    }

    /// Reconstructions for every row (N x d).
    pub fn reconstruct(&self, rows: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(rows.rows(), self.d());
        for r in 0..rows.rows() {
            let a = encode_pre_unchecked(&self.params, rows.row(r));
            let z = apply_activation(&a, self.config.activation);
            let support: Vec<(usize, f64)> = z
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, &v)| (j, v))
                .collect();
            let h_hat = crate::sae::decode_support(&self.params, &support);
            out.row_mut(r).copy_from_slice(&h_hat);
        }
        out
    }
}

fn init_params(h_train: &Matrix, d_sae: usize, seed: u64) -> SaeParams {
    let d = h_train.cols();
    let mut rng = Rng::new(sub_seed(seed, "init"));
    let mut w_dec = Matrix::zeros(d, d_sae);
    let mut w_enc = Matrix::zeros(d_sae, d);
    for j in 0..d_sae {
        // Uniform on the unit sphere, tied encoder row.
        let mut col = rng.normal_vec(d);
        let norm = libm::sqrt(dot(&col, &col));
        for v in &mut col {
            *v /= norm;
        }
        for (r, v) in col.iter().enumerate() {
            w_dec.set(r, j, *v);
            w_enc.set(j, r, *v);
        }
    }
    let b_pre = h_train.col_means();
    SaeParams {
        w_enc,
        b_enc: vec![0.0; d_sae],
        w_dec,
        b_pre,
    }
}

/// Train an SAE. `graph` must cover exactly the training rows whenever
/// `config.lambda > 0`; it is ignored at lambda = 0 so that run is
/// byte-for-byte the standard SAE path.
pub fn train(
    data: TrainData<'_>,
    graph: Option<&ManifoldGraph>,
    config: &TrainConfig,
) -> Result<TrainedSae, SaeError> {
    let h_train = data.train;
    let d = h_train.cols();
    let n = h_train.rows();
    config.validate(d)?;
    if n == 0 {
        return Err(SaeError::InvalidConfig {
            detail: "no training rows".into(),
        });
    }
    let use_manifold = config.lambda > 0.0;
    let graph = if use_manifold {
        let g = graph.ok_or_else(|| SaeError::GraphMismatch {
            detail: "lambda > 0 requires a manifold graph".into(),
        })?;
        if g.n_nodes() != n {
            return Err(SaeError::GraphMismatch {
                detail: alloc::format!("graph covers {} nodes, train set has {n}", g.n_nodes()),
            });
        }
        if g.k() != config.k_nn {
            return Err(SaeError::GraphMismatch {
                detail: alloc::format!("graph degree {} != configured k_nn {}", g.k(), config.k_nn),
            });
        }
        Some(g)
    } else {
        None
    };

    let d_sae = d * config.expansion;
    let mut params = init_params(h_train, d_sae, config.seed);
    let mut state = AdamState::new(d, d_sae);
    let mut shuffle_rng = Rng::new(sub_seed(config.seed, "shuffle"));

    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut perm: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut perm);
        let mut rec_sum = 0.0;
        let mut man_sum = 0.0;
        let mut total_sum = 0.0;
        for (batch_no, chunk) in perm.chunks(config.batch_size).enumerate() {
            let (loss, grads) = loss_and_gradients(
                &params,
                h_train,
                chunk,
                graph,
                config.lambda,
                config.activation,
            )
            .map_err(|e| match e {
                SaeError::NonFiniteLoss => SaeError::Divergence {
                    epoch,
                    batch: batch_no,
                },
                other => other,
            })?;
            adam_step(&mut state, &mut params, grads, config.lr);
            let w = chunk.len() as f64;
            rec_sum += loss.reconstruction * w;
            man_sum += loss.manifold * w;
            total_sum += loss.total * w;
        }
        loss_history.push(EpochLoss {
            reconstruction: rec_sum / n as f64,
            manifold: man_sum / n as f64,
            total: total_sum / n as f64,
        });
    }

    // Alive census over the full training set with the final parameters.
    let mut alive_mask = vec![false; d_sae];
    for r in 0..n {
        let a = encode_pre_unchecked(&params, h_train.row(r));
        let z = apply_activation(&a, config.activation);
        for (j, v) in z.iter().enumerate() {
            if *v > 0.0 {
                alive_mask[j] = true;
            }
        }
    }

    let explained = data
        .valid
        .filter(|v| v.rows() > 0)
        .map(|v| explained_variance(&params, config.activation, v));

    Ok(TrainedSae {
        params,
        config: config.clone(),
        loss_history,
        explained_variance: explained,
        alive_mask,
        provenance: TrainProvenance {
            penalty_normalization: "mean_over_edges".to_string(),
            n_train_rows: n,
            n_valid_rows: data.valid.map_or(0, |v| v.rows()),
            graph_k: graph.map(|g| g.k()),
            graph_sigma: graph.map(|g| g.sigma()),
        },
    })
}

/// `1 - ||H - H_hat||^2_F / ||H - mean(H)||^2_F` over the given rows.
pub fn explained_variance(params: &SaeParams, activation: super::Activation, h: &Matrix) -> f64 {
    let means = h.col_means();
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..h.rows() {
        let row = h.row(r);
        let a = encode_pre_unchecked(params, row);
        let z = apply_activation(&a, activation);
        let support: Vec<(usize, f64)> = z
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, &v)| (j, v))
            .collect();
        let h_hat = crate::sae::decode_support(params, &support);
        for c in 0..h.cols() {
            let e = row[c] - h_hat[c];
            num += e * e;
            let m = row[c] - means[c];
            den += m * m;
        }
    }
    1.0 - num / den
}

/// Features with a strictly positive activation for at least one row.
pub fn alive_census(model: &TrainedSae, h: &Matrix) -> Vec<usize> {
    let z = model.activations(h);
    let mut alive = Vec::new();
    for j in 0..model.d_sae() {
        let mut hit = false;
        for r in 0..h.rows() {
            if z.get(r, j) > 0.0 {
                hit = true;
                break;
            }
        }
        if hit {
            alive.push(j);
        }
    }
    alive
}

/// Per-feature activation frequency and mean magnitude over active rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: usize,
    /// Fraction of rows with z > 0.
    pub frequency: f64,
    /// Mean activation over active rows; 0 for dead features.
    pub mean_active_magnitude: f64,
    pub active_count: usize,
}

pub fn activation_stats(model: &TrainedSae, h: &Matrix) -> Vec<FeatureStats> {
    let z = model.activations(h);
    let n = h.rows();
    let mut out = Vec::with_capacity(model.d_sae());
    for j in 0..model.d_sae() {
        let mut count = 0usize;
        let mut sum = 0.0;
        for r in 0..n {
            let v = z.get(r, j);
            if v > 0.0 {
                count += 1;
                sum += v;
            }
        }
        out.push(FeatureStats {
            feature: j,
            frequency: count as f64 / n as f64,
            mean_active_magnitude: if count > 0 { sum / count as f64 } else { 0.0 },
            active_count: count,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    /// Mean |Pearson r| over unordered alive-feature pairs.
    pub mean_abs_r: f64,
    pub n_pairs: usize,
    /// Pairs where a zero-variance feature forced |r| = 0.
    pub degenerate_pairs: usize,
}

/// Mean pairwise |Pearson r| over alive-feature activation vectors.
pub fn redundancy(model: &TrainedSae, h: &Matrix) -> Result<RedundancyReport, SaeError> {
    let alive = alive_census(model, h);
    if alive.len() < 2 {
        return Err(SaeError::TooFewAliveFeatures { alive: alive.len() });
    }
    let z = model.activations(h);
    let n = h.rows();
    let cols: Vec<Vec<f64>> = alive
        .iter()
        .map(|&j| (0..n).map(|r| z.get(r, j)).collect())
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut degenerate = 0usize;
    for i in 0..cols.len() {
        for j in (i + 1)..cols.len() {
            pairs += 1;
            match pearson(&cols[i], &cols[j]) {
                Some(r) => sum += libm::fabs(r),
                None => degenerate += 1, // contributes |r| = 0
            }
        }
    }
    Ok(RedundancyReport {
        mean_abs_r: sum / pairs as f64,
        n_pairs: pairs,
        degenerate_pairs: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::Activation;

    fn rank_k_data(n: usize, d: usize, rank: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..rank {
            let mut v = rng.normal_vec(d);
            for e in &dirs {
                let p = dot(&v, e);
                for (vi, ei) in v.iter_mut().zip(e) {
                    *vi -= p * ei;
                }
            }
            let norm = libm::sqrt(dot(&v, &v));
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
        Matrix::from_fn(n, d, |r, c| {
            let mut acc = 0.0;
            for (f, dir) in dirs.iter().enumerate() {
                // Deterministic pseudo-coefficients varying by row.
                let coeff = libm::sin((r * rank + f + 1) as f64 * 0.7) + 1.5;
                acc += coeff * dir[c];
            }
            acc
        })
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            activation: Activation::TopK { k: 4 },
            expansion: 2,
            lambda: 0.0,
            k_nn: 2,
            epochs: 30,
            lr: 1e-2,
            batch_size: 16,
            seed,
            split_fraction: 0.9,
        }
    }

    #[test]
    fn training_is_deterministic() {
        let h = rank_k_data(48, 8, 4, 70);
        let data = TrainData {
            train: &h,
            valid: None,
        };
        let cfg = quick_config(7);
        let a = train(data, None, &cfg).unwrap();
        let b = train(data, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_history.len(), cfg.epochs);
    }

    #[test]
    fn reconstruction_improves_on_low_rank_data() {
        let h = rank_k_data(64, 8, 4, 71);
        let data = TrainData {
            train: &h,
            valid: Some(&h),
        };
        let model = train(data, None, &quick_config(8)).unwrap();
        let first = model.loss_history.first().unwrap().reconstruction;
        let last = model.loss_history.last().unwrap().reconstruction;
        assert!(last < first * 0.2, "first {first}, last {last}");
        assert!(model.explained_variance.unwrap() > 0.8);
    }

    #[test]
    fn lambda_requires_graph() {
        let h = rank_k_data(32, 6, 3, 72);
        let mut cfg = quick_config(9);
        cfg.lambda = 0.5;
        let data = TrainData {
            train: &h,
            valid: None,
        };
        assert!(matches!(
            train(data, None, &cfg),
            Err(SaeError::GraphMismatch { .. })
        ));
    }

    #[test]
    fn alive_census_strict_positivity() {
        // One encoder row pinned far below zero can never fire.
        let h = rank_k_data(32, 6, 3, 73);
        let data = TrainData {
            train: &h,
            valid: None,
        };
        let mut model = train(data, None, &quick_config(10)).unwrap();
        let dead = 5usize;
        for c in 0..model.params.w_enc.cols() {
            model.params.w_enc.set(dead, c, 0.0);
        }
        model.params.b_enc[dead] = -100.0;
        let alive = alive_census(&model, &h);
        assert!(!alive.contains(&dead));

        let stats = activation_stats(&model, &h);
        assert_eq!(stats[dead].frequency, 0.0);
        assert_eq!(stats[dead].mean_active_magnitude, 0.0);
        assert_eq!(stats[dead].active_count, 0);
        for j in &alive {
            assert!(stats[*j].frequency > 0.0 && stats[*j].frequency <= 1.0);
        }
    }

    #[test]
    fn redundancy_identical_features_is_one() {
        // Duplicate one encoder row so two features always co-activate.
        let h = rank_k_data(32, 6, 3, 74);
        let data = TrainData {
            train: &h,
            valid: None,
        };
        let mut model = train(data, None, &quick_config(11)).unwrap();
        let alive = alive_census(&model, &h);
        let keep = alive[0];
        // Make feature `copy` an exact duplicate of `keep`.
        let copy = alive.get(1).copied().unwrap_or(keep + 1);
        for c in 0..model.params.w_enc.cols() {
            let v = model.params.w_enc.get(keep, c);
            model.params.w_enc.set(copy, c, v);
        }
        model.params.b_enc[copy] = model.params.b_enc[keep];
        // Kill all other features so exactly the pair remains.
        for j in 0..model.d_sae() {
            if j != keep && j != copy {
                for c in 0..model.params.w_enc.cols() {
                    model.params.w_enc.set(j, c, 0.0);
                }
                model.params.b_enc[j] = -100.0;
            }
        }
        let rep = redundancy(&model, &h).unwrap();
        assert_eq!(rep.n_pairs, 1);
        assert!((rep.mean_abs_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn redundancy_needs_two_alive() {
        let h = rank_k_data(32, 6, 3, 75);
        let data = TrainData {
            train: &h,
            valid: None,
        };
        let mut model = train(data, None, &quick_config(12)).unwrap();
        for j in 0..model.d_sae() {
            for c in 0..model.params.w_enc.cols() {
                model.params.w_enc.set(j, c, 0.0);
            }
            model.params.b_enc[j] = -100.0;
        }
        assert!(matches!(
            redundancy(&model, &h),
            Err(SaeError::TooFewAliveFeatures { .. })
        ));
    }
}
