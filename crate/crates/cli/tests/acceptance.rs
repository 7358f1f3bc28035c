//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured values. Run with
//! `cargo test -p msae --test acceptance -- --nocapture`.
//!
//! Criterion 3 (feature-mortality direction under the manifold weight) is a
//! known-failing check at this synthetic scale; see the test body for the
//! measured numbers and README for context.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use msae_core::annotate::{annotate_all, bh_fdr, partial_spearman_age, spearman, Category};
use msae_core::data::{
    generate_cohort_from_ground_truth, generate_synthetic_cohort, latest_scan_per_subject,
    subject_split, ConfoundEdge, GroundTruth, SyntheticSpec,
};
use msae_core::evaluate::{
    auc, cross_cohort_replicate, selective_prediction, stratified_subject_kfold, FeatureSelector,
};
use msae_core::manifold::{build_knn_graph, ManifoldGraph};
use msae_core::matrix::pearson;
use msae_core::rng::Rng;
use msae_core::sae::{
    alive_census, loss_and_gradients, train, Activation, SaeParams, TrainConfig, TrainData,
};
use msae_core::Matrix;

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

fn fail(criterion: &str, detail: String) {
    println!("[FAIL] {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

fn random_params(d: usize, d_sae: usize, seed: u64) -> SaeParams {
    let mut rng = Rng::new(seed);
    let mut w_dec = Matrix::zeros(d, d_sae);
    for j in 0..d_sae {
        let col = rng.normal_vec(d);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (r, v) in col.iter().enumerate() {
            w_dec.set(r, j, v / norm);
        }
    }
    let mut w_enc = Matrix::zeros(d_sae, d);
    for j in 0..d_sae {
        for r in 0..d {
            w_enc.set(j, r, w_dec.get(r, j) * 0.7);
        }
    }
    let b_enc: Vec<f64> = rng.normal_vec(d_sae).iter().map(|v| 0.1 * v).collect();
    let b_pre: Vec<f64> = rng.normal_vec(d).iter().map(|v| 0.2 * v).collect();
    SaeParams::new(w_enc, b_enc, w_dec, b_pre).unwrap()
}

#[allow(clippy::too_many_arguments)]
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
    SaeParams::new_raw(w_enc, b_enc, w_dec, b_pre).unwrap()
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let d = 6;
    let d_sae = 12;
    let n = 10;
    let step = 1e-5;
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    for (instance, seed) in [(0u64, 210u64), (1, 211)] {
        let params = random_params(d, d_sae, seed);
        let mut rng = Rng::new(seed ^ 0xf00d);
        let h = Matrix::from_vec(n, d, rng.normal_vec(n * d));
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let emb = msae_core::data::EmbeddingMatrix::new(h.clone(), ids, None).unwrap();
        let graph = build_knn_graph(&emb, 2).unwrap();
        let batch = [0usize, 3, 5, 7];
        for activation in [Activation::TopK { k: 2 }, Activation::Relu] {
            for lambda in [0.0, 0.1, 1.0] {
                let graph_opt = if lambda > 0.0 { Some(&graph) } else { None };
                let (_, grads) =
                    loss_and_gradients(&params, &h, &batch, graph_opt, lambda, activation)
                        .unwrap();
                let blocks: [&[f64]; 4] = [
                    grads.w_enc.data(),
                    &grads.b_enc,
                    grads.w_dec.data(),
                    &grads.b_pre,
                ];
                for (block, analytic) in blocks.iter().enumerate() {
                    for (idx, &g) in analytic.iter().enumerate() {
                        let plus = loss_at(
                            &perturbed(&params, block, idx, step),
                            &h,
                            &batch,
                            graph_opt,
                            lambda,
                            activation,
                        );
                        let minus = loss_at(
                            &perturbed(&params, block, idx, -step),
                            &h,
                            &batch,
                            graph_opt,
                            lambda,
                            activation,
                        );
                        let numeric = (plus - minus) / (2.0 * step);
                        let denom = f64::max(1e-8, f64::max(g.abs(), numeric.abs()));
                        let rel = (g - numeric).abs() / denom;
                        if (g - numeric).abs() > 1e-9 {
                            worst = worst.max(rel);
                        }
                        assert!(
                            rel < tol || (g - numeric).abs() <= 1e-9,
                            "instance {instance} activation {activation:?} lambda {lambda} \
                             block {block} idx {idx}: analytic {g:.6e} vs numeric {numeric:.6e}"
                        );
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    pass(
        "criterion 1 (gradient oracle)",
        format!("worst relative error {worst:.2e}, elapsed {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: explained variance on rank-8 synthetic data.
// ---------------------------------------------------------------------------

fn rank8_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_subjects: 1000,
        scans_min: 2,
        scans_max: 2,
        d: 64,
        n_factors: 8,
        factor_meanings: vec![
            "age".into(),
            "diagnosis".into(),
            "sex".into(),
            "apoe4".into(),
            "noise".into(),
            "noise".into(),
            "noise".into(),
            "noise".into(),
        ],
        factor_loadings: None,
        factor_scales: None,
        confound_graph: vec![
            ConfoundEdge {
                source: "age".into(),
                target: "diagnosis".into(),
                strength: 0.8,
            },
            ConfoundEdge {
                source: "disease".into(),
                target: "diagnosis".into(),
                strength: 0.8,
            },
        ],
        noise_sigma: 0.01,
        scan_jitter: 0.1,
        factor_jitter: 0.3,
        diagnosis_noise: 0.5,
        noise_clusters: 0,
        n_secondary_noise: 0,
        med_proxy: false,
        seed,
    }
}

#[test]
fn criterion_2_explained_variance() {
    let start = Instant::now();
    let spec = rank8_spec(7);
    let (emb, table, _) = generate_synthetic_cohort(&spec).unwrap();
    assert_eq!(emb.n(), 2000);
    assert_eq!(emb.dim(), 64);
    let (train_rows, valid_rows) = subject_split(&table, 0.9, 7).unwrap();
    let h_train = emb.values().gather_rows(&train_rows);
    let h_valid = emb.values().gather_rows(&valid_rows);
    let config = TrainConfig {
        activation: Activation::TopK { k: 8 },
        expansion: 2,
        lambda: 0.0,
        k_nn: 15,
        epochs: 100,
        lr: 1e-3,
        batch_size: 64,
        seed: 7,
        split_fraction: 0.9,
    };
    let model = train(
        TrainData {
            train: &h_train,
            valid: Some(&h_valid),
        },
        None,
        &config,
    )
    .unwrap();
    let ev = model.explained_variance.unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 180.0, "took {elapsed:?}");
    assert!(ev > 0.99, "explained variance {ev}");
    pass(
        "criterion 2 (explained variance)",
        format!("held-out EV {ev:.4} > 0.99, elapsed {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: feature-mortality direction across the lambda sweep.
// KNOWN FAILING at this synthetic scale; the assertions state the criterion
// verbatim and the printed numbers document the measured behavior.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_mortality_direction() {
    let start = Instant::now();
    let spec = SyntheticSpec::reference(2024);
    let (emb, table, _) = generate_synthetic_cohort(&spec).unwrap();
    let (train_rows, valid_rows) = subject_split(&table, 0.9, 2024).unwrap();
    let h_train = emb.values().gather_rows(&train_rows);
    let h_valid = emb.values().gather_rows(&valid_rows);
    let train_emb = emb.select_rows(&train_rows).unwrap();
    let graph = build_knn_graph(&train_emb, 15).unwrap();

    let mut alive = Vec::new();
    for lambda in [0.0, 0.1, 10.0] {
        let config = TrainConfig {
            activation: Activation::TopK { k: 16 },
            expansion: 2,
            lambda,
            k_nn: 15,
            epochs: 100,
            lr: 3e-3,
            batch_size: 32,
            seed: 2024,
            split_fraction: 0.9,
        };
        let model = train(
            TrainData {
                train: &h_train,
                valid: Some(&h_valid),
            },
            if lambda > 0.0 { Some(&graph) } else { None },
            &config,
        )
        .unwrap();
        alive.push(alive_census(&model, &h_train).len());
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "alive(0)={}, alive(0.1)={}, alive(10)={}, elapsed {elapsed:?}",
        alive[0], alive[1], alive[2]
    );
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");

    let over_reg_ok = alive[2] < alive[1];
    let ratio_ok = alive[1] >= 2 * alive[0];
    if ratio_ok && over_reg_ok {
        pass("criterion 3 (mortality direction)", detail);
    } else {
        fail("criterion 3 (mortality direction)", detail.clone());
    }
    assert!(
        over_reg_ok,
        "alive(lambda=10) = {} must stay below alive(lambda=0.1) = {}",
        alive[2], alive[1]
    );
    assert!(
        ratio_ok,
        "alive(lambda=0.1) = {} must reach 2x alive(lambda=0) = {}; measured behavior at this \
         synthetic scale keeps every useful feature alive in the unregularized run, so the \
         collapse-and-rescue contrast does not materialize (see README)",
        alive[1], alive[0]
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: deconfounding correctness over 20 seeded cohorts.
// ---------------------------------------------------------------------------

fn deconfounding_spec(seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::reference(seed);
    spec.n_subjects = 250;
    spec.scans_min = 1;
    spec.scans_max = 2;
    spec.d = 48;
    spec.diagnosis_noise = 1.0;
    for e in spec.confound_graph.iter_mut() {
        if e.source == "age" && e.target == "diagnosis" {
            e.strength = 0.6;
        }
    }
    let mut meanings = vec![
        "age".to_string(),
        "diagnosis".to_string(),
        "sex".to_string(),
        "apoe4".to_string(),
        "cm_htn".to_string(),
        "cm_dm2".to_string(),
    ];
    let mut scales = vec![1.0, 1.0, 0.9, 0.85, 0.8, 0.75];
    for _ in 0..20 {
        meanings.push("noise".to_string());
        scales.push(0.6);
    }
    for _ in 0..4 {
        meanings.push("nuisance".to_string());
        scales.push(0.5);
    }
    spec.n_factors = meanings.len();
    spec.factor_meanings = meanings;
    spec.factor_scales = Some(scales);
    spec
}

#[test]
fn criterion_4_deconfounding() {
    let start = Instant::now();
    let runs = 20u64;
    let mut aging_hits = 0usize;
    let mut age_as_ad = 0usize;
    let mut disease_hits = 0usize;
    for seed in 0..runs {
        let spec = deconfounding_spec(4000 + seed);
        let (emb, table, gt) = generate_synthetic_cohort(&spec).unwrap();
        let model = gt.ideal_decomposition(emb.values());
        let annotations = annotate_all(&model, &emb, &table, 0.05).unwrap();
        let z = model.activations(emb.values());
        let n = emb.n();
        // Top feature per planted factor: the side whose activations track
        // the factor values most strongly.
        let top_side = |factor: usize| -> usize {
            let (p, ng) = GroundTruth::ideal_feature_pair(factor);
            let fv: Vec<f64> = (0..n).map(|r| gt.factor_values.get(r, factor)).collect();
            let corr = |j: usize| -> f64 {
                let zj: Vec<f64> = (0..n).map(|r| z.get(r, j)).collect();
                spearman(&zj, &fv).map(|v| v.abs()).unwrap_or(0.0)
            };
            if corr(p) >= corr(ng) {
                p
            } else {
                ng
            }
        };
        let age_cat = annotations.annotation(top_side(0)).map(|a| a.category);
        let disease_cat = annotations.annotation(top_side(1)).map(|a| a.category);
        if age_cat == Some(Category::Aging) {
            aging_hits += 1;
        }
        if age_cat == Some(Category::AdRelated) {
            age_as_ad += 1;
        }
        if disease_cat == Some(Category::AdRelated) {
            disease_hits += 1;
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "age factor labeled aging {aging_hits}/{runs} (AD-labeled {age_as_ad}), \
         disease factor labeled AD-related {disease_hits}/{runs}, elapsed {elapsed:?}"
    );
    let ok = aging_hits >= 19 && age_as_ad == 0 && disease_hits >= 19;
    if ok {
        pass("criterion 4 (deconfounding correctness)", detail.clone());
    } else {
        fail("criterion 4 (deconfounding correctness)", detail.clone());
    }
    assert!(aging_hits >= 19, "{detail}");
    assert!(age_as_ad == 0, "{detail}");
    assert!(disease_hits >= 19, "{detail}");
}

// ---------------------------------------------------------------------------
// Criterion 5: selective-prediction contrast.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_selective_prediction_contrast() {
    let start = Instant::now();
    let spec = SyntheticSpec::reference(2024);
    let (emb, table, gt) = generate_synthetic_cohort(&spec).unwrap();
    let model = gt.ideal_decomposition(emb.values());
    let annotations = annotate_all(&model, &emb, &table, 0.05).unwrap();
    let (eval_table, eval_emb, _) = latest_scan_per_subject(&table, &emb).unwrap();

    let run = |category: Category| {
        selective_prediction(
            &model,
            &eval_emb,
            &eval_table,
            Some(&annotations),
            &FeatureSelector::Category { category },
            5,
            7,
        )
        .unwrap()
    };
    let ad = run(Category::AdRelated);
    let cm = run(Category::Comorbidity);
    let elapsed = start.elapsed();
    let detail = format!(
        "AD-only AUC {:.3} (d={}), comorbidity-only AUC {:.3} (d={}), elapsed {elapsed:?}",
        ad.auc_mean, ad.d, cm.auc_mean, cm.d
    );
    let ok = ad.auc_mean >= 0.70 && cm.auc_mean <= 0.55;
    if ok {
        pass("criterion 5 (selective-prediction contrast)", detail.clone());
    } else {
        fail("criterion 5 (selective-prediction contrast)", detail.clone());
    }
    assert!(ad.auc_mean >= 0.70, "{detail}");
    assert!(cm.auc_mean <= 0.55, "{detail}");
}

// ---------------------------------------------------------------------------
// Criterion 6: statistical oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_statistical_oracles() {
    let start = Instant::now();

    // BH rejection sets equal the exhaustive threshold-scan oracle.
    let mut rng = Rng::new(600);
    let alpha = 0.05;
    for _ in 0..1000 {
        let m = 1 + rng.below(10);
        let pvals: Vec<f64> = (0..m)
            .map(|_| {
                if rng.coin(0.4) {
                    rng.uniform() * 0.08
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let got = bh_fdr(&pvals, alpha).unwrap();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| pvals[a].partial_cmp(&pvals[b]).unwrap().then(a.cmp(&b)));
        let mut cutoff = 0;
        for (rank0, &idx) in order.iter().enumerate() {
            if pvals[idx] <= ((rank0 + 1) as f64 / m as f64) * alpha {
                cutoff = rank0 + 1;
            }
        }
        let mut expect = vec![false; m];
        for &idx in order.iter().take(cutoff) {
            expect[idx] = true;
        }
        assert_eq!(got.reject, expect, "pvals {pvals:?}");
    }

    // AUC equals the pair-count oracle to 1e-12 for n <= 50.
    for _ in 0..300 {
        let n = 3 + rng.below(47);
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(10) as f64) / 10.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.coin(0.5)).collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 || n_pos == n {
            continue;
        }
        let got = auc(&scores, &labels).unwrap();
        let mut concordant = 0.0;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            for j in 0..n {
                if labels[j] {
                    continue;
                }
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        let expect = concordant / (n_pos as f64 * (n - n_pos) as f64);
        assert!((got - expect).abs() < 1e-12, "auc {got} vs oracle {expect}");
    }

    // Eq. 4 equals the rank-residualization oracle on tie-free data.
    for _ in 0..100 {
        let n = 50;
        let age: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let f: Vec<f64> = age.iter().map(|a| 0.5 * a + rng.normal()).collect();
        let v: Vec<f64> = age.iter().map(|a| -0.3 * a + rng.normal()).collect();
        let got = partial_spearman_age(&f, &v, &age).unwrap();
        let ranks = |x: &[f64]| msae_core::annotate::average_ranks(x);
        let (rf, rv, ra) = (ranks(&f), ranks(&v), ranks(&age));
        let residual = |y: &[f64]| -> Vec<f64> {
            let my = y.iter().sum::<f64>() / n as f64;
            let ma = ra.iter().sum::<f64>() / n as f64;
            let mut cov = 0.0;
            let mut var_a = 0.0;
            for (yi, ai) in y.iter().zip(&ra) {
                cov += (yi - my) * (ai - ma);
                var_a += (ai - ma) * (ai - ma);
            }
            let beta = cov / var_a;
            y.iter()
                .zip(&ra)
                .map(|(yi, ai)| (yi - my) - beta * (ai - ma))
                .collect()
        };
        let expect = pearson(&residual(&rf), &residual(&rv)).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    let elapsed = start.elapsed();
    pass(
        "criterion 6 (statistical oracles)",
        format!("BH scan x1000, AUC pair-count x300, residualization x100, elapsed {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: replication harness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_replication() {
    let start = Instant::now();
    let spec_a = SyntheticSpec::reference(501);
    let (emb_a, table_a, gt) = generate_synthetic_cohort(&spec_a).unwrap();
    let mut spec_b = spec_a.clone();
    spec_b.seed = 777;
    let (emb_b, table_b, _) = generate_cohort_from_ground_truth(&spec_b, &gt).unwrap();

    let (train_rows, valid_rows) = subject_split(&table_a, 0.9, spec_a.seed).unwrap();
    let h_train = emb_a.values().gather_rows(&train_rows);
    let h_valid = emb_a.values().gather_rows(&valid_rows);
    let train_emb = emb_a.select_rows(&train_rows).unwrap();
    let graph = build_knn_graph(&train_emb, 15).unwrap();
    let config = TrainConfig {
        activation: Activation::TopK { k: 16 },
        expansion: 2,
        lambda: 0.1,
        k_nn: 15,
        epochs: 100,
        lr: 1e-3,
        batch_size: 64,
        seed: spec_a.seed,
        split_fraction: 0.9,
    };
    let model = train(
        TrainData {
            train: &h_train,
            valid: Some(&h_valid),
        },
        Some(&graph),
        &config,
    )
    .unwrap();

    let report =
        cross_cohort_replicate(&model, (&emb_a, &table_a), (&emb_b, &table_b), 0.05, 16).unwrap();
    let self_report =
        cross_cohort_replicate(&model, (&emb_a, &table_a), (&emb_a, &table_a), 0.05, 16).unwrap();
    let elapsed = start.elapsed();
    let detail = format!(
        "annotation agreement r={:.3} over {} jointly alive features; self-replication \
         agreement={}, consistency={}, rate={}; elapsed {elapsed:?}",
        report.annotation_agreement,
        report.n_joint_alive,
        self_report.annotation_agreement,
        self_report.activation_consistency,
        self_report.replication_rate
    );
    let exact_self = self_report.annotation_agreement == 1.0
        && self_report.activation_consistency == 1.0
        && self_report.replication_rate == 1.0
        && self_report
            .per_variable_agreement
            .iter()
            .all(|(_, r)| *r == 1.0)
        && self_report
            .per_diagnosis_pattern_r
            .iter()
            .all(|(_, r)| *r == 1.0);
    let ok = report.annotation_agreement >= 0.9 && exact_self;
    if ok {
        pass("criterion 7 (replication harness)", detail.clone());
    } else {
        fail("criterion 7 (replication harness)", detail.clone());
    }
    assert!(report.annotation_agreement >= 0.9, "{detail}");
    assert!(exact_self, "{detail}");
}

// ---------------------------------------------------------------------------
// Criterion 8: pipeline determinism through the CLI, across thread counts.
// ---------------------------------------------------------------------------

fn write_pipeline_config(path: &Path, out_dir: &Path, threads: usize) {
    let text = format!(
        r#"seed = 42
threads = {threads}
out_dir = "{}"

[synth]
n_subjects = 120
scans_min = 1
scans_max = 2
d = 24
n_factors = 6
factor_meanings = ["age", "diagnosis", "sex", "apoe4", "noise", "nuisance"]
confound_graph = [
  {{ source = "age", target = "diagnosis", strength = 0.8 }},
  {{ source = "disease", target = "diagnosis", strength = 0.8 }},
  {{ source = "disease", target = "converter", strength = 2.0 }},
]
noise_sigma = 0.02
seed = 0
n_secondary_noise = 2
med_proxy = true

[train]
epochs = 15
batch_size = 32
lambda = 0.1
k_nn = 8
topk = 6

[evaluate]
n_folds = 3
top_n = 8
"#,
        out_dir.display()
    );
    std::fs::write(path, text).unwrap();
}

fn run_pipeline(config_path: &Path) {
    for command in ["synth", "graph", "train", "annotate", "evaluate"] {
        let status = Command::new(env!("CARGO_BIN_EXE_msae"))
            .arg("--config")
            .arg(config_path)
            .arg(command)
            .status()
            .expect("binary runs");
        assert!(status.success(), "{command} failed");
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            (name, std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn criterion_8_pipeline_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out_1 = dir.path().join("run1");
    let out_2 = dir.path().join("run2");
    let config_1 = dir.path().join("exp1.toml");
    let config_2 = dir.path().join("exp2.toml");
    // Same seed, different thread counts.
    write_pipeline_config(&config_1, &out_1, 1);
    write_pipeline_config(&config_2, &out_2, 4);
    run_pipeline(&config_1);
    run_pipeline(&config_2);

    let snap_1 = snapshot(&out_1);
    let snap_2 = snapshot(&out_2);
    let names_1: Vec<&String> = snap_1.iter().map(|(n, _)| n).collect();
    let names_2: Vec<&String> = snap_2.iter().map(|(n, _)| n).collect();
    assert_eq!(names_1, names_2, "file sets differ");
    let mut mismatched = Vec::new();
    for ((name, bytes_1), (_, bytes_2)) in snap_1.iter().zip(&snap_2) {
        if bytes_1 != bytes_2 {
            mismatched.push(name.clone());
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} output files byte-identical across --threads 1 vs 4, elapsed {elapsed:?}",
        snap_1.len()
    );
    if mismatched.is_empty() {
        pass("criterion 8 (pipeline determinism)", detail);
    } else {
        fail(
            "criterion 8 (pipeline determinism)",
            format!("files differ: {mismatched:?}"),
        );
    }
    assert!(mismatched.is_empty(), "files differ: {mismatched:?}");
}

// ---------------------------------------------------------------------------
// Criterion 9: cross-validation leakage guard on a multi-scan cohort.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_cv_leakage_guard() {
    let start = Instant::now();
    let mut spec = SyntheticSpec::reference(900);
    spec.scans_min = 1;
    spec.scans_max = 4;
    spec.n_subjects = 400;
    let (emb, table, gt) = generate_synthetic_cohort(&spec).unwrap();
    let multi_scan_subjects = table
        .subject_ids()
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    assert!(
        table.len() > multi_scan_subjects,
        "cohort must carry multiple scans per subject"
    );

    // Direct assertion on the fold plan: no subject straddles a fold.
    let eval_rows: Vec<usize> = (0..table.len())
        .filter(|&r| table.converter()[r].is_some())
        .collect();
    let eval_table = table.select_rows(&eval_rows).unwrap();
    let plan = stratified_subject_kfold(&eval_table, 5, 900).unwrap();
    let fold_of = plan.fold_of_rows(&eval_table).unwrap();
    for fold in 0..plan.n_folds {
        let mut train_subjects = std::collections::BTreeSet::new();
        let mut test_subjects = std::collections::BTreeSet::new();
        for (row, f) in fold_of.iter().enumerate() {
            let subject = eval_table.subject_ids()[row].as_str();
            if *f == Some(fold) {
                test_subjects.insert(subject);
            } else {
                train_subjects.insert(subject);
            }
        }
        let overlap: Vec<&&str> = train_subjects.intersection(&test_subjects).collect();
        assert!(overlap.is_empty(), "fold {fold}: subjects straddle: {overlap:?}");
    }

    // The CV harness itself re-asserts the guard every run: a full
    // multi-scan evaluation must complete without tripping it.
    let model = gt.ideal_decomposition(emb.values());
    let report = selective_prediction(
        &model,
        &emb,
        &table,
        None,
        &FeatureSelector::AllAlive,
        5,
        900,
    )
    .unwrap();
    let elapsed = start.elapsed();
    pass(
        "criterion 9 (CV leakage guard)",
        format!(
            "no subject straddles any of 5 folds over {} multi-scan rows (AUC {:.3}), elapsed {elapsed:?}",
            table.len(),
            report.auc_mean
        ),
    );
}
