//! Independent oracles for the statistical and numerical building blocks:
//! brute-force re-implementations, quadrature, and null simulations that the
//! library must agree with.

use msae_core::annotate::{
    average_ranks, bh_fdr, enrichment_test, partial_spearman_age, pvalue_partial, spearman,
    AnnotationTable, Category, FeatureAnnotation,
};
use msae_core::data::{generate_synthetic_cohort, ConfoundEdge, SyntheticSpec};
use msae_core::manifold::{build_knn_graph, neighbor_batch, pairwise_distances};
use msae_core::matrix::pearson;
use msae_core::rng::Rng;
use msae_core::Matrix;

fn embedding(rows: usize, cols: usize, data: Vec<f64>) -> msae_core::data::EmbeddingMatrix {
    let ids = (0..rows).map(|i| format!("s{i}")).collect();
    msae_core::data::EmbeddingMatrix::new(Matrix::from_vec(rows, cols, data), ids, None).unwrap()
}

#[test]
fn pairwise_distances_match_double_loop_oracle() {
    let mut rng = Rng::new(100);
    let data = rng.normal_vec(5 * 3);
    let emb = embedding(5, 3, data.clone());
    let got = pairwise_distances(&emb);
    for i in 0..5 {
        for j in 0..5 {
            let mut s = 0.0;
            for c in 0..3 {
                let d = data[i * 3 + c] - data[j * 3 + c];
                s += d * d;
            }
            let expect = s.sqrt();
            assert!((got.get(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn knn_neighbors_match_exhaustive_sort() {
    let mut rng = Rng::new(101);
    let n = 30;
    let d = 4;
    let data = rng.normal_vec(n * d);
    let emb = embedding(n, d, data);
    let k = 6;
    let graph = build_knn_graph(&emb, k).unwrap();
    let dist = pairwise_distances(&emb);
    for i in 0..n {
        // Brute force: sort all other nodes by (distance, index).
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            dist.get(i, a)
                .partial_cmp(&dist.get(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        let expected: Vec<u32> = others[..k].iter().map(|&j| j as u32).collect();
        let got: Vec<u32> = graph.edges_of(i).iter().map(|e| e.target).collect();
        assert_eq!(got, expected, "node {i}");
    }
}

#[test]
fn batch_edges_touch_exactly_b_times_k() {
    let mut rng = Rng::new(102);
    let emb = embedding(40, 3, rng.normal_vec(120));
    let graph = build_knn_graph(&emb, 5).unwrap();
    for batch_size in [1usize, 3, 17, 40] {
        let batch: Vec<usize> = (0..batch_size).collect();
        let (edges, unique) = neighbor_batch(&graph, &batch).unwrap();
        assert_eq!(edges.len(), batch_size * 5);
        assert!(unique.len() <= edges.len());
        let mut sorted = unique.clone();
        sorted.dedup();
        assert_eq!(sorted, unique, "unique set must be sorted and deduplicated");
    }
}

/// Student-t CDF tail by Simpson quadrature over the density.
fn t_tail_quadrature(t: f64, df: f64) -> f64 {
    let norm =
        gamma_ln((df + 1.0) / 2.0) - gamma_ln(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let hi = t + 60.0;
    let steps = 200_000;
    let h = (hi - t) / steps as f64;
    let mut acc = density(t) + density(hi);
    for i in 1..steps {
        let x = t + i as f64 * h;
        acc += density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Lanczos log-gamma, independent of the library's lgamma.
fn gamma_ln(x: f64) -> f64 {
    const G: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for g in G {
        y += 1.0;
        ser += g / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[test]
fn pvalue_matches_quadrature_oracle() {
    let rho: f64 = 0.3;
    let n = 100usize;
    let df = (n - 3) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let expect = 2.0 * t_tail_quadrature(t, df);
    let got = pvalue_partial(rho, n).unwrap();
    assert!(
        (got - expect).abs() < 1e-6,
        "p = {got}, quadrature = {expect}"
    );
}

#[test]
fn bh_matches_threshold_scan_oracle_over_random_suite() {
    let mut rng = Rng::new(103);
    let alpha = 0.05;
    for case in 0..1000 {
        let m = 1 + rng.below(10);
        let pvals: Vec<f64> = (0..m)
            .map(|_| {
                // Mix tiny and moderate p-values so rejections happen.
                if rng.coin(0.4) {
                    rng.uniform() * 0.08
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let got = bh_fdr(&pvals, alpha).unwrap();

        // Oracle: largest i with p_(i) <= (i/m) alpha; reject all sorted
        // ranks up to i.
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
        assert_eq!(got.reject, expect, "case {case}: pvals {pvals:?}");
        for (p, q) in pvals.iter().zip(&got.adjusted) {
            assert!(q >= p, "adjusted below raw");
            assert!(*q <= 1.0);
        }
    }
}

#[test]
fn partial_matches_residualization_oracle_on_tie_free_data() {
    let mut rng = Rng::new(104);
    for _ in 0..50 {
        let n = 60;
        // Continuous draws: ties have probability zero.
        let age: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let feature: Vec<f64> = age
            .iter()
            .map(|a| 0.6 * a + 0.8 * rng.normal())
            .collect();
        let var: Vec<f64> = age
            .iter()
            .map(|a| -0.4 * a + 0.9 * rng.normal())
            .collect();
        let got = partial_spearman_age(&feature, &var, &age).unwrap();

        // Oracle: regress both rank vectors on age ranks, correlate the
        // residuals.
        let rf = average_ranks(&feature);
        let rv = average_ranks(&var);
        let ra = average_ranks(&age);
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
        assert!(
            (got - expect).abs() < 1e-10,
            "partial {got} vs residualization {expect}"
        );
    }
}

#[test]
fn synthetic_confound_passes_rank_correlation_oracle() {
    // One age -> diagnosis edge at strength 0.8 must induce a strong rank
    // correlation at N = 2000, measured with a brute-force oracle.
    let spec = SyntheticSpec {
        n_subjects: 1000,
        scans_min: 2,
        scans_max: 2,
        d: 8,
        n_factors: 2,
        factor_meanings: vec!["age".to_string(), "diagnosis".to_string()],
        factor_loadings: None,
        factor_scales: None,
        confound_graph: vec![ConfoundEdge {
            source: "age".to_string(),
            target: "diagnosis".to_string(),
            strength: 0.8,
        }],
        noise_sigma: 0.01,
        scan_jitter: 0.1,
        factor_jitter: 0.3,
        diagnosis_noise: 0.5,
        noise_clusters: 0,
        n_secondary_noise: 0,
        med_proxy: false,
        seed: 99,
    };
    let (_, table, _) = generate_synthetic_cohort(&spec).unwrap();
    assert_eq!(table.len(), 2000);

    // Brute-force average-rank Spearman, independent of the library path.
    let rank = |x: &[f64]| -> Vec<f64> {
        let n = x.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
        let mut out = vec![0.0; n];
        let mut s = 0;
        while s < n {
            let mut e = s;
            while e + 1 < n && x[idx[e + 1]] == x[idx[s]] {
                e += 1;
            }
            for t in s..=e {
                out[idx[t]] = (s + e) as f64 / 2.0 + 1.0;
            }
            s = e + 1;
        }
        out
    };
    let ra = rank(table.age());
    let rd = rank(&table.diagnosis_ordinal());
    let ma = ra.iter().sum::<f64>() / ra.len() as f64;
    let md = rd.iter().sum::<f64>() / rd.len() as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vd = 0.0;
    for (a, d) in ra.iter().zip(&rd) {
        cov += (a - ma) * (d - md);
        va += (a - ma) * (a - ma);
        vd += (d - md) * (d - md);
    }
    let r = cov / (va * vd).sqrt();
    assert!(r > 0.5, "Spearman(age, diagnosis) = {r}");
    // The library agrees with the oracle.
    let lib = spearman(table.age(), &table.diagnosis_ordinal()).unwrap();
    assert!((lib - r).abs() < 1e-12);
}

#[test]
fn enrichment_null_simulation_controls_false_positives() {
    // 161 null features against one independent secondary column; over 100
    // simulated nulls the mean rejection count stays below alpha * tests.
    let mut rng = Rng::new(105);
    let n = 120;
    let n_features = 161;
    let alpha = 0.05;
    let mut total_rejections = 0usize;
    let sims = 100;
    for _ in 0..sims {
        let z = Matrix::from_fn(n, n_features, |_, _| rng.normal().abs());
        let features: Vec<FeatureAnnotation> = (0..n_features)
            .map(|j| FeatureAnnotation {
                feature: j,
                age_rho: None,
                age_p_raw: None,
                age_p_adjusted: None,
                age_significant: false,
                assocs: vec![],
                category: Category::NonSpecific,
                winning_variable: None,
            })
            .collect();
        let annotations = AnnotationTable {
            alpha,
            n_rows: n,
            variable_names: vec![],
            features,
        };
        let secondary = vec![(
            "null_col".to_string(),
            (0..n).map(|_| rng.normal()).collect::<Vec<f64>>(),
        )];
        let report = enrichment_test(&annotations, &z, &secondary, alpha).unwrap();
        total_rejections += report.columns[0].n_significant;
    }
    let mean = total_rejections as f64 / sims as f64;
    let budget = alpha * n_features as f64;
    assert!(
        mean <= budget,
        "mean rejections {mean} exceeds alpha * tested = {budget}"
    );
}

#[test]
fn med_proxy_enrichment_flags_disease_features() {
    // The planted medication proxy must enrich features that load the
    // disease factor in the ideal decomposition.
    let spec = SyntheticSpec::reference(321);
    let (emb, table, gt) = generate_synthetic_cohort(&spec).unwrap();
    let model = gt.ideal_decomposition(emb.values());
    let annotations =
        msae_core::annotate::annotate_all(&model, &emb, &table, 0.05).unwrap();
    let z = model.activations(emb.values());
    let report = enrichment_test(&annotations, &z, table.secondary(), 0.05).unwrap();
    let med = report
        .columns
        .iter()
        .find(|c| c.variable == "sec_med_proxy")
        .expect("medication proxy column present");
    let (dis_pos, dis_neg) = msae_core::data::GroundTruth::ideal_feature_pair(1);
    let flagged: Vec<usize> = med
        .cells
        .iter()
        .filter(|c| c.significant)
        .map(|c| c.feature)
        .collect();
    assert!(
        flagged.contains(&dis_pos) || flagged.contains(&dis_neg),
        "disease features not flagged: {flagged:?}"
    );
}
