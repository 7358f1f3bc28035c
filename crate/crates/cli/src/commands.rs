//! Pipeline commands. Each command is idempotent: identical inputs produce
//! byte-identical outputs, independent of the thread count.

use std::path::Path;

use msae_core::annotate::{annotate_all, enrichment_test};
use msae_core::data::{
    generate_synthetic_cohort, latest_scan_per_subject, subject_split, CovariateTable,
    EmbeddingMatrix, GroundTruth, SyntheticSpec,
};
use msae_core::diagnostics::geometry_report;
use msae_core::evaluate::{
    ablation_suite, cross_cohort_replicate, selective_prediction, AblationGrid, AblationInputs,
    FeatureSelector, PredictionReport,
};
use msae_core::manifold::{graph_from_neighbor_lists, knn_of_row};
use msae_core::rng::sub_seed;
use msae_core::sae::{train, TrainData, TrainedSae};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::io::embeddings::{load_embeddings, write_embeddings};
use crate::io::{self, checkpoint, covariates, graph as graph_io, reports};
use crate::par;
use crate::provenance::Provenance;

fn provenance_for(config: &ExperimentConfig, command: &str) -> Provenance {
    Provenance::new(command, config.seed, config.config_digest())
}

fn synth_spec(config: &ExperimentConfig) -> SyntheticSpec {
    let mut spec = config
        .synth
        .clone()
        .unwrap_or_else(|| SyntheticSpec::reference(config.seed));
    // All randomness funnels through the master seed.
    spec.seed = sub_seed(config.seed, "synth");
    spec
}

fn load_cohort(
    config: &ExperimentConfig,
) -> Result<(EmbeddingMatrix, CovariateTable), CliError> {
    let emb = load_embeddings(&config.embeddings_path(), config.embeddings_format()?)?;
    let table = covariates::load_covariates(&config.covariates_path())?;
    table.check_aligned(&emb)?;
    Ok((emb, table))
}

/// Generate the synthetic cohort and write every artifact.
pub fn cmd_synth(config: &ExperimentConfig) -> Result<(), CliError> {
    let spec = synth_spec(config);
    let (emb, table, gt) = generate_synthetic_cohort(&spec)?;
    let prov = provenance_for(config, "synth");
    let format = config.embeddings_format()?;
    let emb_path = config.embeddings_path();
    write_embeddings(&emb_path, &emb, format)?;
    io::write_provenance_sidecar(&emb_path, &prov)?;
    let cov_path = config.covariates_path();
    covariates::write_covariates(&cov_path, &table)?;
    io::write_provenance_sidecar(&cov_path, &prov)?;
    write_ground_truth(&config.out_dir, &emb, &gt, &prov)?;
    println!(
        "synth: {} rows, d={}, {} subjects -> {}",
        emb.n(),
        emb.dim(),
        table
            .subject_ids()
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        emb_path.display()
    );
    Ok(())
}

fn write_ground_truth(
    out_dir: &Path,
    emb: &EmbeddingMatrix,
    gt: &GroundTruth,
    prov: &Provenance,
) -> Result<(), CliError> {
    let n_factors = gt.factor_values.cols();
    let mut factors = String::from("sample_id");
    for f in 0..n_factors {
        factors.push_str(&format!(",f{f}"));
    }
    factors.push('\n');
    for (r, id) in emb.sample_ids().iter().enumerate() {
        factors.push_str(id);
        for f in 0..n_factors {
            factors.push(',');
            factors.push_str(&format!("{:.16e}", gt.factor_values.get(r, f)));
        }
        factors.push('\n');
    }
    let factors_path = out_dir.join("ground_truth_factors.csv");
    io::write_string(&factors_path, &factors)?;
    io::write_provenance_sidecar(&factors_path, prov)?;

    let mut dict = String::new();
    for f in 0..n_factors {
        if f > 0 {
            dict.push(',');
        }
        dict.push_str(&format!("f{f}"));
    }
    dict.push('\n');
    for r in 0..gt.true_dictionary.rows() {
        for f in 0..n_factors {
            if f > 0 {
                dict.push(',');
            }
            dict.push_str(&format!("{:.16e}", gt.true_dictionary.get(r, f)));
        }
        dict.push('\n');
    }
    let dict_path = out_dir.join("ground_truth_dictionary.csv");
    io::write_string(&dict_path, &dict)?;
    io::write_provenance_sidecar(&dict_path, prov)?;

    io::write_json_report(
        &out_dir.join("ground_truth_meanings.json"),
        prov,
        &gt.factor_meaning,
    )
}

/// Build the k-NN manifold graph over the training split.
pub fn cmd_graph(config: &ExperimentConfig) -> Result<(), CliError> {
    let (emb, table) = load_cohort(config)?;
    let (train_rows, _) = subject_split(&table, config.train.split_fraction, config.seed)?;
    let train_emb = emb.select_rows(&train_rows)?;
    let k = config.train.k_nn;
    let n = train_emb.n();
    if k == 0 || k > n - 1 {
        return Err(CliError::validation(format!(
            "k_nn={k} out of range for {n} training rows"
        )));
    }
    // Row-sharded neighbor search; assembly is shared with the sequential
    // path so thread count never changes bytes.
    let values = train_emb.values();
    let lists = par::map_indexed(n, config.threads, |i| knn_of_row(values, i, k));
    let graph = graph_from_neighbor_lists(n, k, &lists)?;
    let prov = provenance_for(config, "graph");
    let path = config.graph_path();
    graph_io::write_graph(&path, &graph)?;
    io::write_provenance_sidecar(&path, &prov)?;
    graph_io::export_graph_csv(&config.out_dir.join("graph.csv"), &graph)?;
    println!(
        "graph: {} nodes, k={}, sigma={:.6} -> {}",
        graph.n_nodes(),
        graph.k(),
        graph.sigma(),
        path.display()
    );
    Ok(())
}

/// Train the SAE on the training split and save a checkpoint.
pub fn cmd_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let (emb, table) = load_cohort(config)?;
    let core_config = config.train.to_core(config.seed)?;
    let (train_rows, valid_rows) = subject_split(&table, config.train.split_fraction, config.seed)?;
    let h_train = emb.values().gather_rows(&train_rows);
    let h_valid = emb.values().gather_rows(&valid_rows);

    let graph = if core_config.lambda > 0.0 {
        Some(graph_io::load_graph(&config.graph_path())?)
    } else {
        None
    };
    let model = train(
        TrainData {
            train: &h_train,
            valid: Some(&h_valid),
        },
        graph.as_ref(),
        &core_config,
    )?;

    let mut prov = provenance_for(config, "train");
    if core_config.lambda == 0.0 {
        prov = prov.tag("standard SAE");
    }
    let path = config.checkpoint_path();
    checkpoint::write_checkpoint(&path, &model, &prov)?;

    #[derive(serde::Serialize)]
    struct TrainReport<'a> {
        explained_variance: Option<f64>,
        alive: usize,
        d_sae: usize,
        final_loss: Option<&'a msae_core::sae::EpochLoss>,
        epochs: usize,
    }
    io::write_json_report(
        &config.out_dir.join("train_report.json"),
        &prov,
        &TrainReport {
            explained_variance: model.explained_variance,
            alive: model.alive_features().len(),
            d_sae: model.d_sae(),
            final_loss: model.loss_history.last(),
            epochs: model.loss_history.len(),
        },
    )?;
    println!(
        "train: {} alive of {} features, explained variance {:?} -> {}",
        model.alive_features().len(),
        model.d_sae(),
        model.explained_variance,
        path.display()
    );
    Ok(())
}

fn load_model(config: &ExperimentConfig) -> Result<TrainedSae, CliError> {
    Ok(checkpoint::load_checkpoint(&config.checkpoint_path())?.0)
}

/// Annotate alive features and run enrichment against secondary variables.
pub fn cmd_annotate(config: &ExperimentConfig) -> Result<(), CliError> {
    let (emb, table) = load_cohort(config)?;
    let model = load_model(config)?;
    let (emb, table) = if config.annotate.latest_scan {
        let (t, e, warnings) = latest_scan_per_subject(&table, &emb)?;
        for w in &warnings {
            eprintln!(
                "warning: visit tie for subject {}: kept {}, dropped {:?}",
                w.subject_id, w.kept, w.dropped
            );
        }
        (e, t)
    } else {
        (emb, table)
    };
    let annotations = annotate_all(&model, &emb, &table, config.annotate.alpha)?;
    let prov = provenance_for(config, "annotate");
    let csv_path = config.out_dir.join("annotation.csv");
    reports::write_annotation_csv(&csv_path, &annotations)?;
    io::write_provenance_sidecar(&csv_path, &prov)?;
    reports::write_heatmap_csv(&config.out_dir.join("annotation_heatmap.csv"), &annotations)?;
    io::write_json_report(&config.out_dir.join("annotation.json"), &prov, &annotations)?;

    if !table.secondary().is_empty() {
        let z = model.activations(emb.values());
        let enrichment = enrichment_test(&annotations, &z, table.secondary(), config.annotate.alpha)?;
        for skipped in &enrichment.skipped {
            eprintln!("warning: secondary column {skipped:?} has zero variance; skipped");
        }
        reports::write_enrichment_csv(&config.out_dir.join("enrichment.csv"), &enrichment)?;
        reports::write_enrichment_summary_csv(
            &config.out_dir.join("enrichment_summary.csv"),
            &enrichment,
        )?;
        io::write_json_report(&config.out_dir.join("enrichment.json"), &prov, &enrichment)?;
    }

    for (category, count) in annotations.category_counts() {
        println!("annotate: {:>12} {count}", category.label());
    }
    Ok(())
}

/// Selective-prediction harness (and optionally the ablation grid).
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<(), CliError> {
    let (emb, table) = load_cohort(config)?;
    if table.converter().iter().all(|c| c.is_none()) {
        return Err(CliError::validation(
            "evaluation requires converter labels on the cohort".to_string(),
        ));
    }
    let model = load_model(config)?;
    let annotations = annotate_all(&model, &emb, &table, config.annotate.alpha)?;
    let (eval_table, eval_emb, _) = latest_scan_per_subject(&table, &emb)?;

    let folds_seed = sub_seed(config.seed, "folds");
    let mut selectors = vec![
        FeatureSelector::TopNByFrequency {
            n: config.evaluate.top_n,
        },
        FeatureSelector::AllAlive,
        FeatureSelector::RandomAlive {
            n: config.evaluate.top_n,
            seed: sub_seed(config.seed, "random-selector"),
        },
        FeatureSelector::RawEmbedding,
        FeatureSelector::CovariatesOnly,
    ];
    for category in config.evaluate.category_subsets() {
        selectors.push(FeatureSelector::Category { category });
    }

    let mut prediction_reports: Vec<PredictionReport> = Vec::new();
    for selector in &selectors {
        match selective_prediction(
            &model,
            &eval_emb,
            &eval_table,
            Some(&annotations),
            selector,
            config.evaluate.n_folds,
            folds_seed,
        ) {
            Ok(report) => prediction_reports.push(report),
            Err(msae_core::evaluate::EvalError::EmptySelection { selector }) => {
                eprintln!("warning: selector {selector} matched no features; skipped");
            }
            Err(e) => return Err(e.into()),
        }
    }
    let prov = provenance_for(config, "evaluate");
    let csv_path = config.out_dir.join("prediction.csv");
    reports::write_prediction_csv(&csv_path, &prediction_reports)?;
    io::write_provenance_sidecar(&csv_path, &prov)?;
    reports::write_roc_csv(&config.out_dir.join("roc_points.csv"), &prediction_reports)?;
    io::write_json_report(
        &config.out_dir.join("prediction.json"),
        &prov,
        &prediction_reports,
    )?;
    for report in &prediction_reports {
        println!(
            "evaluate: {:<28} d={:<4} auc {:.3} +/- {:.3}",
            report.model_name, report.d, report.auc_mean, report.auc_std
        );
    }

    if config.evaluate.ablation {
        let core_config = config.train.to_core(config.seed)?;
        let (train_rows, valid_rows) =
            subject_split(&table, config.train.split_fraction, config.seed)?;
        let h_train = emb.values().gather_rows(&train_rows);
        let h_valid = emb.values().gather_rows(&valid_rows);
        let train_emb = emb.select_rows(&train_rows)?;
        let train_table = table.select_rows(&train_rows)?;
        let graph = graph_io::load_graph(&config.graph_path())?;
        let grid = AblationGrid {
            lambdas: config.evaluate.lambda_grid.clone(),
            expansions: config.evaluate.expansion_grid.clone(),
            topk_values: config.evaluate.topk_grid.clone(),
            category_subsets: config.evaluate.category_subsets(),
            random_control: Some((config.evaluate.top_n, config.evaluate.random_control_draws)),
            eval_top_n: config.evaluate.top_n,
            n_folds: config.evaluate.n_folds,
        };
        let inputs = AblationInputs {
            h_train: &h_train,
            h_valid: Some(&h_valid),
            graph: &graph,
            base_config: &core_config,
            eval_emb: &eval_emb,
            eval_table: &eval_table,
            train_emb: &train_emb,
            train_table: &train_table,
            alpha: config.annotate.alpha,
        };
        let cells = ablation_suite(&inputs, &grid)?;
        reports::write_ablation_csv(&config.out_dir.join("ablation.csv"), &cells)?;
        io::write_json_report(&config.out_dir.join("ablation.json"), &prov, &cells)?;
        for cell in &cells {
            match &cell.error {
                Some(e) => println!("ablation: {:<24} FAILED: {e}", cell.variant),
                None => println!(
                    "ablation: {:<24} alive={:<5} auc {:.3}",
                    cell.variant, cell.alive, cell.auc
                ),
            }
        }
    }
    Ok(())
}

/// Apply the frozen model to a second cohort and measure replication.
pub fn cmd_replicate(config: &ExperimentConfig) -> Result<(), CliError> {
    let (emb_a, table_a) = load_cohort(config)?;
    let emb_b_path = config.paths.cohort_b_embeddings.as_ref().ok_or_else(|| {
        CliError::validation("replicate requires paths.cohort_b_embeddings".to_string())
    })?;
    let cov_b_path = config.paths.cohort_b_covariates.as_ref().ok_or_else(|| {
        CliError::validation("replicate requires paths.cohort_b_covariates".to_string())
    })?;
    let emb_b = load_embeddings(emb_b_path, config.embeddings_format()?)?;
    let table_b = covariates::load_covariates(cov_b_path)?;
    table_b.check_aligned(&emb_b)?;
    let model = load_model(config)?;
    let report = cross_cohort_replicate(
        &model,
        (&emb_a, &table_a),
        (&emb_b, &table_b),
        config.annotate.alpha,
        config.replicate.n_selected,
    )?;
    let prov = provenance_for(config, "replicate");
    io::write_json_report(&config.out_dir.join("replication.json"), &prov, &report)?;
    let csv_path = config.out_dir.join("replication.csv");
    reports::write_replication_summary(&csv_path, &report)?;
    io::write_provenance_sidecar(&csv_path, &prov)?;
    println!(
        "replicate: {} jointly alive, annotation agreement {:.3}, activation consistency {:.3}, rate {:.2}",
        report.n_joint_alive,
        report.annotation_agreement,
        report.activation_consistency,
        report.replication_rate
    );
    Ok(())
}

/// Geometric diagnostics of the embedding matrix.
pub fn cmd_diagnose(config: &ExperimentConfig) -> Result<(), CliError> {
    let (emb, table) = load_cohort(config)?;
    let report = geometry_report(&emb, table.diagnosis())?;
    let prov = provenance_for(config, "diagnose");
    io::write_json_report(&config.out_dir.join("geometry.json"), &prov, &report)?;
    println!(
        "diagnose: negative_fraction={:.4} radial_eta2={:?} effective_dim={:.2}",
        report.negative_fraction, report.radial_eta2, report.effective_dim
    );
    Ok(())
}

/// Consolidate whatever reports exist in the output directory.
pub fn cmd_report(config: &ExperimentConfig) -> Result<(), CliError> {
    let known = [
        "train_report.json",
        "annotation.json",
        "enrichment.json",
        "prediction.json",
        "ablation.json",
        "replication.json",
        "geometry.json",
    ];
    let mut entries = serde_json::Map::new();
    let mut found = 0usize;
    for name in known {
        let path = config.out_dir.join(name);
        if path.exists() {
            let text = io::read_to_string(&path)?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            entries.insert(name.trim_end_matches(".json").to_string(), value);
            found += 1;
        }
    }
    if found == 0 {
        return Err(CliError::MissingArtifact(
            config.out_dir.join("train_report.json"),
        ));
    }
    let prov = provenance_for(config, "report");
    io::write_json_report(
        &config.out_dir.join("summary.json"),
        &prov,
        &serde_json::Value::Object(entries.clone()),
    )?;
    println!("report: consolidated {found} artifacts into summary.json");
    for name in entries.keys() {
        println!("  - {name}");
    }
    Ok(())
}

/// Dispatch by command name; shared by main and tests.
pub fn run_command(command: &str, config: &ExperimentConfig) -> Result<(), CliError> {
    match command {
        "synth" => cmd_synth(config),
        "graph" => cmd_graph(config),
        "train" => cmd_train(config),
        "annotate" => cmd_annotate(config),
        "evaluate" => cmd_evaluate(config),
        "replicate" => cmd_replicate(config),
        "diagnose" => cmd_diagnose(config),
        "report" => cmd_report(config),
        other => Err(CliError::validation(format!("unknown command {other:?}"))),
    }
}
