//! Selective-prediction harness, ablation runner, and cross-cohort
//! replication metrics.
//!
//! Conversion prediction is a ridge-stabilized IRLS logistic regression under
//! subject-level stratified k-fold cross-validation: subjects are shuffled
//! within label strata and dealt round-robin, and every scan of a subject
//! inherits its fold. Each CV run re-asserts that no subject straddles a
//! train/test boundary.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::annotate::{annotate_all, AnnotationTable, Category};
use crate::data::{CovariateTable, DataError, EmbeddingMatrix};
use crate::manifold::ManifoldGraph;
use crate::matrix::{cholesky_solve, pearson, Matrix};
use crate::rng::{sub_seed, Rng};
use crate::sae::{
    activation_stats, alive_census, train, SaeError, TrainConfig, TrainData, TrainedSae,
};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    MissingLabels,
    TooFewPositives { positives: usize, folds: usize },
    TooFewNegatives { negatives: usize, folds: usize },
    SingleClass,
    EmptySelection { selector: String },
    SubjectLeak { subject: String, fold: usize },
    Data(DataError),
    Sae(SaeError),
    Stats(crate::annotate::StatsError),
    DimensionMismatch { expected: usize, found: usize },
    Unsolvable { detail: String },
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::MissingLabels => write!(f, "no converter labels on the evaluation cohort"),
            EvalError::TooFewPositives { positives, folds } => {
                write!(f, "{positives} positive subjects cannot fill {folds} folds")
            }
            EvalError::TooFewNegatives { negatives, folds } => {
                write!(f, "{negatives} negative subjects cannot fill {folds} folds")
            }
            EvalError::SingleClass => write!(f, "both classes must be present"),
            EvalError::EmptySelection { selector } => {
                write!(f, "feature selector {selector} produced no features")
            }
            EvalError::SubjectLeak { subject, fold } => {
                write!(f, "subject {subject} appears in both sides of fold {fold}")
            }
            EvalError::Data(e) => write!(f, "{e}"),
            EvalError::Sae(e) => write!(f, "{e}"),
            EvalError::Stats(e) => write!(f, "{e}"),
            EvalError::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            EvalError::Unsolvable { detail } => write!(f, "linear solve failed: {detail}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}

impl From<SaeError> for EvalError {
    fn from(e: SaeError) -> Self {
        EvalError::Sae(e)
    }
}

impl From<crate::annotate::StatsError> for EvalError {
    fn from(e: crate::annotate::StatsError) -> Self {
        EvalError::Stats(e)
    }
}

/// Subject-level fold assignments for one stratified label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub label: String,
    /// subject id -> fold index.
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Row -> fold map for a table, erroring on subjects without a fold.
    pub fn fold_of_rows(&self, table: &CovariateTable) -> Result<Vec<Option<usize>>, EvalError> {
        Ok(table
            .subject_ids()
            .iter()
            .map(|s| self.assignments.get(s).copied())
            .collect())
    }
}

/// Build a stratified subject-level fold plan from converter labels.
///
/// Subjects are shuffled within each label stratum and dealt round-robin, so
/// per-fold positive counts differ by at most one subject.
pub fn stratified_subject_kfold(
    table: &CovariateTable,
    n_folds: usize,
    seed: u64,
) -> Result<FoldPlan, EvalError> {
    // Subject-level labels from converter (first labeled row wins; the
    // generator keeps them consistent per subject).
    let mut labels: BTreeMap<&str, bool> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (sid, conv) in table.subject_ids().iter().zip(table.converter()) {
        if let Some(c) = conv {
            if !labels.contains_key(sid.as_str()) {
                order.push(sid.as_str());
                labels.insert(sid.as_str(), *c);
            }
        }
    }
    if order.is_empty() {
        return Err(EvalError::MissingLabels);
    }
    let mut positives: Vec<&str> = order.iter().copied().filter(|s| labels[*s]).collect();
    let mut negatives: Vec<&str> = order.iter().copied().filter(|s| !labels[*s]).collect();
    if positives.len() < n_folds {
        return Err(EvalError::TooFewPositives {
            positives: positives.len(),
            folds: n_folds,
        });
    }
    if negatives.len() < n_folds {
        return Err(EvalError::TooFewNegatives {
            negatives: negatives.len(),
            folds: n_folds,
        });
    }
    let mut rng = Rng::new(sub_seed(seed, "folds"));
    rng.shuffle(&mut positives);
    rng.shuffle(&mut negatives);
    let mut assignments = BTreeMap::new();
    for (i, s) in positives.iter().enumerate() {
        assignments.insert(s.to_string(), i % n_folds);
    }
    for (i, s) in negatives.iter().enumerate() {
        assignments.insert(s.to_string(), i % n_folds);
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        label: "converter".to_string(),
        assignments,
    })
}

/// z-score test columns with train statistics only; zero-variance columns
/// are centered but not scaled.
pub fn standardize_fold(train: &Matrix, test: &Matrix) -> (Matrix, Matrix) {
    debug_assert_eq!(train.cols(), test.cols());
    let p = train.cols();
    let n = train.rows() as f64;
    let mut mean = vec![0.0; p];
    for row in train.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; p];
    for row in train.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&s| {
            let sd = libm::sqrt(s / n);
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let z = |m: &Matrix| {
        Matrix::from_fn(m.rows(), p, |r, c| (m.get(r, c) - mean[c]) / scale[c])
    };
    (z(train), z(test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation_flag: bool,
}

impl LogisticFit {
    pub fn scores(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows())
            .map(|r| {
                let mut eta = self.intercept;
                for (w, v) in self.weights.iter().zip(x.row(r)) {
                    eta += w * v;
                }
                sigmoid(eta)
            })
            .collect()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

const RIDGE: f64 = 1e-6;
const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
/// Max |beta| past which a fit is flagged as separated.
const SEPARATION_BOUND: f64 = 10.0;

/// L2-penalized logistic regression via iteratively reweighted least squares.
///
/// A constant response short-circuits to an intercept at the clamped base
/// rate. Diverging weights (perfect separation) are flagged; the iterate at
/// the cap is returned.
pub fn logistic_fit(x: &Matrix, y: &[bool]) -> Result<LogisticFit, EvalError> {
    let n = x.rows();
    let p = x.cols();
    if y.len() != n {
        return Err(EvalError::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        // Degenerate likelihood: intercept at the add-one clamped base rate.
        let r = if positives == 0 {
            1.0 / (n as f64 + 1.0)
        } else {
            n as f64 / (n as f64 + 1.0)
        };
        return Ok(LogisticFit {
            weights: vec![0.0; p],
            intercept: libm::log(r / (1.0 - r)),
            iterations: 0,
            converged: true,
            separation_flag: false,
        });
    }

    // Augmented design: intercept first.
    let q = p + 1;
    let mut beta = vec![0.0; q];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        // eta, mu, IRLS weights.
        let mut xtwx = Matrix::zeros(q, q);
        let mut xtwz = vec![0.0; q];
        for r in 0..n {
            let row = x.row(r);
            let mut eta = beta[0];
            for (j, v) in row.iter().enumerate() {
                eta += beta[j + 1] * v;
            }
            let mu = sigmoid(eta);
            let w = (mu * (1.0 - mu)).max(1e-10);
            let target = f64::from(u8::from(y[r]));
            let z = eta + (target - mu) / w;
            // Accumulate X^T W X and X^T W z over the augmented row [1, x].
            let aug = |j: usize| if j == 0 { 1.0 } else { row[j - 1] };
            for a in 0..q {
                let wa = w * aug(a);
                xtwz[a] += wa * z;
                for b in a..q {
                    let v = xtwx.get(a, b) + wa * aug(b);
                    xtwx.set(a, b, v);
                }
            }
        }
        // Symmetrize and add the ridge.
        for a in 0..q {
            for b in (a + 1)..q {
                let v = xtwx.get(a, b);
                xtwx.set(b, a, v);
            }
            let v = xtwx.get(a, a) + RIDGE;
            xtwx.set(a, a, v);
        }
        let new_beta = cholesky_solve(xtwx, &xtwz).ok_or_else(|| EvalError::Unsolvable {
            detail: "IRLS normal equations not positive definite".to_string(),
        })?;
        let mut max_delta = 0.0f64;
        for (old, new) in beta.iter().zip(&new_beta) {
            max_delta = f64::max(max_delta, libm::fabs(old - new));
        }
        beta = new_beta;
        if max_delta < IRLS_TOL {
            converged = true;
            break;
        }
    }
    let max_abs = beta.iter().fold(0.0f64, |m, &b| f64::max(m, libm::fabs(b)));
    Ok(LogisticFit {
        intercept: beta[0],
        weights: beta[1..].to_vec(),
        iterations,
        converged,
        separation_flag: max_abs > SEPARATION_BOUND,
    })
}

/// Mann-Whitney AUC with half-credit for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    // Rank-sum formulation with average ranks; ranks are half-integers so the
    // sums below are exact in f64 for any realistic n.
    let ranks = crate::annotate::average_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Sensitivity and specificity (percent) at the fixed threshold 0.5:
/// predicted positive iff score >= 0.5.
pub fn sens_spec(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for (s, &l) in scores.iter().zip(labels) {
        let predicted = *s >= 0.5;
        match (predicted, l) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    let sens = if tp + fn_ > 0 {
        100.0 * tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let spec = if tn + fp > 0 {
        100.0 * tn as f64 / (tn + fp) as f64
    } else {
        0.0
    };
    (sens, spec)
}

/// How the prediction design matrix is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSelector {
    /// Top n alive features by activation frequency on the evaluation rows.
    TopNByFrequency { n: usize },
    /// All alive features annotated with the given category.
    Category { category: Category },
    /// n alive features sampled uniformly without replacement.
    RandomAlive { n: usize, seed: u64 },
    AllAlive,
    /// The raw embedding rows (no SAE).
    RawEmbedding,
    /// age, sex, APOE4 only (non-imaging baseline).
    CovariatesOnly,
}

impl FeatureSelector {
    pub fn name(&self) -> String {
        match self {
            FeatureSelector::TopNByFrequency { n } => format!("top{n}_by_frequency"),
            FeatureSelector::Category { category } => format!("category_{}", category.label()),
            FeatureSelector::RandomAlive { n, .. } => format!("random{n}"),
            FeatureSelector::AllAlive => "all_alive".to_string(),
            FeatureSelector::RawEmbedding => "raw_embedding".to_string(),
            FeatureSelector::CovariatesOnly => "covariates_only".to_string(),
        }
    }
}

/// One point of a per-fold ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fold: usize,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub model_name: String,
    /// Input dimensionality of the design matrix.
    pub d: usize,
    pub n_subjects: usize,
    pub n_positive: usize,
    pub per_fold_auc: Vec<f64>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub pooled_auc: f64,
    pub sens_mean: f64,
    pub sens_std: f64,
    pub spec_mean: f64,
    pub spec_std: f64,
    /// Any fold where the logistic fit raised the separation flag.
    pub separation_flagged: bool,
    /// Selected feature indices (empty for raw/covariate baselines).
    pub features: Vec<usize>,
    /// Per-fold ROC curves for plot export.
    pub roc_points: Vec<RocPoint>,
}

/// ROC curve of one score/label set: walk thresholds from high to low.
fn roc_curve(fold: usize, scores: &[f64], labels: &[bool]) -> Vec<RocPoint> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut points = vec![RocPoint {
        fold,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fold,
            fpr: fp as f64 / n_neg.max(1) as f64,
            tpr: tp as f64 / n_pos.max(1) as f64,
        });
    }
    points
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// Run one cross-validated logistic evaluation over the given design matrix.
/// `rows` index into `design`/`labels_rows` and carry subject ids for the
/// leak guard.
fn cv_logistic(
    design: &Matrix,
    labels: &[bool],
    subjects: &[&str],
    plan: &FoldPlan,
    model_name: &str,
    features: Vec<usize>,
) -> Result<PredictionReport, EvalError> {
    let n = design.rows();
    debug_assert_eq!(labels.len(), n);
    debug_assert_eq!(subjects.len(), n);
    let fold_of: Vec<usize> = subjects
        .iter()
        .map(|s| {
            plan.assignments
                .get(*s)
                .copied()
                .ok_or_else(|| EvalError::Unsolvable {
                    detail: format!("subject {s} missing from fold plan"),
                })
        })
        .collect::<Result<_, _>>()?;

    let mut per_fold_auc = Vec::with_capacity(plan.n_folds);
    let mut per_fold_sens = Vec::with_capacity(plan.n_folds);
    let mut per_fold_spec = Vec::with_capacity(plan.n_folds);
    let mut pooled_scores = vec![0.0; n];
    let mut separation_flagged = false;
    let mut roc_points = Vec::new();
    for fold in 0..plan.n_folds {
        let train_rows: Vec<usize> = (0..n).filter(|&r| fold_of[r] != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|&r| fold_of[r] == fold).collect();
        // Leak guard: train and test subject sets must be disjoint.
        let train_subjects: BTreeSet<&str> = train_rows.iter().map(|&r| subjects[r]).collect();
        for &r in &test_rows {
            if train_subjects.contains(subjects[r]) {
                return Err(EvalError::SubjectLeak {
                    subject: subjects[r].to_string(),
                    fold,
                });
            }
        }
        let x_train = design.gather_rows(&train_rows);
        let x_test = design.gather_rows(&test_rows);
        let y_train: Vec<bool> = train_rows.iter().map(|&r| labels[r]).collect();
        let y_test: Vec<bool> = test_rows.iter().map(|&r| labels[r]).collect();
        let (x_train, x_test) = standardize_fold(&x_train, &x_test);
        let fit = logistic_fit(&x_train, &y_train)?;
        separation_flagged |= fit.separation_flag;
        let scores = fit.scores(&x_test);
        for (&r, &s) in test_rows.iter().zip(&scores) {
            pooled_scores[r] = s;
        }
        per_fold_auc.push(auc(&scores, &y_test)?);
        let (sens, spec) = sens_spec(&scores, &y_test);
        per_fold_sens.push(sens);
        per_fold_spec.push(spec);
        roc_points.extend(roc_curve(fold, &scores, &y_test));
    }
    let (auc_mean, auc_std) = mean_std(&per_fold_auc);
    let (sens_mean, sens_std) = mean_std(&per_fold_sens);
    let (spec_mean, spec_std) = mean_std(&per_fold_spec);
    let pooled_auc = auc(&pooled_scores, labels)?;
    let unique_subjects: BTreeSet<&str> = subjects.iter().copied().collect();
    Ok(PredictionReport {
        model_name: model_name.to_string(),
        d: design.cols(),
        n_subjects: unique_subjects.len(),
        n_positive: labels.iter().filter(|&&l| l).count(),
        per_fold_auc,
        auc_mean,
        auc_std,
        pooled_auc,
        sens_mean,
        sens_std,
        spec_mean,
        spec_std,
        separation_flagged,
        features,
        roc_points,
    })
}

/// Resolve a selector into feature indices over the evaluation data.
fn select_features(
    model: &TrainedSae,
    h: &Matrix,
    annotations: Option<&AnnotationTable>,
    selector: &FeatureSelector,
) -> Result<Vec<usize>, EvalError> {
    let alive = alive_census(model, h);
    let picked = match selector {
        FeatureSelector::TopNByFrequency { n } => {
            let stats = activation_stats(model, h);
            let mut ranked: Vec<usize> = alive.clone();
            ranked.sort_by(|&a, &b| {
                stats[b]
                    .frequency
                    .partial_cmp(&stats[a].frequency)
                    .expect("frequencies are finite")
                    .then(a.cmp(&b))
            });
            ranked.truncate(*n);
            ranked.sort_unstable();
            ranked
        }
        FeatureSelector::Category { category } => {
            let table = annotations.ok_or_else(|| EvalError::EmptySelection {
                selector: "category selector requires annotations".to_string(),
            })?;
            let mut feats = table.features_in_category(*category);
            feats.retain(|f| alive.contains(f));
            feats
        }
        FeatureSelector::RandomAlive { n, seed } => {
            let mut pool = alive.clone();
            let mut rng = Rng::new(sub_seed(*seed, "random-alive"));
            rng.shuffle(&mut pool);
            pool.truncate(*n);
            pool.sort_unstable();
            pool
        }
        FeatureSelector::AllAlive => alive.clone(),
        FeatureSelector::RawEmbedding | FeatureSelector::CovariatesOnly => vec![],
    };
    match selector {
        FeatureSelector::RawEmbedding | FeatureSelector::CovariatesOnly => Ok(picked),
        _ if picked.is_empty() => Err(EvalError::EmptySelection {
            selector: selector.name(),
        }),
        _ => Ok(picked),
    }
}

/// Cross-validated MCI-to-AD conversion prediction from selected feature
/// activations (or raw-embedding / covariate baselines).
///
/// Expects one scan per subject (apply `latest_scan_per_subject` upstream for
/// the single-scan protocol); multi-scan rows are still handled safely since
/// folds are subject-level.
pub fn selective_prediction(
    model: &TrainedSae,
    emb: &EmbeddingMatrix,
    table: &CovariateTable,
    annotations: Option<&AnnotationTable>,
    selector: &FeatureSelector,
    n_folds: usize,
    seed: u64,
) -> Result<PredictionReport, EvalError> {
    table.check_aligned(emb)?;
    // Evaluation rows: those carrying a converter label (MCI subjects).
    let rows: Vec<usize> = (0..table.len())
        .filter(|&r| table.converter()[r].is_some())
        .collect();
    if rows.is_empty() {
        return Err(EvalError::MissingLabels);
    }
    let labels: Vec<bool> = rows
        .iter()
        .map(|&r| table.converter()[r].expect("filtered"))
        .collect();
    let subjects: Vec<&str> = rows
        .iter()
        .map(|&r| table.subject_ids()[r].as_str())
        .collect();
    let eval_table = table.select_rows(&rows)?;
    let plan = stratified_subject_kfold(&eval_table, n_folds, seed)?;

    let features = select_features(model, emb.values(), annotations, selector)?;
    let design = match selector {
        FeatureSelector::RawEmbedding => emb.values().gather_rows(&rows),
        FeatureSelector::CovariatesOnly => Matrix::from_fn(rows.len(), 3, |i, c| {
            let r = rows[i];
            match c {
                0 => table.age()[r],
                1 => f64::from(table.sex()[r]),
                _ => f64::from(table.apoe4()[r]),
            }
        }),
        _ => {
            let z = model.activations(emb.values());
            Matrix::from_fn(rows.len(), features.len(), |i, c| z.get(rows[i], features[c]))
        }
    };
    cv_logistic(
        &design,
        &labels,
        &subjects,
        &plan,
        &selector.name(),
        features,
    )
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub alive: usize,
    pub d: usize,
    pub auc: f64,
    pub auc_std: f64,
    pub sens: f64,
    pub spec: f64,
    /// Populated instead of metrics when the cell failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub lambdas: Vec<f64>,
    pub expansions: Vec<usize>,
    pub topk_values: Vec<usize>,
    pub category_subsets: Vec<Category>,
    /// (subset size, number of draws) for the random-alive control.
    pub random_control: Option<(usize, usize)>,
    /// Feature count for the top-by-frequency evaluation of retrained cells.
    pub eval_top_n: usize,
    pub n_folds: usize,
}

/// Everything an ablation cell needs to retrain and evaluate.
pub struct AblationInputs<'a> {
    pub h_train: &'a Matrix,
    pub h_valid: Option<&'a Matrix>,
    pub graph: &'a ManifoldGraph,
    pub base_config: &'a TrainConfig,
    /// Evaluation cohort (latest scan per subject applied upstream).
    pub eval_emb: &'a EmbeddingMatrix,
    pub eval_table: &'a CovariateTable,
    /// Covariate table aligned with the training rows (for annotation).
    pub train_emb: &'a EmbeddingMatrix,
    pub train_table: &'a CovariateTable,
    pub alpha: f64,
}

fn run_cell(
    inputs: &AblationInputs<'_>,
    config: &TrainConfig,
    variant: &str,
    grid: &AblationGrid,
) -> Result<(AblationCell, TrainedSae), EvalError> {
    let graph = if config.lambda > 0.0 {
        Some(inputs.graph)
    } else {
        None
    };
    let model = train(
        TrainData {
            train: inputs.h_train,
            valid: inputs.h_valid,
        },
        graph,
        config,
    )?;
    let alive = alive_census(&model, inputs.h_train).len();
    let report = selective_prediction(
        &model,
        inputs.eval_emb,
        inputs.eval_table,
        None,
        &FeatureSelector::TopNByFrequency {
            n: grid.eval_top_n,
        },
        grid.n_folds,
        config.seed,
    )?;
    Ok((
        AblationCell {
            variant: variant.to_string(),
            alive,
            d: report.d,
            auc: report.auc_mean,
            auc_std: report.auc_std,
            sens: report.sens_mean,
            spec: report.spec_mean,
            error: None,
        },
        model,
    ))
}

/// Run the ablation grid. Per-cell failures are recorded and the suite
/// continues. Cells are sorted by their variant key in the output.
pub fn ablation_suite(
    inputs: &AblationInputs<'_>,
    grid: &AblationGrid,
) -> Result<Vec<AblationCell>, EvalError> {
    let mut cells: Vec<AblationCell> = Vec::new();
    let fail = |variant: &str, e: &EvalError| AblationCell {
        variant: variant.to_string(),
        alive: 0,
        d: 0,
        auc: 0.0,
        auc_std: 0.0,
        sens: 0.0,
        spec: 0.0,
        error: Some(e.to_string()),
    };

    // Base model: used by category subsets and the random control.
    let base_variant = "base".to_string();
    let base = run_cell(inputs, inputs.base_config, &base_variant, grid);
    let base_model = match base {
        Ok((cell, model)) => {
            cells.push(cell);
            Some(model)
        }
        Err(e) => {
            cells.push(fail(&base_variant, &e));
            None
        }
    };

    for &lambda in &grid.lambdas {
        if lambda == inputs.base_config.lambda {
            continue;
        }
        let mut config = inputs.base_config.clone();
        config.lambda = lambda;
        let variant = format!("lambda_{lambda}");
        match run_cell(inputs, &config, &variant, grid) {
            Ok((cell, _)) => cells.push(cell),
            Err(e) => cells.push(fail(&variant, &e)),
        }
    }
    for &expansion in &grid.expansions {
        if expansion == inputs.base_config.expansion {
            continue;
        }
        let mut config = inputs.base_config.clone();
        config.expansion = expansion;
        let variant = format!("expansion_{expansion}");
        match run_cell(inputs, &config, &variant, grid) {
            Ok((cell, _)) => cells.push(cell),
            Err(e) => cells.push(fail(&variant, &e)),
        }
    }
    for &k in &grid.topk_values {
        let base_k = match inputs.base_config.activation {
            crate::sae::Activation::TopK { k } => k,
            crate::sae::Activation::Relu => 0,
        };
        if k == base_k {
            continue;
        }
        let mut config = inputs.base_config.clone();
        config.activation = crate::sae::Activation::TopK { k };
        let variant = format!("topk_{k}");
        match run_cell(inputs, &config, &variant, grid) {
            Ok((cell, _)) => cells.push(cell),
            Err(e) => cells.push(fail(&variant, &e)),
        }
    }

    if let Some(model) = &base_model {
        // Category subsets evaluate the frozen base model.
        let annotations = annotate_all(
            model,
            inputs.train_emb,
            inputs.train_table,
            inputs.alpha,
        )?;
        for category in &grid.category_subsets {
            let variant = format!("only_{}", category.label());
            let selector = FeatureSelector::Category {
                category: *category,
            };
            match selective_prediction(
                model,
                inputs.eval_emb,
                inputs.eval_table,
                Some(&annotations),
                &selector,
                grid.n_folds,
                inputs.base_config.seed,
            ) {
                Ok(report) => cells.push(AblationCell {
                    variant,
                    alive: report.features.len(),
                    d: report.d,
                    auc: report.auc_mean,
                    auc_std: report.auc_std,
                    sens: report.sens_mean,
                    spec: report.spec_mean,
                    error: None,
                }),
                Err(e) => cells.push(fail(&variant, &e)),
            }
        }
        if let Some((n, draws)) = grid.random_control {
            // Enumerated seeds; report mean +/- std over the draws.
            let mut aucs = Vec::with_capacity(draws);
            let mut senss = Vec::with_capacity(draws);
            let mut specs = Vec::with_capacity(draws);
            let mut err: Option<EvalError> = None;
            for draw in 0..draws {
                let selector = FeatureSelector::RandomAlive {
                    n,
                    seed: sub_seed(inputs.base_config.seed, &format!("random-control-{draw}")),
                };
                match selective_prediction(
                    model,
                    inputs.eval_emb,
                    inputs.eval_table,
                    None,
                    &selector,
                    grid.n_folds,
                    inputs.base_config.seed,
                ) {
                    Ok(report) => {
                        aucs.push(report.auc_mean);
                        senss.push(report.sens_mean);
                        specs.push(report.spec_mean);
                    }
                    Err(e) => {
                        err = Some(e);
                        break;
                    }
                }
            }
            let variant = format!("random_{n}x{draws}");
            match err {
                Some(e) => cells.push(fail(&variant, &e)),
                None => {
                    let (auc_mean, auc_std) = mean_std(&aucs);
                    let (sens_mean, _) = mean_std(&senss);
                    let (spec_mean, _) = mean_std(&specs);
                    cells.push(AblationCell {
                        variant,
                        alive: n,
                        d: n,
                        auc: auc_mean,
                        auc_std,
                        sens: sens_mean,
                        spec: spec_mean,
                        error: None,
                    });
                }
            }
        }
    }

    cells.sort_by(|a, b| a.variant.cmp(&b.variant));
    Ok(cells)
}

/// Cross-cohort replication metrics for one frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub n_joint_alive: usize,
    /// Pearson r between age-partial diagnosis correlations across cohorts.
    pub annotation_agreement: f64,
    /// Per shared variable: Pearson r of partial correlations over jointly
    /// alive features.
    pub per_variable_agreement: Vec<(String, f64)>,
    /// Spearman r between per-feature mean activation over all rows.
    pub activation_consistency: f64,
    /// Pearson r of per-diagnosis mean activation patterns (CN, MCI, AD).
    pub per_diagnosis_pattern_r: Vec<(String, f64)>,
    /// Fraction of selected (top-by-frequency in A) features alive and
    /// same-category in cohort B.
    pub replication_rate: f64,
    pub n_selected: usize,
    pub shared_variables: Vec<String>,
}

/// Apply one frozen model to two cohorts and measure agreement. Metrics are
/// restricted to features alive in both cohorts and to shared variables.
pub fn cross_cohort_replicate(
    model: &TrainedSae,
    cohort_a: (&EmbeddingMatrix, &CovariateTable),
    cohort_b: (&EmbeddingMatrix, &CovariateTable),
    alpha: f64,
    n_selected: usize,
) -> Result<ReplicationReport, EvalError> {
    let (emb_a, table_a) = cohort_a;
    let (emb_b, table_b) = cohort_b;
    if emb_a.dim() != emb_b.dim() || emb_a.dim() != model.d() {
        return Err(EvalError::DimensionMismatch {
            expected: model.d(),
            found: emb_b.dim(),
        });
    }
    let ann_a = annotate_all(model, emb_a, table_a, alpha)?;
    let ann_b = annotate_all(model, emb_b, table_b, alpha)?;

    let alive_a: Vec<usize> = ann_a.features.iter().map(|f| f.feature).collect();
    let alive_b: BTreeSet<usize> = ann_b.features.iter().map(|f| f.feature).collect();
    let joint: Vec<usize> = alive_a
        .iter()
        .copied()
        .filter(|f| alive_b.contains(f))
        .collect();

    let shared_variables: Vec<String> = ann_a
        .variable_names
        .iter()
        .filter(|v| ann_b.variable_names.contains(v))
        .cloned()
        .collect();

    // Per-variable agreement of partial correlations over joint features.
    let mut per_variable_agreement = Vec::new();
    for var in &shared_variables {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &f in &joint {
            let ra = ann_a
                .annotation(f)
                .and_then(|a| a.assocs.iter().find(|s| &s.variable == var))
                .and_then(|s| s.rho);
            let rb = ann_b
                .annotation(f)
                .and_then(|a| a.assocs.iter().find(|s| &s.variable == var))
                .and_then(|s| s.rho);
            if let (Some(x), Some(y)) = (ra, rb) {
                xs.push(x);
                ys.push(y);
            }
        }
        let r = pearson(&xs, &ys).unwrap_or(0.0);
        per_variable_agreement.push((var.clone(), r));
    }
    let annotation_agreement = per_variable_agreement
        .iter()
        .find(|(v, _)| v == "diagnosis")
        .map(|(_, r)| *r)
        .unwrap_or(0.0);

    // Activation consistency: Spearman of per-feature mean activation.
    let z_a = model.activations(emb_a.values());
    let z_b = model.activations(emb_b.values());
    let mean_over = |z: &Matrix, rows: &[usize], j: usize| -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|&r| z.get(r, j)).sum::<f64>() / rows.len() as f64
    };
    let all_a: Vec<usize> = (0..emb_a.n()).collect();
    let all_b: Vec<usize> = (0..emb_b.n()).collect();
    let means_a: Vec<f64> = joint.iter().map(|&j| mean_over(&z_a, &all_a, j)).collect();
    let means_b: Vec<f64> = joint.iter().map(|&j| mean_over(&z_b, &all_b, j)).collect();
    let activation_consistency = if joint.len() >= 3 {
        crate::annotate::spearman(&means_a, &means_b).unwrap_or(0.0)
    } else {
        0.0
    };

    // Diagnosis-specific activation patterns.
    use crate::data::Diagnosis;
    let mut per_diagnosis_pattern_r = Vec::new();
    for (name, dx) in [
        ("CN", Diagnosis::Cn),
        ("MCI", Diagnosis::Mci),
        ("AD", Diagnosis::Ad),
    ] {
        let rows_a: Vec<usize> = (0..table_a.len())
            .filter(|&r| table_a.diagnosis()[r] == dx)
            .collect();
        let rows_b: Vec<usize> = (0..table_b.len())
            .filter(|&r| table_b.diagnosis()[r] == dx)
            .collect();
        if rows_a.is_empty() || rows_b.is_empty() {
            continue;
        }
        let pa: Vec<f64> = joint.iter().map(|&j| mean_over(&z_a, &rows_a, j)).collect();
        let pb: Vec<f64> = joint.iter().map(|&j| mean_over(&z_b, &rows_b, j)).collect();
        let r = pearson(&pa, &pb).unwrap_or(0.0);
        per_diagnosis_pattern_r.push((name.to_string(), r));
    }

    // Replication rate over the top-by-frequency selection in cohort A.
    let stats_a = activation_stats(model, emb_a.values());
    let mut ranked: Vec<usize> = alive_a.clone();
    ranked.sort_by(|&x, &y| {
        stats_a[y]
            .frequency
            .partial_cmp(&stats_a[x].frequency)
            .expect("finite")
            .then(x.cmp(&y))
    });
    ranked.truncate(n_selected);
    let replicated = ranked
        .iter()
        .filter(|&&f| {
            alive_b.contains(&f)
                && match (ann_a.annotation(f), ann_b.annotation(f)) {
                    (Some(a), Some(b)) => a.category == b.category,
                    _ => false,
                }
        })
        .count();
    let replication_rate = if ranked.is_empty() {
        0.0
    } else {
        replicated as f64 / ranked.len() as f64
    };

    Ok(ReplicationReport {
        n_joint_alive: joint.len(),
        annotation_agreement,
        per_variable_agreement,
        activation_consistency,
        per_diagnosis_pattern_r,
        replication_rate,
        n_selected: ranked.len(),
        shared_variables,
    })
}
