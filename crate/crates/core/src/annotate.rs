//! Age-deconfounded feature annotation.
//!
//! Every alive feature is correlated (Spearman, average ranks) with each
//! non-age clinical variable after partialling age out of both sides:
//!
//! ```text
//! rho_jc.a = (r_jc - r_ja * r_ca) / (sqrt(1 - r_ja^2) * sqrt(1 - r_ca^2))
//! ```
//!
//! p-values come from the t approximation with n-3 degrees of freedom (one
//! covariate partialled out), Benjamini-Hochberg corrected flat over the full
//! feature x variable matrix. A feature takes the category of its strongest
//! significant variable; with none, it falls back to "aging" when its raw age
//! correlation survives FDR, else "non-specific".

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{CovariateTable, EmbeddingMatrix};
use crate::matrix::{pearson, Matrix};
use crate::sae::{alive_census, TrainedSae};

#[derive(Debug, Clone, PartialEq)]
pub enum StatsError {
    LengthMismatch { left: usize, right: usize },
    TooFewSamples { n: usize, need: usize },
    ZeroVariance,
    /// A denominator term of the partial correlation fell below 1e-12: the
    /// input is a deterministic function of age.
    DegenerateDenominator,
    InvalidPValue { index: usize, value: f64 },
    Misaligned { detail: String },
}

impl core::fmt::Display for StatsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            StatsError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            StatsError::TooFewSamples { n, need } => {
                write!(f, "need at least {need} samples, got {n}")
            }
            StatsError::ZeroVariance => write!(f, "zero-variance input"),
            StatsError::DegenerateDenominator => {
                write!(f, "degenerate partial-correlation denominator")
            }
            StatsError::InvalidPValue { index, value } => {
                write!(f, "p-value {value} at index {index} outside [0, 1]")
            }
            StatsError::Misaligned { detail } => write!(f, "misaligned inputs: {detail}"),
        }
    }
}

impl core::error::Error for StatsError {}

/// Average (fractional) ranks, 1-based; ties share the mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        x[i].partial_cmp(&x[j])
            .expect("ranks require finite values")
            .then(i.cmp(&j))
    });
    let mut ranks = vec![0.0; n];
    let mut s = 0;
    while s < n {
        let mut e = s;
        while e + 1 < n && x[idx[e + 1]] == x[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for t in s..=e {
            ranks[idx[t]] = avg;
        }
        s = e + 1;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewSamples { n: x.len(), need: 3 });
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry).ok_or(StatsError::ZeroVariance)
}

/// Partial Spearman correlation of `feature` and `var`, controlling for age.
pub fn partial_spearman_age(
    feature: &[f64],
    var: &[f64],
    age: &[f64],
) -> Result<f64, StatsError> {
    if feature.len() != var.len() || feature.len() != age.len() {
        return Err(StatsError::LengthMismatch {
            left: feature.len(),
            right: var.len().max(age.len()),
        });
    }
    if feature.len() < 4 {
        return Err(StatsError::TooFewSamples {
            n: feature.len(),
            need: 4,
        });
    }
    let r_jc = spearman(feature, var)?;
    let r_ja = spearman(feature, age)?;
    let r_ca = spearman(var, age)?;
    let d1 = 1.0 - r_ja * r_ja;
    let d2 = 1.0 - r_ca * r_ca;
    if d1 < 1e-12 || d2 < 1e-12 {
        return Err(StatsError::DegenerateDenominator);
    }
    let rho = (r_jc - r_ja * r_ca) / (libm::sqrt(d1) * libm::sqrt(d2));
    Ok(rho.clamp(-1.0, 1.0))
}

/// Regularized incomplete beta function I_x(a, b) via the Lentz continued
/// fraction.
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log(1.0 - x);
    let bt = libm::exp(ln_bt);
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

/// Two-sided p-value for a correlation-style t statistic with `df` degrees
/// of freedom: `t = rho * sqrt(df / (1 - rho^2))`.
fn pvalue_t(rho: f64, df: f64) -> f64 {
    let r = rho.clamp(-1.0, 1.0);
    if libm::fabs(r) >= 1.0 {
        return 0.0;
    }
    let t2 = df * r * r / (1.0 - r * r);
    betai(df / 2.0, 0.5, df / (df + t2))
}

/// Two-sided p-value for a partial correlation with one covariate removed
/// (n - 3 degrees of freedom). |rho| = 1 maps to p = 0.
pub fn pvalue_partial(rho: f64, n: usize) -> Result<f64, StatsError> {
    if n < 4 {
        return Err(StatsError::TooFewSamples { n, need: 4 });
    }
    Ok(pvalue_t(rho, (n - 3) as f64))
}

/// Two-sided p-value for a plain correlation (n - 2 degrees of freedom).
pub fn pvalue_corr(rho: f64, n: usize) -> Result<f64, StatsError> {
    if n < 3 {
        return Err(StatsError::TooFewSamples { n, need: 3 });
    }
    Ok(pvalue_t(rho, (n - 2) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BhOutcome {
    /// Step-up adjusted p-values, in input order.
    pub adjusted: Vec<f64>,
    /// Rejection flags at the given alpha, in input order.
    pub reject: Vec<bool>,
}

/// Benjamini-Hochberg step-up procedure.
pub fn bh_fdr(pvals: &[f64], alpha: f64) -> Result<BhOutcome, StatsError> {
    for (index, &value) in pvals.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(StatsError::InvalidPValue { index, value });
        }
    }
    let m = pvals.len();
    if m == 0 {
        return Ok(BhOutcome {
            adjusted: vec![],
            reject: vec![],
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        pvals[i]
            .partial_cmp(&pvals[j])
            .expect("p-values are finite")
            .then(i.cmp(&j))
    });

    // Largest rank i (1-based) with p_(i) <= (i/m) * alpha.
    let mut cutoff = 0usize;
    for (rank0, &idx) in order.iter().enumerate() {
        let rank = rank0 + 1;
        if pvals[idx] <= (rank as f64 / m as f64) * alpha {
            cutoff = rank;
        }
    }
    let mut reject = vec![false; m];
    for &idx in order.iter().take(cutoff) {
        reject[idx] = true;
    }

    // Adjusted p: running minimum of p_(i) * m / i from the largest rank
    // down. The max with the raw value guards the q >= p invariant against
    // rounding when m/i is close to 1.
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank0 in (0..m).rev() {
        let idx = order[rank0];
        let rank = rank0 + 1;
        let q = f64::min(pvals[idx] * m as f64 / rank as f64, 1.0);
        running = f64::min(running, q);
        adjusted[idx] = f64::max(running, pvals[idx]);
    }
    Ok(BhOutcome { adjusted, reject })
}

/// Clinical category of a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    AdRelated,
    SexRelated,
    Genetic,
    Comorbidity,
    Aging,
    NonSpecific,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::AdRelated => "AD-related",
            Category::SexRelated => "sex-related",
            Category::Genetic => "genetic",
            Category::Comorbidity => "comorbidity",
            Category::Aging => "aging",
            Category::NonSpecific => "non-specific",
        }
    }
}

/// One non-age variable entering category assignment, in fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationVariable {
    pub name: String,
    pub category: Category,
    pub values: Vec<f64>,
}

/// The 3 + M primary variables in the fixed tie-break order: diagnosis, sex,
/// APOE4, then comorbidities in declared order.
pub fn primary_variables(table: &CovariateTable) -> Vec<AnnotationVariable> {
    let mut vars = Vec::with_capacity(3 + table.comorbidities().len());
    vars.push(AnnotationVariable {
        name: "diagnosis".to_string(),
        category: Category::AdRelated,
        values: table.diagnosis_ordinal(),
    });
    vars.push(AnnotationVariable {
        name: "sex".to_string(),
        category: Category::SexRelated,
        values: table.sex().iter().map(|&v| f64::from(v)).collect(),
    });
    vars.push(AnnotationVariable {
        name: "apoe4".to_string(),
        category: Category::Genetic,
        values: table.apoe4().iter().map(|&v| f64::from(v)).collect(),
    });
    for (name, col) in table.comorbidities() {
        vars.push(AnnotationVariable {
            name: format!("cm_{name}"),
            category: Category::Comorbidity,
            values: col.iter().map(|&v| f64::from(v)).collect(),
        });
    }
    vars
}

/// Association of one feature with one variable. `rho = None` marks a
/// degenerate cell (zero variance or age-deterministic input), excluded from
/// FDR and from candidacy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableAssoc {
    pub variable: String,
    pub rho: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAnnotation {
    pub feature: usize,
    pub age_rho: Option<f64>,
    pub age_p_raw: Option<f64>,
    pub age_p_adjusted: Option<f64>,
    pub age_significant: bool,
    pub assocs: Vec<VariableAssoc>,
    pub category: Category,
    pub winning_variable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTable {
    pub alpha: f64,
    pub n_rows: usize,
    pub variable_names: Vec<String>,
    pub features: Vec<FeatureAnnotation>,
}

impl AnnotationTable {
    pub fn category_counts(&self) -> Vec<(Category, usize)> {
        let cats = [
            Category::AdRelated,
            Category::SexRelated,
            Category::Genetic,
            Category::Comorbidity,
            Category::Aging,
            Category::NonSpecific,
        ];
        cats.iter()
            .map(|&c| (c, self.features.iter().filter(|f| f.category == c).count()))
            .collect()
    }

    pub fn features_in_category(&self, category: Category) -> Vec<usize> {
        self.features
            .iter()
            .filter(|f| f.category == category)
            .map(|f| f.feature)
            .collect()
    }

    pub fn annotation(&self, feature: usize) -> Option<&FeatureAnnotation> {
        self.features.iter().find(|f| f.feature == feature)
    }
}

/// Argmax of |rho| over significant variables; ties break by smaller adjusted
/// p, then by the fixed variable order. Falls back to aging, then
/// non-specific.
pub fn assign_category(
    assocs: &[VariableAssoc],
    variables: &[AnnotationVariable],
    age_significant: bool,
) -> (Category, Option<String>) {
    let mut best: Option<(usize, f64, f64)> = None; // (var index, |rho|, p_adj)
    for (v, assoc) in assocs.iter().enumerate() {
        if !assoc.significant {
            continue;
        }
        let (Some(rho), Some(p_adj)) = (assoc.rho, assoc.p_adjusted) else {
            continue;
        };
        let a = libm::fabs(rho);
        let replace = match best {
            None => true,
            Some((_, best_a, best_p)) => a > best_a || (a == best_a && p_adj < best_p),
        };
        if replace {
            best = Some((v, a, p_adj));
        }
    }
    match best {
        Some((v, _, _)) => (variables[v].category, Some(variables[v].name.clone())),
        None if age_significant => (Category::Aging, None),
        None => (Category::NonSpecific, None),
    }
}

/// Annotate explicit feature columns (N x F) with ids `feature_ids`.
///
/// This is the engine behind [`annotate_all`]; it is also used directly when
/// the activation matrix is already at hand (replication, tests).
pub fn annotate_features(
    features: &Matrix,
    feature_ids: &[usize],
    age: &[f64],
    variables: &[AnnotationVariable],
    alpha: f64,
) -> Result<AnnotationTable, StatsError> {
    let n = features.rows();
    if feature_ids.len() != features.cols() {
        return Err(StatsError::LengthMismatch {
            left: feature_ids.len(),
            right: features.cols(),
        });
    }
    if age.len() != n {
        return Err(StatsError::LengthMismatch {
            left: age.len(),
            right: n,
        });
    }
    for v in variables {
        if v.values.len() != n {
            return Err(StatsError::Misaligned {
                detail: format!("variable {:?} has {} rows, data has {n}", v.name, v.values.len()),
            });
        }
    }

    let n_feat = features.cols();
    let col = |j: usize| -> Vec<f64> { (0..n).map(|r| features.get(r, j)).collect() };

    // Raw age correlations, FDR-corrected separately over features.
    let mut age_rho: Vec<Option<f64>> = Vec::with_capacity(n_feat);
    let mut age_p: Vec<Option<f64>> = Vec::with_capacity(n_feat);
    for j in 0..n_feat {
        let f = col(j);
        match spearman(&f, age) {
            Ok(r) => {
                age_rho.push(Some(r));
                age_p.push(Some(pvalue_corr(r, n)?));
            }
            Err(_) => {
                age_rho.push(None);
                age_p.push(None);
            }
        }
    }
    let defined_age: Vec<f64> = age_p.iter().flatten().copied().collect();
    let age_bh = bh_fdr(&defined_age, alpha)?;
    let mut age_adj: Vec<Option<f64>> = vec![None; n_feat];
    let mut age_sig: Vec<bool> = vec![false; n_feat];
    let mut cursor = 0usize;
    for j in 0..n_feat {
        if age_p[j].is_some() {
            age_adj[j] = Some(age_bh.adjusted[cursor]);
            age_sig[j] = age_bh.reject[cursor];
            cursor += 1;
        }
    }

    // Partial correlations; flat FDR over defined cells of the full matrix.
    let mut rho_cells: Vec<Vec<Option<f64>>> = Vec::with_capacity(n_feat);
    let mut p_cells: Vec<Vec<Option<f64>>> = Vec::with_capacity(n_feat);
    let mut flat_p: Vec<f64> = Vec::new();
    for j in 0..n_feat {
        let f = col(j);
        let mut rho_row = Vec::with_capacity(variables.len());
        let mut p_row = Vec::with_capacity(variables.len());
        for v in variables {
            match partial_spearman_age(&f, &v.values, age) {
                Ok(rho) => {
                    let p = pvalue_partial(rho, n)?;
                    rho_row.push(Some(rho));
                    p_row.push(Some(p));
                    flat_p.push(p);
                }
                Err(
                    StatsError::ZeroVariance | StatsError::DegenerateDenominator,
                ) => {
                    rho_row.push(None);
                    p_row.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        rho_cells.push(rho_row);
        p_cells.push(p_row);
    }
    let bh = bh_fdr(&flat_p, alpha)?;

    let mut features_out = Vec::with_capacity(n_feat);
    let mut cursor = 0usize;
    for j in 0..n_feat {
        let mut assocs = Vec::with_capacity(variables.len());
        for (v, variable) in variables.iter().enumerate() {
            let (rho, p_raw) = (rho_cells[j][v], p_cells[j][v]);
            let (p_adjusted, significant) = if p_raw.is_some() {
                let out = (Some(bh.adjusted[cursor]), bh.reject[cursor]);
                cursor += 1;
                out
            } else {
                (None, false)
            };
            assocs.push(VariableAssoc {
                variable: variable.name.clone(),
                rho,
                p_raw,
                p_adjusted,
                significant,
            });
        }
        let (category, winning_variable) = assign_category(&assocs, variables, age_sig[j]);
        features_out.push(FeatureAnnotation {
            feature: feature_ids[j],
            age_rho: age_rho[j],
            age_p_raw: age_p[j],
            age_p_adjusted: age_adj[j],
            age_significant: age_sig[j],
            assocs,
            category,
            winning_variable,
        });
    }

    Ok(AnnotationTable {
        alpha,
        n_rows: n,
        variable_names: variables.iter().map(|v| v.name.clone()).collect(),
        features: features_out,
    })
}

/// Full annotation pipeline: census alive features on this data, gather
/// their activation columns, and annotate against the table's primary
/// variables.
pub fn annotate_all(
    model: &TrainedSae,
    emb: &EmbeddingMatrix,
    table: &CovariateTable,
    alpha: f64,
) -> Result<AnnotationTable, StatsError> {
    table.check_aligned(emb).map_err(|e| StatsError::Misaligned {
        detail: e.to_string(),
    })?;
    let alive = alive_census(model, emb.values());
    let variables = primary_variables(table);
    if alive.is_empty() {
        return Ok(AnnotationTable {
            alpha,
            n_rows: emb.n(),
            variable_names: variables.iter().map(|v| v.name.clone()).collect(),
            features: vec![],
        });
    }
    let z = model.activations(emb.values());
    let cols = Matrix::from_fn(emb.n(), alive.len(), |r, c| z.get(r, alive[c]));
    annotate_features(&cols, &alive, table.age(), &variables, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentCell {
    pub feature: usize,
    pub rho: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentColumn {
    pub variable: String,
    pub n_significant: usize,
    pub cells: Vec<EnrichmentCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentReport {
    pub alpha: f64,
    pub columns: Vec<EnrichmentColumn>,
    /// Zero-variance secondary columns, skipped with a warning.
    pub skipped: Vec<String>,
}

/// Spearman enrichment of alive features against secondary variables, with
/// BH-FDR applied within each variable's column. Reporting only; never feeds
/// category assignment.
pub fn enrichment_test(
    annotations: &AnnotationTable,
    activations: &Matrix,
    secondary: &[(String, Vec<f64>)],
    alpha: f64,
) -> Result<EnrichmentReport, StatsError> {
    let n = activations.rows();
    if n != annotations.n_rows {
        return Err(StatsError::Misaligned {
            detail: format!("{} activation rows vs {} annotated rows", n, annotations.n_rows),
        });
    }
    let feature_ids: Vec<usize> = annotations.features.iter().map(|f| f.feature).collect();
    let mut columns = Vec::new();
    let mut skipped = Vec::new();
    for (name, values) in secondary {
        if values.len() != n {
            return Err(StatsError::Misaligned {
                detail: format!("secondary {:?} has {} rows, data has {n}", name, values.len()),
            });
        }
        let variance_zero = values.iter().all(|&v| v == values[0]);
        if variance_zero {
            skipped.push(name.clone());
            continue;
        }
        let mut rhos: Vec<Option<f64>> = Vec::with_capacity(feature_ids.len());
        let mut ps: Vec<f64> = Vec::new();
        for &j in &feature_ids {
            let f: Vec<f64> = (0..n).map(|r| activations.get(r, j)).collect();
            match spearman(&f, values) {
                Ok(r) => {
                    rhos.push(Some(r));
                    ps.push(pvalue_corr(r, n)?);
                }
                Err(_) => rhos.push(None),
            }
        }
        let bh = bh_fdr(&ps, alpha)?;
        let mut cells = Vec::with_capacity(feature_ids.len());
        let mut cursor = 0usize;
        let mut n_significant = 0usize;
        for (i, &feature) in feature_ids.iter().enumerate() {
            match rhos[i] {
                Some(rho) => {
                    let significant = bh.reject[cursor];
                    if significant {
                        n_significant += 1;
                    }
                    cells.push(EnrichmentCell {
                        feature,
                        rho: Some(rho),
                        p_raw: Some(ps[cursor]),
                        p_adjusted: Some(bh.adjusted[cursor]),
                        significant,
                    });
                    cursor += 1;
                }
                None => cells.push(EnrichmentCell {
                    feature,
                    rho: None,
                    p_raw: None,
                    p_adjusted: None,
                    significant: false,
                }),
            }
        }
        columns.push(EnrichmentColumn {
            variable: name.clone(),
            n_significant,
            cells,
        });
    }
    Ok(EnrichmentReport {
        alpha,
        columns,
        skipped,
    })
}
