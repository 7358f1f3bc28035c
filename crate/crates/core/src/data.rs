//! Cohort data model: embedding matrices, clinical covariates, and the
//! synthetic cohort generator used for ground-truth verification.
//!
//! The generator plants latent factors with known covariate meanings in a
//! known dictionary, builds covariates along a small confound graph (always
//! including an age -> diagnosis edge in the defaults), and emits embeddings
//! as `dictionary * factors^T + noise`. Everything is a pure function of the
//! spec, seed included.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::matrix::{dot, Matrix};
use crate::rng::{sub_seed, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    NonFinite { row: usize, col: usize },
    TooFewRows { n: usize },
    EmptyDims,
    IdCountMismatch { ids: usize, rows: usize },
    DuplicateSampleId { id: String },
    AgeNotPositive { row: usize },
    ConverterOnNonMci { row: usize },
    ColumnLengthMismatch { name: String },
    MissingVisitOrder,
    Misaligned { detail: String },
    InvalidSpec { detail: String },
    CyclicConfounds { remaining: Vec<String> },
    DependentLoadings { factor: usize },
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::NonFinite { row, col } => {
                write!(f, "non-finite embedding entry at row {row}, column {col}")
            }
            DataError::TooFewRows { n } => write!(f, "need at least 2 rows, got {n}"),
            DataError::EmptyDims => write!(f, "embedding dimension must be at least 1"),
            DataError::IdCountMismatch { ids, rows } => {
                write!(f, "{ids} sample ids for {rows} rows")
            }
            DataError::DuplicateSampleId { id } => write!(f, "duplicate sample id {id:?}"),
            DataError::AgeNotPositive { row } => write!(f, "age must be positive at row {row}"),
            DataError::ConverterOnNonMci { row } => {
                write!(f, "converter label on a non-MCI row {row}")
            }
            DataError::ColumnLengthMismatch { name } => {
                write!(f, "column {name:?} length does not match table")
            }
            DataError::MissingVisitOrder => write!(f, "table has no visit-order column"),
            DataError::Misaligned { detail } => write!(f, "covariates misaligned: {detail}"),
            DataError::InvalidSpec { detail } => write!(f, "invalid synthetic spec: {detail}"),
            DataError::CyclicConfounds { remaining } => {
                write!(f, "confound graph has a cycle involving {remaining:?}")
            }
            DataError::DependentLoadings { factor } => {
                write!(f, "factor loading {factor} is linearly dependent on earlier factors")
            }
        }
    }
}

impl core::error::Error for DataError {}

/// Frozen per-sample representations plus aligned sample identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Matrix,
    sample_ids: Vec<String>,
    layer_index: Option<u32>,
}

impl EmbeddingMatrix {
    pub fn new(
        values: Matrix,
        sample_ids: Vec<String>,
        layer_index: Option<u32>,
    ) -> Result<Self, DataError> {
        if values.rows() < 2 {
            return Err(DataError::TooFewRows { n: values.rows() });
        }
        if values.cols() == 0 {
            return Err(DataError::EmptyDims);
        }
        if sample_ids.len() != values.rows() {
            return Err(DataError::IdCountMismatch {
                ids: sample_ids.len(),
                rows: values.rows(),
            });
        }
        for r in 0..values.rows() {
            for (c, v) in values.row(r).iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFinite { row: r, col: c });
                }
            }
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicateSampleId { id: id.clone() });
            }
        }
        Ok(Self {
            values,
            sample_ids,
            layer_index,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn layer_index(&self) -> Option<u32> {
        self.layer_index
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// New matrix restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, DataError> {
        let values = self.values.gather_rows(rows);
        let ids = rows.iter().map(|&r| self.sample_ids[r].clone()).collect();
        Self::new(values, ids, self.layer_index)
    }
}

/// Ordinal diagnosis: CN = 0, MCI = 1, AD = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnosis {
    Cn,
    Mci,
    Ad,
}

impl Diagnosis {
    pub fn ordinal(self) -> f64 {
        match self {
            Diagnosis::Cn => 0.0,
            Diagnosis::Mci => 1.0,
            Diagnosis::Ad => 2.0,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Diagnosis::Cn),
            1 => Some(Diagnosis::Mci),
            2 => Some(Diagnosis::Ad),
            _ => None,
        }
    }
}

/// Per-sample clinical covariates, one row per scan.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    sample_ids: Vec<String>,
    subject_ids: Vec<String>,
    age: Vec<f64>,
    sex: Vec<u8>,
    apoe4: Vec<u8>,
    diagnosis: Vec<Diagnosis>,
    /// Comorbidity columns, names stored without the `cm_` prefix.
    comorbidities: Vec<(String, Vec<u8>)>,
    converter: Vec<Option<bool>>,
    visit: Option<Vec<f64>>,
    secondary: Vec<(String, Vec<f64>)>,
}

impl CovariateTable {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sample_ids: Vec<String>,
        subject_ids: Vec<String>,
        age: Vec<f64>,
        sex: Vec<u8>,
        apoe4: Vec<u8>,
        diagnosis: Vec<Diagnosis>,
        comorbidities: Vec<(String, Vec<u8>)>,
        converter: Vec<Option<bool>>,
        visit: Option<Vec<f64>>,
        secondary: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, DataError> {
        let n = sample_ids.len();
        if subject_ids.len() != n {
            return Err(DataError::ColumnLengthMismatch {
                name: "subject_id".to_string(),
            });
        }
        for (name, len) in [
            ("age", age.len()),
            ("sex", sex.len()),
            ("apoe4", apoe4.len()),
            ("diagnosis", diagnosis.len()),
            ("converter", converter.len()),
        ] {
            if len != n {
                return Err(DataError::ColumnLengthMismatch {
                    name: name.to_string(),
                });
            }
        }
        if let Some(v) = &visit {
            if v.len() != n {
                return Err(DataError::ColumnLengthMismatch {
                    name: "visit".to_string(),
                });
            }
        }
        for (name, col) in &comorbidities {
            if col.len() != n {
                return Err(DataError::ColumnLengthMismatch { name: name.clone() });
            }
        }
        for (name, col) in &secondary {
            if col.len() != n {
                return Err(DataError::ColumnLengthMismatch { name: name.clone() });
            }
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicateSampleId { id: id.clone() });
            }
        }
        for (row, &a) in age.iter().enumerate() {
            if !(a > 0.0) {
                return Err(DataError::AgeNotPositive { row });
            }
        }
        for (row, (c, d)) in converter.iter().zip(&diagnosis).enumerate() {
            if c.is_some() && *d != Diagnosis::Mci {
                return Err(DataError::ConverterOnNonMci { row });
            }
        }
        Ok(Self {
            sample_ids,
            subject_ids,
            age,
            sex,
            apoe4,
            diagnosis,
            comorbidities,
            converter,
            visit,
            secondary,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn age(&self) -> &[f64] {
        &self.age
    }

    pub fn sex(&self) -> &[u8] {
        &self.sex
    }

    pub fn apoe4(&self) -> &[u8] {
        &self.apoe4
    }

    pub fn diagnosis(&self) -> &[Diagnosis] {
        &self.diagnosis
    }

    pub fn diagnosis_ordinal(&self) -> Vec<f64> {
        self.diagnosis.iter().map(|d| d.ordinal()).collect()
    }

    /// Comorbidity columns with names stripped of the `cm_` prefix.
    pub fn comorbidities(&self) -> &[(String, Vec<u8>)] {
        &self.comorbidities
    }

    pub fn converter(&self) -> &[Option<bool>] {
        &self.converter
    }

    pub fn visit(&self) -> Option<&[f64]> {
        self.visit.as_deref()
    }

    pub fn secondary(&self) -> &[(String, Vec<f64>)] {
        &self.secondary
    }

    /// New table restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, DataError> {
        let pick_s = |v: &[String]| rows.iter().map(|&r| v[r].clone()).collect::<Vec<_>>();
        Self::new(
            pick_s(&self.sample_ids),
            pick_s(&self.subject_ids),
            rows.iter().map(|&r| self.age[r]).collect(),
            rows.iter().map(|&r| self.sex[r]).collect(),
            rows.iter().map(|&r| self.apoe4[r]).collect(),
            rows.iter().map(|&r| self.diagnosis[r]).collect(),
            self.comorbidities
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&r| c[r]).collect()))
                .collect(),
            rows.iter().map(|&r| self.converter[r]).collect(),
            self.visit
                .as_ref()
                .map(|v| rows.iter().map(|&r| v[r]).collect()),
            self.secondary
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&r| c[r]).collect()))
                .collect(),
        )
    }

    /// Check row-wise alignment with an embedding matrix by sample id.
    pub fn check_aligned(&self, emb: &EmbeddingMatrix) -> Result<(), DataError> {
        if self.len() != emb.n() {
            return Err(DataError::Misaligned {
                detail: format!("{} covariate rows vs {} embedding rows", self.len(), emb.n()),
            });
        }
        for (i, (a, b)) in self.sample_ids.iter().zip(emb.sample_ids()).enumerate() {
            if a != b {
                return Err(DataError::Misaligned {
                    detail: format!("row {i}: covariate id {a:?} vs embedding id {b:?}"),
                });
            }
        }
        Ok(())
    }
}

/// Warning produced when two scans share the maximal visit for a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct TieWarning {
    pub subject_id: String,
    pub kept: String,
    pub dropped: Vec<String>,
}

/// Keep the latest scan per subject (maximal visit order), filtering the
/// embedding rows consistently. Ties resolve to the lexicographically larger
/// sample id and are reported as warnings.
pub fn latest_scan_per_subject(
    table: &CovariateTable,
    emb: &EmbeddingMatrix,
) -> Result<(CovariateTable, EmbeddingMatrix, Vec<TieWarning>), DataError> {
    table.check_aligned(emb)?;
    let visit = table.visit().ok_or(DataError::MissingVisitOrder)?;

    // Group rows per subject in first-appearance order.
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, sid) in table.subject_ids().iter().enumerate() {
        let entry = groups.entry(sid.as_str()).or_default();
        if entry.is_empty() {
            order.push(sid.as_str());
        }
        entry.push(row);
    }

    let mut keep: Vec<usize> = Vec::with_capacity(order.len());
    let mut warnings = Vec::new();
    for sid in order {
        let rows = &groups[sid];
        let max_visit = rows
            .iter()
            .map(|&r| visit[r])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut at_max: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| visit[r] == max_visit)
            .collect();
        if at_max.len() > 1 {
            at_max.sort_by(|&a, &b| table.sample_ids()[a].cmp(&table.sample_ids()[b]));
            let kept = at_max[at_max.len() - 1];
            warnings.push(TieWarning {
                subject_id: sid.to_string(),
                kept: table.sample_ids()[kept].clone(),
                dropped: at_max[..at_max.len() - 1]
                    .iter()
                    .map(|&r| table.sample_ids()[r].clone())
                    .collect(),
            });
            keep.push(kept);
        } else {
            keep.push(at_max[0]);
        }
    }
    keep.sort_unstable();
    Ok((table.select_rows(&keep)?, emb.select_rows(&keep)?, warnings))
}

/// Subject-level holdout split: shuffles subjects, puts the first
/// `round(fraction * S)` into the training side, and partitions rows
/// accordingly (original row order preserved on each side).
pub fn subject_split(
    table: &CovariateTable,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidSpec {
            detail: format!("split fraction {fraction} not in (0, 1)"),
        });
    }
    let mut subjects: Vec<&str> = Vec::new();
    let mut seen = alloc::collections::BTreeSet::new();
    for sid in table.subject_ids() {
        if seen.insert(sid.as_str()) {
            subjects.push(sid.as_str());
        }
    }
    if subjects.len() < 2 {
        return Err(DataError::InvalidSpec {
            detail: "need at least 2 subjects to split".to_string(),
        });
    }
    let mut rng = Rng::new(sub_seed(seed, "split"));
    rng.shuffle(&mut subjects);
    let n_train = libm::round(fraction * subjects.len() as f64) as usize;
    let n_train = n_train.clamp(1, subjects.len() - 1);
    let train_set: alloc::collections::BTreeSet<&str> =
        subjects[..n_train].iter().copied().collect();
    let mut train_rows = Vec::new();
    let mut valid_rows = Vec::new();
    for (row, sid) in table.subject_ids().iter().enumerate() {
        if train_set.contains(sid.as_str()) {
            train_rows.push(row);
        } else {
            valid_rows.push(row);
        }
    }
    Ok((train_rows, valid_rows))
}

/// One edge of the covariate confound graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundEdge {
    pub source: String,
    pub target: String,
    pub strength: f64,
}

/// Specification of a synthetic cohort with planted ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    /// Inclusive range of scans per subject.
    pub scans_min: usize,
    pub scans_max: usize,
    pub d: usize,
    pub n_factors: usize,
    /// One meaning per factor: "age", "diagnosis", "sex", "apoe4", "cm_<name>",
    /// "noise" (subject-level latent, smooth on the manifold), "nuisance"
    /// (scan-level variation, rough between neighbors), or "cone" (a
    /// two-shell radial latent `+/-(1 + 0.3|N(0,1)|)`, giving the cloud the
    /// anisotropic dominant-direction shape of deep-layer representations).
    /// The "diagnosis" factor is the age-independent disease driver.
    pub factor_meanings: Vec<String>,
    /// Explicit loading vectors (one d-vector per factor); random orthonormal
    /// columns when absent.
    #[serde(default)]
    pub factor_loadings: Option<Vec<Vec<f64>>>,
    /// Per-factor value scale (signal strength spectrum); all 1.0 when
    /// absent.
    #[serde(default)]
    pub factor_scales: Option<Vec<f64>>,
    pub confound_graph: Vec<ConfoundEdge>,
    pub noise_sigma: f64,
    /// Per-scan factor wobble (multi-scan subjects drift slightly).
    #[serde(default = "default_scan_jitter")]
    pub scan_jitter: f64,
    /// Subject-level noise decoupling covariate-tied factors from their
    /// covariate, so no factor is a deterministic function of it.
    #[serde(default = "default_factor_jitter")]
    pub factor_jitter: f64,
    /// Noise scale of the latent diagnosis risk (softens the ordinal
    /// thresholding).
    #[serde(default = "default_diagnosis_noise")]
    pub diagnosis_noise: f64,
    /// When > 0, "noise" factors take cluster-level values: subjects are
    /// assigned to this many clusters and all subjects in a cluster share
    /// one latent draw per noise factor. Models population substructure
    /// (acquisition batches, recruitment waves) that is locally constant on
    /// the manifold. 0 keeps per-subject latents.
    #[serde(default)]
    pub noise_clusters: usize,
    /// Count of independent noise secondary columns.
    #[serde(default)]
    pub n_secondary_noise: usize,
    /// Emit a `sec_med_proxy` secondary column correlated with the disease
    /// factor (a medication-use stand-in for enrichment tests).
    #[serde(default)]
    pub med_proxy: bool,
    pub seed: u64,
}

fn default_scan_jitter() -> f64 {
    0.15
}

fn default_factor_jitter() -> f64 {
    0.3
}

fn default_diagnosis_noise() -> f64 {
    0.5
}

impl SyntheticSpec {
    /// Reference cohort: six covariate-tied factors, a block of cluster-level
    /// latents (population substructure, locally constant on the manifold),
    /// scan-level nuisance factors, an age -> diagnosis confound, converter
    /// labels driven by the age-independent disease factor, and two
    /// comorbidities.
    pub fn reference(seed: u64) -> Self {
        let mut factor_meanings = vec![
            "age".to_string(),
            "diagnosis".to_string(),
            "sex".to_string(),
            "apoe4".to_string(),
            "cm_htn".to_string(),
            "cm_dm2".to_string(),
        ];
        let mut factor_scales = vec![1.0, 1.0, 0.9, 0.85, 0.8, 0.75];
        let mut s = 0.7;
        for _ in 0..6 {
            factor_meanings.push("noise".to_string());
            factor_scales.push(s);
            s *= 0.85;
        }
        for _ in 0..6 {
            factor_meanings.push("nuisance".to_string());
            factor_scales.push(0.5);
        }
        SyntheticSpec {
            n_subjects: 700,
            scans_min: 1,
            scans_max: 3,
            d: 64,
            n_factors: factor_meanings.len(),
            factor_meanings,
            factor_loadings: None,
            factor_scales: Some(factor_scales),
            confound_graph: vec![
                ConfoundEdge {
                    source: "age".to_string(),
                    target: "diagnosis".to_string(),
                    strength: 0.8,
                },
                ConfoundEdge {
                    source: "disease".to_string(),
                    target: "diagnosis".to_string(),
                    strength: 0.8,
                },
                ConfoundEdge {
                    source: "age".to_string(),
                    target: "cm_htn".to_string(),
                    strength: 0.3,
                },
                ConfoundEdge {
                    source: "disease".to_string(),
                    target: "converter".to_string(),
                    strength: 2.0,
                },
            ],
            noise_sigma: 0.02,
            scan_jitter: 0.08,
            factor_jitter: 0.3,
            diagnosis_noise: 0.5,
            noise_clusters: 0,
            n_secondary_noise: 4,
            med_proxy: true,
            seed,
        }
    }
}

/// Planted ground truth emitted alongside a synthetic cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// N x n_factors scan-level factor values.
    pub factor_values: Matrix,
    /// Covariate meaning per factor (parallel to dictionary columns).
    pub factor_meaning: Vec<String>,
    /// d x n_factors dictionary.
    pub true_dictionary: Matrix,
}

impl GroundTruth {
    /// Hand-built reference model whose dictionary is exactly the planted
    /// one: for each factor f, feature 2f is its positive side and feature
    /// 2f+1 its negative side (decoder columns +/- the normalized loading,
    /// tied encoder, ReLU gate). Serves as the ideal-decomposition oracle
    /// against which pipeline stages are checked.
    pub fn ideal_decomposition(&self, census_rows: &Matrix) -> crate::sae::TrainedSae {
        use crate::sae::{Activation, SaeParams, TrainConfig, TrainProvenance, TrainedSae};
        let d = self.true_dictionary.rows();
        let n_factors = self.true_dictionary.cols();
        let d_sae = 2 * n_factors;
        let mut w_dec = Matrix::zeros(d, d_sae);
        let mut w_enc = Matrix::zeros(d_sae, d);
        for f in 0..n_factors {
            let mut col: Vec<f64> = (0..d).map(|r| self.true_dictionary.get(r, f)).collect();
            let norm = libm::sqrt(dot(&col, &col));
            for v in &mut col {
                *v /= norm;
            }
            for (r, v) in col.iter().enumerate() {
                w_dec.set(r, 2 * f, *v);
                w_dec.set(r, 2 * f + 1, -v);
                w_enc.set(2 * f, r, *v);
                w_enc.set(2 * f + 1, r, -v);
            }
        }
        let params = SaeParams::new(w_enc, vec![0.0; d_sae], w_dec, vec![0.0; d])
            .expect("ideal decomposition parameters are valid");
        let config = TrainConfig {
            activation: Activation::Relu,
            expansion: 1,
            lambda: 0.0,
            k_nn: 0,
            epochs: 0,
            lr: 0.0,
            batch_size: 0,
            seed: 0,
            split_fraction: 0.9,
        };
        TrainedSae::from_parts(
            params,
            config,
            alloc::vec::Vec::new(),
            None,
            TrainProvenance {
                penalty_normalization: "mean_over_edges".into(),
                n_train_rows: 0,
                n_valid_rows: 0,
                graph_k: None,
                graph_sigma: None,
            },
            census_rows,
        )
    }

    /// Indices of the positive/negative side features for one factor in the
    /// ideal decomposition.
    pub fn ideal_feature_pair(factor: usize) -> (usize, usize) {
        (2 * factor, 2 * factor + 1)
    }
}

// Population standardization constants for generated covariates.
const AGE_MEAN: f64 = 72.0;
const AGE_SD: f64 = 8.0;
const APOE_MEAN: f64 = 0.6;
const APOE_SD: f64 = 0.6480740698407861; // sqrt(2 * 0.3 * 0.7)

// Standard-normal quantiles for a 35% CN / 53% MCI / 12% AD mix.
const DX_CN_CUT: f64 = -0.38532;
const DX_AD_CUT: f64 = 1.17499;
// 30% comorbidity prevalence.
const CM_CUT: f64 = 0.52440;

struct SubjectDraw {
    n_scans: usize,
    age: f64,
    sex: u8,
    apoe4: u8,
    disease: f64,
    cluster: usize,
    noise_latents: Vec<f64>,
    cone_latents: Vec<f64>,
    factor_offsets: Vec<f64>,
}

fn validate_spec(spec: &SyntheticSpec) -> Result<Vec<String>, DataError> {
    if spec.n_subjects < 2 {
        return Err(DataError::InvalidSpec {
            detail: "need at least 2 subjects".to_string(),
        });
    }
    if spec.scans_min == 0 || spec.scans_min > spec.scans_max {
        return Err(DataError::InvalidSpec {
            detail: format!("bad scans range {}..={}", spec.scans_min, spec.scans_max),
        });
    }
    if spec.d == 0 || spec.n_factors == 0 {
        return Err(DataError::InvalidSpec {
            detail: "d and n_factors must be positive".to_string(),
        });
    }
    if spec.n_factors > spec.d {
        return Err(DataError::InvalidSpec {
            detail: format!("{} factors cannot be independent in d={}", spec.n_factors, spec.d),
        });
    }
    if spec.factor_meanings.len() != spec.n_factors {
        return Err(DataError::InvalidSpec {
            detail: format!(
                "{} factor meanings for {} factors",
                spec.factor_meanings.len(),
                spec.n_factors
            ),
        });
    }
    for m in &spec.factor_meanings {
        let ok = matches!(
            m.as_str(),
            "age" | "diagnosis" | "sex" | "apoe4" | "noise" | "nuisance" | "cone"
        ) || m.starts_with("cm_");
        if !ok {
            return Err(DataError::InvalidSpec {
                detail: format!("unknown factor meaning {m:?}"),
            });
        }
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(DataError::InvalidSpec {
            detail: "noise_sigma must be >= 0".to_string(),
        });
    }
    if let Some(scales) = &spec.factor_scales {
        if scales.len() != spec.n_factors {
            return Err(DataError::InvalidSpec {
                detail: format!("{} factor scales for {} factors", scales.len(), spec.n_factors),
            });
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(DataError::InvalidSpec {
                detail: "factor scales must be finite and positive".to_string(),
            });
        }
    }

    // Collect comorbidity names in declared order (meanings first, then
    // confound targets).
    let mut cm_names: Vec<String> = Vec::new();
    for m in &spec.factor_meanings {
        if let Some(name) = m.strip_prefix("cm_") {
            if !cm_names.iter().any(|n| n == name) {
                cm_names.push(name.to_string());
            }
        }
    }
    for e in &spec.confound_graph {
        if let Some(name) = e.target.strip_prefix("cm_") {
            if !cm_names.iter().any(|n| n == name) {
                cm_names.push(name.to_string());
            }
        }
    }

    // Validate graph node names.
    for e in &spec.confound_graph {
        let src_ok = matches!(e.source.as_str(), "age" | "sex" | "apoe4" | "disease")
            || e.source.starts_with("cm_");
        let tgt_ok = matches!(e.target.as_str(), "diagnosis" | "converter")
            || e.target.starts_with("cm_");
        if !src_ok || !tgt_ok {
            return Err(DataError::InvalidSpec {
                detail: format!("unsupported confound edge {} -> {}", e.source, e.target),
            });
        }
        if !e.strength.is_finite() {
            return Err(DataError::InvalidSpec {
                detail: "confound strength must be finite".to_string(),
            });
        }
    }
    Ok(cm_names)
}

/// Topological order over generated covariates (comorbidities, diagnosis,
/// converter) under the confound graph. Roots (age, sex, apoe4, disease) are
/// implicit sources.
fn topo_order(cm_names: &[String], edges: &[ConfoundEdge]) -> Result<Vec<String>, DataError> {
    let mut nodes: Vec<String> = cm_names.iter().map(|n| format!("cm_{n}")).collect();
    nodes.push("diagnosis".to_string());
    nodes.push("converter".to_string());

    let dep_edges: Vec<(&str, &str)> = edges
        .iter()
        .filter(|e| nodes.iter().any(|n| n == &e.source))
        .map(|e| (e.source.as_str(), e.target.as_str()))
        .collect();

    let mut order = Vec::new();
    let mut placed = alloc::collections::BTreeSet::new();
    let mut remaining: Vec<&String> = nodes.iter().collect();
    while !remaining.is_empty() {
        let before = order.len();
        remaining.retain(|node| {
            let ready = dep_edges
                .iter()
                .filter(|(_, t)| t == &node.as_str())
                .all(|(s, _)| placed.contains(*s));
            if ready {
                order.push((*node).clone());
                placed.insert(node.as_str());
                false
            } else {
                true
            }
        });
        if order.len() == before {
            return Err(DataError::CyclicConfounds {
                remaining: remaining.iter().map(|s| (*s).clone()).collect(),
            });
        }
    }
    Ok(order)
}

/// Orthonormal dictionary columns via modified Gram-Schmidt.
fn random_dictionary(d: usize, n_factors: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_factors);
    while cols.len() < n_factors {
        let mut v = rng.normal_vec(d);
        for c in &cols {
            let p = dot(&v, c);
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= p * ci;
            }
        }
        let norm = libm::sqrt(dot(&v, &v));
        if norm < 1e-8 {
            continue; // essentially impossible; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    Matrix::from_fn(d, n_factors, |r, c| cols[c][r])
}

/// Validate explicit loadings for linear independence (Gram-Schmidt residual).
fn dictionary_from_loadings(d: usize, loadings: &[Vec<f64>]) -> Result<Matrix, DataError> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (f, load) in loadings.iter().enumerate() {
        if load.len() != d {
            return Err(DataError::InvalidSpec {
                detail: format!("loading {f} has length {}, expected {d}", load.len()),
            });
        }
        let orig = libm::sqrt(dot(load, load));
        let mut v = load.clone();
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let res = libm::sqrt(dot(&v, &v));
        if orig == 0.0 || res < 1e-8 * orig {
            return Err(DataError::DependentLoadings { factor: f });
        }
        for vi in &mut v {
            *vi /= res;
        }
        basis.push(v);
    }
    Ok(Matrix::from_fn(d, loadings.len(), |r, c| loadings[c][r]))
}

fn root_value(name: &str, subj: &SubjectDraw, cm: &BTreeMap<String, u8>) -> f64 {
    match name {
        "age" => (subj.age - AGE_MEAN) / AGE_SD,
        "sex" => 2.0 * f64::from(subj.sex) - 1.0,
        "apoe4" => (f64::from(subj.apoe4) - APOE_MEAN) / APOE_SD,
        "disease" => subj.disease,
        other => {
            let key = other.strip_prefix("cm_").unwrap_or(other);
            2.0 * f64::from(cm[key]) - 1.0
        }
    }
}

/// Generate a synthetic cohort with planted ground truth. Deterministic in
/// the spec (seed included).
pub fn generate_synthetic_cohort(
    spec: &SyntheticSpec,
) -> Result<(EmbeddingMatrix, CovariateTable, GroundTruth), DataError> {
    let dictionary = match &spec.factor_loadings {
        Some(loads) => {
            if loads.len() != spec.n_factors {
                return Err(DataError::InvalidSpec {
                    detail: format!(
                        "{} explicit loadings for {} factors",
                        loads.len(),
                        spec.n_factors
                    ),
                });
            }
            dictionary_from_loadings(spec.d, loads)?
        }
        None => {
            let mut dict_rng = Rng::new(sub_seed(spec.seed, "dictionary"));
            random_dictionary(spec.d, spec.n_factors, &mut dict_rng)
        }
    };
    generate_with_dictionary(spec, dictionary)
}

/// Generate a cohort that reuses an existing planted dictionary (and its
/// factor meanings): two cohorts from one ground truth differ only in seed.
pub fn generate_cohort_from_ground_truth(
    spec: &SyntheticSpec,
    gt: &GroundTruth,
) -> Result<(EmbeddingMatrix, CovariateTable, GroundTruth), DataError> {
    if gt.true_dictionary.rows() != spec.d || gt.true_dictionary.cols() != spec.n_factors {
        return Err(DataError::InvalidSpec {
            detail: format!(
                "ground-truth dictionary is {}x{}, spec wants {}x{}",
                gt.true_dictionary.rows(),
                gt.true_dictionary.cols(),
                spec.d,
                spec.n_factors
            ),
        });
    }
    if gt.factor_meaning != spec.factor_meanings {
        return Err(DataError::InvalidSpec {
            detail: "factor meanings differ from ground truth".to_string(),
        });
    }
    generate_with_dictionary(spec, gt.true_dictionary.clone())
}

fn generate_with_dictionary(
    spec: &SyntheticSpec,
    dictionary: Matrix,
) -> Result<(EmbeddingMatrix, CovariateTable, GroundTruth), DataError> {
    let cm_names = validate_spec(spec)?;
    let order = topo_order(&cm_names, &spec.confound_graph)?;

    let mut subj_rng = Rng::new(sub_seed(spec.seed, "subjects"));
    let mut cov_rng = Rng::new(sub_seed(spec.seed, "covariates"));
    let mut jitter_rng = Rng::new(sub_seed(spec.seed, "scan-jitter"));
    let mut nuisance_rng = Rng::new(sub_seed(spec.seed, "nuisance"));
    let mut noise_rng = Rng::new(sub_seed(spec.seed, "noise"));
    let mut sec_rng = Rng::new(sub_seed(spec.seed, "secondary"));

    let n_noise_factors = spec
        .factor_meanings
        .iter()
        .filter(|m| m.as_str() == "noise")
        .count();
    let n_cone_factors = spec
        .factor_meanings
        .iter()
        .filter(|m| m.as_str() == "cone")
        .count();

    // Cluster-level latents for the noise factors, when enabled.
    let cluster_latents: Option<Vec<Vec<f64>>> = if spec.noise_clusters > 0 {
        let mut cluster_rng = Rng::new(sub_seed(spec.seed, "clusters"));
        Some(
            (0..spec.noise_clusters)
                .map(|_| cluster_rng.normal_vec(n_noise_factors))
                .collect(),
        )
    } else {
        None
    };

    // Subject-level draws, fixed consumption order per subject.
    let mut subjects: Vec<SubjectDraw> = Vec::with_capacity(spec.n_subjects);
    for _ in 0..spec.n_subjects {
        let span = spec.scans_max - spec.scans_min + 1;
        let n_scans = spec.scans_min + if span > 1 { subj_rng.below(span) } else { 0 };
        let age = f64::max(AGE_MEAN + AGE_SD * subj_rng.normal(), 40.0);
        let sex = u8::from(subj_rng.coin(0.5));
        let apoe4 = u8::from(subj_rng.coin(0.3)) + u8::from(subj_rng.coin(0.3));
        let disease = subj_rng.normal();
        let cluster = if spec.noise_clusters > 0 {
            subj_rng.below(spec.noise_clusters)
        } else {
            0
        };
        let noise_latents = match &cluster_latents {
            Some(latents) => latents[cluster].clone(),
            None => subj_rng.normal_vec(n_noise_factors),
        };
        let cone_latents: Vec<f64> = (0..n_cone_factors)
            .map(|_| {
                let shell = if subj_rng.coin(0.5) { 1.0 } else { -1.0 };
                shell * (1.0 + 0.3 * libm::fabs(subj_rng.normal()))
            })
            .collect();
        let factor_offsets = subj_rng.normal_vec(spec.n_factors);
        subjects.push(SubjectDraw {
            n_scans,
            age,
            sex,
            apoe4,
            disease,
            cluster,
            noise_latents,
            cone_latents,
            factor_offsets,
        });
    }

    // Derived covariates per subject, in topological order. The converter
    // latent is drawn for every subject so stream positions do not depend on
    // diagnosis outcomes.
    let mut cm_values: Vec<BTreeMap<String, u8>> = Vec::with_capacity(spec.n_subjects);
    let mut diagnosis_s: Vec<Diagnosis> = Vec::with_capacity(spec.n_subjects);
    let mut converter_s: Vec<bool> = Vec::with_capacity(spec.n_subjects);
    for subj in &subjects {
        let mut cm: BTreeMap<String, u8> = BTreeMap::new();
        let mut dx = Diagnosis::Cn;
        let mut conv = false;
        for node in &order {
            let incoming: Vec<&ConfoundEdge> = spec
                .confound_graph
                .iter()
                .filter(|e| &e.target == node)
                .collect();
            let mut signal = 0.0;
            let mut var = 0.0;
            for e in &incoming {
                signal += e.strength * root_value(&e.source, subj, &cm);
                var += e.strength * e.strength;
            }
            match node.as_str() {
                "diagnosis" => {
                    let noise = spec.diagnosis_noise;
                    let sd = libm::sqrt(var + noise * noise);
                    let risk = signal + noise * cov_rng.normal();
                    dx = if risk < DX_CN_CUT * sd {
                        Diagnosis::Cn
                    } else if risk > DX_AD_CUT * sd {
                        Diagnosis::Ad
                    } else {
                        Diagnosis::Mci
                    };
                }
                "converter" => {
                    let sd = libm::sqrt(var + 0.6 * 0.6);
                    let risk = signal + 0.6 * cov_rng.normal();
                    conv = risk > 0.25 * sd;
                }
                cm_node => {
                    let name = cm_node.strip_prefix("cm_").expect("cm node");
                    let sd = libm::sqrt(var + 1.0);
                    let risk = signal + cov_rng.normal();
                    cm.insert(name.to_string(), u8::from(risk > CM_CUT * sd));
                }
            }
        }
        cm_values.push(cm);
        diagnosis_s.push(dx);
        converter_s.push(conv);
    }

    // Scan-level rows.
    let n_rows: usize = subjects.iter().map(|s| s.n_scans).sum();
    let mut sample_ids = Vec::with_capacity(n_rows);
    let mut subject_ids = Vec::with_capacity(n_rows);
    let mut age = Vec::with_capacity(n_rows);
    let mut sex = Vec::with_capacity(n_rows);
    let mut apoe4 = Vec::with_capacity(n_rows);
    let mut diagnosis = Vec::with_capacity(n_rows);
    let mut converter = Vec::with_capacity(n_rows);
    let mut visit = Vec::with_capacity(n_rows);
    let mut cm_cols: Vec<(String, Vec<u8>)> = cm_names
        .iter()
        .map(|n| (n.clone(), Vec::with_capacity(n_rows)))
        .collect();
    let mut factor_values = Matrix::zeros(n_rows, spec.n_factors);

    let mut row = 0usize;
    for (s, subj) in subjects.iter().enumerate() {
        let mut noise_idx = 0usize;
        let mut cone_idx = 0usize;
        // Subject-level factor bases (before per-scan wobble).
        let mut bases = Vec::with_capacity(spec.n_factors);
        for (f, meaning) in spec.factor_meanings.iter().enumerate() {
            let base = match meaning.as_str() {
                "noise" => {
                    let v = subj.noise_latents[noise_idx];
                    noise_idx += 1;
                    v
                }
                "cone" => {
                    let v = subj.cone_latents[cone_idx];
                    cone_idx += 1;
                    v
                }
                // Filled per scan: age drifts with visit, nuisance is pure
                // scan-level variation.
                "age" | "nuisance" => f64::NAN,
                // The "diagnosis" factor is the age-independent disease
                // driver behind the ordinal diagnosis, not the ordinal itself.
                "diagnosis" => subj.disease + spec.factor_jitter * subj.factor_offsets[f],
                other => {
                    root_value(other, subj, &cm_values[s])
                        + spec.factor_jitter * subj.factor_offsets[f]
                }
            };
            bases.push(base);
        }
        for v in 1..=subj.n_scans {
            let age_row = subj.age + 0.4 * (v as f64 - 1.0);
            sample_ids.push(format!("sub{s:04}_v{v:02}"));
            subject_ids.push(format!("sub{s:04}"));
            age.push(age_row);
            sex.push(subj.sex);
            apoe4.push(subj.apoe4);
            diagnosis.push(diagnosis_s[s]);
            converter.push(if diagnosis_s[s] == Diagnosis::Mci {
                Some(converter_s[s])
            } else {
                None
            });
            visit.push(v as f64);
            for (name, col) in &mut cm_cols {
                col.push(cm_values[s][name.as_str()]);
            }
            for (f, meaning) in spec.factor_meanings.iter().enumerate() {
                let value = match meaning.as_str() {
                    "age" => {
                        (age_row - AGE_MEAN) / AGE_SD
                            + spec.factor_jitter * subj.factor_offsets[f]
                            + spec.scan_jitter * jitter_rng.normal()
                    }
                    "nuisance" => nuisance_rng.normal(),
                    _ => bases[f] + spec.scan_jitter * jitter_rng.normal(),
                };
                let scale = spec.factor_scales.as_ref().map_or(1.0, |s| s[f]);
                factor_values.set(row, f, scale * value);
            }
            row += 1;
        }
    }
    debug_assert_eq!(row, n_rows);

    // Embeddings = dictionary * factors^T + noise, row by row.
    let mut values = Matrix::zeros(n_rows, spec.d);
    for r in 0..n_rows {
        let fv = factor_values.row(r).to_owned();
        let out = values.row_mut(r);
        for (c, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (f, fval) in fv.iter().enumerate() {
                acc += dictionary.get(c, f) * fval;
            }
            if spec.noise_sigma > 0.0 {
                acc += spec.noise_sigma * noise_rng.normal();
            }
            *slot = acc;
        }
    }

    // Secondary columns.
    let mut secondary: Vec<(String, Vec<f64>)> = Vec::new();
    if spec.noise_clusters > 0 {
        let mut col = Vec::with_capacity(n_rows);
        for subj in &subjects {
            for _ in 0..subj.n_scans {
                col.push(subj.cluster as f64);
            }
        }
        secondary.push(("sec_cluster".to_string(), col));
    }
    if spec.med_proxy {
        let mut col = Vec::with_capacity(n_rows);
        let mut r = 0usize;
        for (s, subj) in subjects.iter().enumerate() {
            let _ = s;
            for _ in 0..subj.n_scans {
                let latent = subj.disease + 0.5 * sec_rng.normal();
                col.push(f64::from(u8::from(latent > 0.3)));
                r += 1;
            }
        }
        debug_assert_eq!(r, n_rows);
        secondary.push(("sec_med_proxy".to_string(), col));
    }
    for i in 0..spec.n_secondary_noise {
        let mut col = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            col.push(sec_rng.normal());
        }
        secondary.push((format!("sec_noise_{i:02}"), col));
    }

    let emb = EmbeddingMatrix::new(values, sample_ids.clone(), None)?;
    let table = CovariateTable::new(
        sample_ids,
        subject_ids,
        age,
        sex,
        apoe4,
        diagnosis,
        cm_cols,
        converter,
        Some(visit),
        secondary,
    )?;
    let gt = GroundTruth {
        factor_values,
        factor_meaning: spec.factor_meanings.clone(),
        true_dictionary: dictionary,
    };
    Ok((emb, table, gt))
}
