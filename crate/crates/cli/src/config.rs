//! TOML experiment configuration. One file drives the whole pipeline; the
//! global seed is the only randomness source, and each command derives its
//! own stream from it by fixed-label hashing. Command-line flags override
//! the seed, output directory, and thread count.

use std::path::{Path, PathBuf};

use msae_core::annotate::Category;
use msae_core::data::SyntheticSpec;
use msae_core::rng::sub_seed;
use msae_core::sae::{Activation, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io::embeddings::EmbeddingFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub synth: Option<SyntheticSpec>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub replicate: ReplicateSection,
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub embeddings: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub embeddings_format: String,
    pub cohort_b_embeddings: Option<PathBuf>,
    pub cohort_b_covariates: Option<PathBuf>,
}

fn default_format() -> String {
    "csv".to_string()
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            embeddings: None,
            covariates: None,
            embeddings_format: default_format(),
            cohort_b_embeddings: None,
            cohort_b_covariates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_topk")]
    pub topk: usize,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_k_nn")]
    pub k_nn: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
}

fn default_activation() -> String {
    "topk".into()
}
fn default_topk() -> usize {
    16
}
fn default_expansion() -> usize {
    2
}
fn default_lambda() -> f64 {
    0.1
}
fn default_k_nn() -> usize {
    15
}
fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    256
}
fn default_split() -> f64 {
    0.9
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            activation: default_activation(),
            topk: default_topk(),
            expansion: default_expansion(),
            lambda: default_lambda(),
            k_nn: default_k_nn(),
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            split_fraction: default_split(),
        }
    }
}

impl TrainSection {
    /// Resolve into the core config; the train stream derives from the
    /// master seed.
    pub fn to_core(&self, master_seed: u64) -> Result<TrainConfig, CliError> {
        let activation = match self.activation.as_str() {
            "topk" => Activation::TopK { k: self.topk },
            "relu" => Activation::Relu,
            other => {
                return Err(CliError::validation(format!(
                    "unknown activation {other:?} (expected topk or relu)"
                )))
            }
        };
        Ok(TrainConfig {
            activation,
            expansion: self.expansion,
            lambda: self.lambda,
            k_nn: self.k_nn,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: sub_seed(master_seed, "train"),
            split_fraction: self.split_fraction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Annotate on the latest scan per subject instead of all rows.
    #[serde(default)]
    pub latest_scan: bool,
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection {
            alpha: default_alpha(),
            latest_scan: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    /// Run the ablation grid in addition to the selector list.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_expansion_grid")]
    pub expansion_grid: Vec<usize>,
    #[serde(default = "default_topk_grid")]
    pub topk_grid: Vec<usize>,
    #[serde(default = "default_random_control")]
    pub random_control_draws: usize,
}

fn default_folds() -> usize {
    5
}
fn default_top_n() -> usize {
    16
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 1.0, 10.0]
}
fn default_expansion_grid() -> Vec<usize> {
    vec![4]
}
fn default_topk_grid() -> Vec<usize> {
    vec![8, 32]
}
fn default_random_control() -> usize {
    10
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            n_folds: default_folds(),
            top_n: default_top_n(),
            ablation: false,
            lambda_grid: default_lambda_grid(),
            expansion_grid: default_expansion_grid(),
            topk_grid: default_topk_grid(),
            random_control_draws: default_random_control(),
        }
    }
}

impl EvaluateSection {
    pub fn category_subsets(&self) -> Vec<Category> {
        vec![
            Category::AdRelated,
            Category::SexRelated,
            Category::Genetic,
            Category::Comorbidity,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateSection {
    #[serde(default = "default_top_n")]
    pub n_selected: usize,
}

impl Default for ReplicateSection {
    fn default() -> Self {
        ReplicateSection {
            n_selected: default_top_n(),
        }
    }
}

/// The experiment-relevant view hashed into provenance: paths, output
/// directory, and thread count excluded.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    synth: &'a Option<SyntheticSpec>,
    train: &'a TrainSection,
    annotate: &'a AnnotateSection,
    evaluate: &'a EvaluateSection,
    replicate: &'a ReplicateSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = crate::io::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_digest(&self) -> String {
        crate::provenance::digest_of(&DigestView {
            seed: self.seed,
            synth: &self.synth,
            train: &self.train,
            annotate: &self.annotate,
            evaluate: &self.evaluate,
            replicate: &self.replicate,
        })
    }

    pub fn embeddings_format(&self) -> Result<EmbeddingFormat, CliError> {
        EmbeddingFormat::parse(&self.paths.embeddings_format)
    }

    /// Default experiment: a reference synthetic cohort written to and read
    /// from `out_dir`.
    pub fn default_with(seed: u64, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            seed,
            threads: 1,
            out_dir,
            paths: PathsSection::default(),
            synth: Some(SyntheticSpec::reference(seed)),
            train: TrainSection::default(),
            annotate: AnnotateSection::default(),
            evaluate: EvaluateSection::default(),
            replicate: ReplicateSection::default(),
        }
    }

    /// Resolve the embeddings path: explicit, or the synth output location.
    pub fn embeddings_path(&self) -> PathBuf {
        self.paths
            .embeddings
            .clone()
            .unwrap_or_else(|| self.out_dir.join("embeddings.csv"))
    }

    pub fn covariates_path(&self) -> PathBuf {
        self.paths
            .covariates
            .clone()
            .unwrap_or_else(|| self.out_dir.join("covariates.csv"))
    }

    pub fn graph_path(&self) -> PathBuf {
        self.out_dir.join("graph.bin")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.msae")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_identically() {
        let config = ExperimentConfig::default_with(42, PathBuf::from("out"));
        let toml_1 = config.to_toml();
        let parsed: ExperimentConfig = toml::from_str(&toml_1).unwrap();
        assert_eq!(parsed, config);
        let toml_2 = parsed.to_toml();
        assert_eq!(toml_1, toml_2);
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let parsed: ExperimentConfig =
            toml::from_str("seed = 7\nout_dir = \"x\"\n").unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.train.epochs, 100);
        assert_eq!(parsed.annotate.alpha, 0.05);
        assert_eq!(parsed.evaluate.n_folds, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<ExperimentConfig>("seed = 7\nout_dir = \"x\"\nbogus = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let mut a = ExperimentConfig::default_with(42, PathBuf::from("out-a"));
        let b = ExperimentConfig::default_with(42, PathBuf::from("out-b"));
        a.threads = 8;
        assert_eq!(a.config_digest(), b.config_digest());
    }
}
