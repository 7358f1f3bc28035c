//! Error type with a stable exit-code contract: 2 for configuration and
//! validation failures, 3 for missing upstream artifacts, 4 for numerical
//! failures (divergence, non-finite results).

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io { .. } => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(path)
        } else {
            CliError::Io { path, source }
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl From<msae_core::data::DataError> for CliError {
    fn from(e: msae_core::data::DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<msae_core::manifold::GraphError> for CliError {
    fn from(e: msae_core::manifold::GraphError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<msae_core::sae::SaeError> for CliError {
    fn from(e: msae_core::sae::SaeError) -> Self {
        match e {
            msae_core::sae::SaeError::Divergence { .. } | msae_core::sae::SaeError::NonFiniteLoss => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<msae_core::annotate::StatsError> for CliError {
    fn from(e: msae_core::annotate::StatsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<msae_core::evaluate::EvalError> for CliError {
    fn from(e: msae_core::evaluate::EvalError) -> Self {
        use msae_core::evaluate::EvalError;
        match e {
            EvalError::Sae(inner) => inner.into(),
            EvalError::Unsolvable { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<msae_core::diagnostics::DiagError> for CliError {
    fn from(e: msae_core::diagnostics::DiagError) -> Self {
        CliError::Validation(e.to_string())
    }
}
