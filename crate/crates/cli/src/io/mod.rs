//! On-disk formats: embedding matrices (CSV and raw little-endian f32 with a
//! JSON sidecar), covariate tables, graph and model binaries, and the report
//! writers.

pub mod checkpoint;
pub mod covariates;
pub mod embeddings;
pub mod graph;
pub mod reports;

use std::fs;
use std::path::Path;

use crate::error::CliError;

pub(crate) fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_string(path: &Path, s: &str) -> Result<(), CliError> {
    write_bytes(path, s.as_bytes())
}

/// Serialize a value as pretty JSON with a trailing newline.
pub fn to_json_string<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Write `{ "provenance": ..., "data": ... }` to a JSON file.
pub fn write_json_report<T: serde::Serialize>(
    path: &Path,
    provenance: &crate::provenance::Provenance,
    data: &T,
) -> Result<(), CliError> {
    #[derive(serde::Serialize)]
    struct Wrapper<'a, T> {
        provenance: &'a crate::provenance::Provenance,
        data: &'a T,
    }
    write_string(path, &to_json_string(&Wrapper { provenance, data }))
}

/// Sidecar provenance for non-JSON outputs: `<file>.provenance.json`.
pub fn write_provenance_sidecar(
    path: &Path,
    provenance: &crate::provenance::Provenance,
) -> Result<(), CliError> {
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".provenance.json");
    write_string(Path::new(&sidecar), &to_json_string(provenance))
}

/// Format an f64 with 17 significant digits (exact round-trip).
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
