//! Embedding matrix files.
//!
//! CSV: UTF-8, comma separated, header `sample_id,e0,...`, values at 17
//! significant digits. Raw: row-major little-endian IEEE-754 f32 payload
//! with a JSON sidecar header `{n, d, layer, ids_path}` and one sample id
//! per line in the ids file.

use std::path::{Path, PathBuf};

use msae_core::data::EmbeddingMatrix;
use msae_core::Matrix;
use serde::{Deserialize, Serialize};

use super::{fmt_f64, read_bytes, read_to_string, write_bytes, write_string};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    Csv,
    RawF32,
}

impl EmbeddingFormat {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "csv" => Ok(EmbeddingFormat::Csv),
            "raw-f32" => Ok(EmbeddingFormat::RawF32),
            other => Err(CliError::validation(format!(
                "unknown embedding format {other:?} (expected csv or raw-f32)"
            ))),
        }
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingMatrix, CliError> {
    match format {
        EmbeddingFormat::Csv => load_csv(path),
        EmbeddingFormat::RawF32 => load_raw(path),
    }
}

pub fn write_embeddings(
    path: &Path,
    emb: &EmbeddingMatrix,
    format: EmbeddingFormat,
) -> Result<(), CliError> {
    match format {
        EmbeddingFormat::Csv => write_csv(path, emb),
        EmbeddingFormat::RawF32 => write_raw(path, emb),
    }
}

fn load_csv(path: &Path) -> Result<EmbeddingMatrix, CliError> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::validation(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"sample_id") {
        return Err(CliError::validation(format!(
            "{}: malformed header: first column must be sample_id, got {:?}",
            path.display(),
            cols.first().unwrap_or(&"")
        )));
    }
    let d = cols.len() - 1;
    if d == 0 {
        return Err(CliError::validation(format!(
            "{}: malformed header: no embedding columns",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(CliError::validation(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                line_no + 2,
                fields.len(),
                d + 1
            )));
        }
        ids.push(fields[0].to_string());
        for (c, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::validation(format!(
                    "{}: row {}, column e{}: cannot parse {:?} as a number",
                    path.display(),
                    line_no + 2,
                    c,
                    field
                ))
            })?;
            data.push(v);
        }
    }
    let n = ids.len();
    EmbeddingMatrix::new(Matrix::from_vec(n, d, data), ids, None).map_err(|e| match e {
        msae_core::data::DataError::NonFinite { row, col } => CliError::validation(format!(
            "{}: non-finite value at data row {}, column e{}",
            path.display(),
            row + 2,
            col
        )),
        other => CliError::validation(format!("{}: {}", path.display(), other)),
    })
}

fn write_csv(path: &Path, emb: &EmbeddingMatrix) -> Result<(), CliError> {
    let d = emb.dim();
    let mut out = String::with_capacity(emb.n() * d * 26);
    out.push_str("sample_id");
    for c in 0..d {
        out.push_str(&format!(",e{c}"));
    }
    out.push('\n');
    for (r, id) in emb.sample_ids().iter().enumerate() {
        out.push_str(id);
        for v in emb.values().row(r) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    n: usize,
    d: usize,
    layer: Option<u32>,
    ids_path: String,
}

fn sidecar_paths(payload: &Path) -> (PathBuf, PathBuf) {
    let mut header = payload.as_os_str().to_owned();
    header.push(".json");
    let mut ids = payload.as_os_str().to_owned();
    ids.push(".ids");
    (PathBuf::from(header), PathBuf::from(ids))
}

fn load_raw(path: &Path) -> Result<EmbeddingMatrix, CliError> {
    let (header_path, _) = sidecar_paths(path);
    let header: RawHeader = serde_json::from_str(&read_to_string(&header_path)?)
        .map_err(|e| CliError::validation(format!("{}: bad header: {e}", header_path.display())))?;
    let ids_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&header.ids_path);
    let ids_text = read_to_string(&ids_path)?;
    let ids: Vec<String> = ids_text.lines().map(|s| s.to_string()).collect();
    if ids.len() != header.n {
        return Err(CliError::validation(format!(
            "{}: {} ids for declared n={}",
            ids_path.display(),
            ids.len(),
            header.n
        )));
    }
    let bytes = read_bytes(path)?;
    let expected = header.n * header.d * 4;
    if bytes.len() != expected {
        return Err(CliError::validation(format!(
            "{}: payload holds {} floats but header declares {}x{} = {}",
            path.display(),
            bytes.len() / 4,
            header.n,
            header.d,
            header.n * header.d
        )));
    }
    let mut data = Vec::with_capacity(header.n * header.d);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        data.push(f64::from(v));
    }
    EmbeddingMatrix::new(
        Matrix::from_vec(header.n, header.d, data),
        ids,
        header.layer,
    )
    .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e)))
}

fn write_raw(path: &Path, emb: &EmbeddingMatrix) -> Result<(), CliError> {
    let (header_path, ids_path) = sidecar_paths(path);
    let mut bytes = Vec::with_capacity(emb.n() * emb.dim() * 4);
    for v in emb.values().data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    let ids_file_name = ids_path
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    let header = RawHeader {
        n: emb.n(),
        d: emb.dim(),
        layer: emb.layer_index(),
        ids_path: ids_file_name,
    };
    write_string(&header_path, &super::to_json_string(&header))?;
    let mut ids_text = String::new();
    for id in emb.sample_ids() {
        ids_text.push_str(id);
        ids_text.push('\n');
    }
    write_string(&ids_path, &ids_text)
}
