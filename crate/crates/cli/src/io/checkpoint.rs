//! Model checkpoint: magic + version, a length-prefixed JSON preamble
//! (config, provenance, loss history, explained variance, alive features,
//! dimensions), then raw little-endian f64 parameter blocks in declared
//! order: W_enc row-major, b_enc, W_dec column-major, b_pre.

use std::path::Path;

use msae_core::sae::{EpochLoss, SaeParams, TrainConfig, TrainProvenance, TrainedSae};
use msae_core::Matrix;
use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::error::CliError;
use crate::provenance::Provenance;

const MAGIC: &[u8; 4] = b"MSAE";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Preamble {
    provenance: Provenance,
    config: TrainConfig,
    train_provenance: TrainProvenance,
    loss_history: Vec<EpochLoss>,
    explained_variance: Option<f64>,
    alive_features: Vec<usize>,
    d: usize,
    d_sae: usize,
}

pub fn write_checkpoint(
    path: &Path,
    model: &TrainedSae,
    provenance: &Provenance,
) -> Result<(), CliError> {
    let d = model.d();
    let d_sae = model.d_sae();
    let preamble = Preamble {
        provenance: provenance.clone(),
        config: model.config.clone(),
        train_provenance: model.provenance.clone(),
        loss_history: model.loss_history.clone(),
        explained_variance: model.explained_variance,
        alive_features: model.alive_features(),
        d,
        d_sae,
    };
    let preamble_json = serde_json::to_vec(&preamble).expect("preamble serializes");

    let mut bytes =
        Vec::with_capacity(16 + preamble_json.len() + (2 * d * d_sae + d + d_sae) * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(preamble_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&preamble_json);
    // W_enc row-major.
    for v in model.params.w_enc().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.params.b_enc() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    // W_dec column-major.
    for j in 0..d_sae {
        for r in 0..d {
            bytes.extend_from_slice(&model.params.w_dec().get(r, j).to_le_bytes());
        }
    }
    for v in model.params.b_pre() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainedSae, Provenance), CliError> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| CliError::validation(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let preamble_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + preamble_len {
        return Err(bad("truncated preamble"));
    }
    let preamble: Preamble = serde_json::from_slice(&bytes[16..16 + preamble_len])
        .map_err(|e| bad(&format!("bad preamble: {e}")))?;
    let d = preamble.d;
    let d_sae = preamble.d_sae;
    let n_params = 2 * d * d_sae + d + d_sae;
    let expected = 16 + preamble_len + n_params * 8;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "parameter payload holds {} values, expected {n_params}",
            (bytes.len() - 16 - preamble_len) / 8
        )));
    }
    let mut offset = 16 + preamble_len;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
        offset += 8;
        v
    };
    let mut w_enc = Vec::with_capacity(d_sae * d);
    for _ in 0..d_sae * d {
        w_enc.push(next());
    }
    let mut b_enc = Vec::with_capacity(d_sae);
    for _ in 0..d_sae {
        b_enc.push(next());
    }
    let mut w_dec = Matrix::zeros(d, d_sae);
    for j in 0..d_sae {
        for r in 0..d {
            w_dec.set(r, j, next());
        }
    }
    let mut b_pre = Vec::with_capacity(d);
    for _ in 0..d {
        b_pre.push(next());
    }
    let params = SaeParams::new(Matrix::from_vec(d_sae, d, w_enc), b_enc, w_dec, b_pre)
        .map_err(|e| bad(&e.to_string()))?;
    let mut alive_mask = vec![false; d_sae];
    for j in preamble.alive_features {
        if j >= d_sae {
            return Err(bad(&format!("alive feature {j} out of range")));
        }
        alive_mask[j] = true;
    }
    let model = TrainedSae::from_saved(
        params,
        preamble.config,
        preamble.loss_history,
        preamble.explained_variance,
        preamble.train_provenance,
        alive_mask,
    );
    Ok((model, preamble.provenance))
}
