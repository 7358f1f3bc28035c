//! Provenance blocks attached to every output file: tool version, command,
//! seed, and a digest of the experiment-relevant configuration (paths and
//! thread counts excluded, so identical experiments in different directories
//! produce identical bytes).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_digest: String,
    /// Free-form tags, e.g. "standard SAE" for a lambda = 0 training run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config_digest: String) -> Self {
        Provenance {
            tool: "msae".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_digest,
            tags: Vec::new(),
        }
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tags.push(tag.into());
        self
    }
}

/// FNV-1a over a byte stream; enough to fingerprint a config.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    format!("{:016x}", fnv64(json.as_bytes()))
}
