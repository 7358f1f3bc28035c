//! Manifold graph binary: magic, version, header {n, k, sigma}, then per
//! node k little-endian (target u32, weight f64, distance f64) triples.
//! A CSV export exists for inspection.

use std::path::Path;

use msae_core::manifold::{GraphEdge, ManifoldGraph};

use super::{fmt_f64, read_bytes, write_bytes, write_string};
use crate::error::CliError;

const MAGIC: &[u8; 4] = b"MSGR";
const VERSION: u32 = 1;

pub fn write_graph(path: &Path, graph: &ManifoldGraph) -> Result<(), CliError> {
    let mut bytes = Vec::with_capacity(4 + 4 + 8 * 3 + graph.all_edges().len() * 20);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(graph.n_nodes() as u64).to_le_bytes());
    bytes.extend_from_slice(&(graph.k() as u64).to_le_bytes());
    bytes.extend_from_slice(&graph.sigma().to_le_bytes());
    for e in graph.all_edges() {
        bytes.extend_from_slice(&e.target.to_le_bytes());
        bytes.extend_from_slice(&e.weight.to_le_bytes());
        bytes.extend_from_slice(&e.distance.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn load_graph(path: &Path) -> Result<ManifoldGraph, CliError> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| CliError::validation(format!("{}: {msg}", path.display()));
    if bytes.len() < 28 || &bytes[0..4] != MAGIC {
        return Err(bad("not a graph file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported graph version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let sigma = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let expected = 32 + n * k * 20;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "truncated: {} bytes, expected {expected} for n={n}, k={k}",
            bytes.len()
        )));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut offset = 32;
    for _ in 0..n * k {
        let target = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        let weight = f64::from_le_bytes(bytes[offset + 4..offset + 12].try_into().unwrap());
        let distance = f64::from_le_bytes(bytes[offset + 12..offset + 20].try_into().unwrap());
        edges.push(GraphEdge {
            target,
            weight,
            distance,
        });
        offset += 20;
    }
    ManifoldGraph::from_parts(n, k, sigma, edges).map_err(|e| bad(&e))
}

pub fn export_graph_csv(path: &Path, graph: &ManifoldGraph) -> Result<(), CliError> {
    let mut out = String::from("source,target,distance,weight\n");
    for i in 0..graph.n_nodes() {
        for e in graph.edges_of(i) {
            out.push_str(&format!(
                "{i},{},{},{}\n",
                e.target,
                fmt_f64(e.distance),
                fmt_f64(e.weight)
            ));
        }
    }
    write_string(path, &out)
}
