//! k-nearest-neighbor manifold graph over embedding rows.
//!
//! Each node keeps its own k out-edges (directed, no symmetrization), ranked
//! by Euclidean distance with ties broken by the smaller row index. Edge
//! weights are a Gaussian kernel `exp(-d^2 / (2 sigma^2))` with one global
//! bandwidth: the median over all N*k retained edge distances.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::EmbeddingMatrix;
use crate::matrix::{euclidean, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// k must satisfy 1 <= k <= N-1.
    KOutOfRange { k: usize, n: usize },
    /// All retained edges have zero length, so the kernel bandwidth is
    /// undefined. Carries up to three example duplicate-row pairs.
    DegenerateSigma { duplicate_pairs: Vec<(usize, usize)> },
    /// A batch index fell outside the node range.
    IndexOutOfRange { index: usize, n: usize },
}

impl core::fmt::Display for GraphError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GraphError::KOutOfRange { k, n } => {
                write!(f, "k={k} out of range for {n} nodes (need 1 <= k <= N-1)")
            }
            GraphError::DegenerateSigma { duplicate_pairs } => {
                write!(
                    f,
                    "all retained neighbor distances are zero; duplicate rows e.g. {duplicate_pairs:?}"
                )
            }
            GraphError::IndexOutOfRange { index, n } => {
                write!(f, "node index {index} out of range for {n} nodes")
            }
        }
    }
}

impl core::error::Error for GraphError {}

/// One directed out-edge of the graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub target: u32,
    pub weight: f64,
    pub distance: f64,
}

/// Directed k-NN graph; node i's edges live at `edges[i*k .. (i+1)*k]`,
/// ordered by (distance, target index).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldGraph {
    n_nodes: usize,
    k: usize,
    sigma: f64,
    edges: Vec<GraphEdge>,
}

impl ManifoldGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The k out-edges of node i.
    pub fn edges_of(&self, i: usize) -> &[GraphEdge] {
        &self.edges[i * self.k..(i + 1) * self.k]
    }

    pub fn all_edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    /// Rebuild a graph from parts, re-checking structural invariants.
    /// Used by deserialization.
    pub fn from_parts(
        n_nodes: usize,
        k: usize,
        sigma: f64,
        edges: Vec<GraphEdge>,
    ) -> Result<Self, String> {
        if edges.len() != n_nodes * k {
            return Err(format!(
                "edge count {} does not equal n*k = {}",
                edges.len(),
                n_nodes * k
            ));
        }
        if !(sigma > 0.0) {
            return Err(format!("sigma must be positive, got {sigma}"));
        }
        for (i, chunk) in edges.chunks_exact(k).enumerate() {
            for e in chunk {
                if e.target as usize == i {
                    return Err(format!("self-edge at node {i}"));
                }
                if e.target as usize >= n_nodes {
                    return Err(format!("edge target {} out of range", e.target));
                }
            }
        }
        Ok(Self {
            n_nodes,
            k,
            sigma,
            edges,
        })
    }
}

/// Full N x N Euclidean distance matrix: symmetric, zero diagonal.
pub fn pairwise_distances(h: &EmbeddingMatrix) -> Matrix {
    let m = h.values();
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(m.row(i), m.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// The k nearest neighbors of row `i` as (index, distance), sorted by
/// (distance, index). Ties in distance go to the smaller row index.
pub fn knn_of_row(values: &Matrix, i: usize, k: usize) -> Vec<(usize, f64)> {
    let n = values.rows();
    debug_assert!(k < n);
    // Bounded insertion into a sorted buffer; k is small relative to N.
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    let row_i = values.row(i);
    for j in 0..n {
        if j == i {
            continue;
        }
        let d = euclidean(row_i, values.row(j));
        if best.len() == k {
            let (lj, ld) = best[k - 1];
            if d > ld || (d == ld && j > lj) {
                continue;
            }
        }
        let pos = best
            .iter()
            .position(|&(bj, bd)| d < bd || (d == bd && j < bj))
            .unwrap_or(best.len());
        best.insert(pos, (j, d));
        if best.len() > k {
            best.pop();
        }
    }
    best
}

/// Build the directed k-NN graph with Gaussian kernel weights.
pub fn build_knn_graph(h: &EmbeddingMatrix, k: usize) -> Result<ManifoldGraph, GraphError> {
    let n = h.n();
    if k == 0 || k > n - 1 {
        return Err(GraphError::KOutOfRange { k, n });
    }
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        lists.push(knn_of_row(h.values(), i, k));
    }
    graph_from_neighbor_lists(n, k, &lists)
}

/// Assemble a graph from per-node neighbor lists (as produced by
/// [`knn_of_row`]). Shared by the sequential and thread-sharded builders so
/// both produce identical bytes.
pub fn graph_from_neighbor_lists(
    n: usize,
    k: usize,
    lists: &[Vec<(usize, f64)>],
) -> Result<ManifoldGraph, GraphError> {
    debug_assert_eq!(lists.len(), n);
    // sigma = median over all N*k retained edge distances; even count takes
    // the mean of the central pair.
    let mut dists: Vec<f64> = Vec::with_capacity(n * k);
    for list in lists {
        debug_assert_eq!(list.len(), k);
        for &(_, d) in list {
            dists.push(d);
        }
    }
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let m = dists.len();
    let sigma = if m % 2 == 1 {
        dists[m / 2]
    } else {
        (dists[m / 2 - 1] + dists[m / 2]) / 2.0
    };
    if sigma == 0.0 {
        // Eq. weights are undefined; report example duplicate pairs.
        let mut duplicate_pairs = Vec::new();
        'outer: for (i, list) in lists.iter().enumerate() {
            for &(j, d) in list {
                if d == 0.0 {
                    duplicate_pairs.push((i, j));
                    if duplicate_pairs.len() == 3 {
                        break 'outer;
                    }
                }
            }
        }
        return Err(GraphError::DegenerateSigma { duplicate_pairs });
    }

    let denom = 2.0 * sigma * sigma;
    let mut edges = Vec::with_capacity(n * k);
    for list in lists {
        for &(j, d) in list {
            edges.push(GraphEdge {
                target: j as u32,
                weight: libm::exp(-(d * d) / denom),
                distance: d,
            });
        }
    }
    Ok(ManifoldGraph {
        n_nodes: n,
        k,
        sigma,
        edges,
    })
}

/// A directed edge drawn from a batch: source position within the batch,
/// absolute target index, and its position in the deduplicated neighbor set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchEdge {
    pub src_in_batch: usize,
    pub target: usize,
    pub target_slot: usize,
    pub weight: f64,
}

/// Edges whose sources lie in `batch_indices` (exactly B*k of them), plus the
/// sorted deduplicated set of target indices.
pub fn neighbor_batch(
    graph: &ManifoldGraph,
    batch_indices: &[usize],
) -> Result<(Vec<BatchEdge>, Vec<usize>), GraphError> {
    let n = graph.n_nodes();
    for &i in batch_indices {
        if i >= n {
            return Err(GraphError::IndexOutOfRange { index: i, n });
        }
    }
    let mut targets: Vec<usize> = Vec::with_capacity(batch_indices.len() * graph.k());
    for &i in batch_indices {
        for e in graph.edges_of(i) {
            targets.push(e.target as usize);
        }
    }
    let mut unique = targets.clone();
    unique.sort_unstable();
    unique.dedup();

    let slot_of = |t: usize| unique.binary_search(&t).expect("target present");
    let mut edges = Vec::with_capacity(batch_indices.len() * graph.k());
    for (b, &i) in batch_indices.iter().enumerate() {
        for e in graph.edges_of(i) {
            edges.push(BatchEdge {
                src_in_batch: b,
                target: e.target as usize,
                target_slot: slot_of(e.target as usize),
                weight: e.weight,
            });
        }
    }
    Ok((edges, unique))
}
