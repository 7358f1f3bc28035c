//! Lightweight geometric statistics on embedding matrices.
//!
//! Three numbers inform the activation choice: the fraction of strictly
//! negative entries, the radial class separation of row norms (eta squared
//! over diagnosis classes; a small value means class information is angular
//! rather than radial), and the participation ratio of the covariance
//! spectrum. The participation ratio uses the trace identities
//! `sum(lambda) = tr(C)` and `sum(lambda^2) = ||C||_F^2`, so no
//! eigendecomposition is needed.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Diagnosis, EmbeddingMatrix};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum DiagError {
    ClassCountMismatch { classes: usize, rows: usize },
}

impl core::fmt::Display for DiagError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DiagError::ClassCountMismatch { classes, rows } => {
                write!(f, "{classes} class labels for {rows} rows")
            }
        }
    }
}

impl core::error::Error for DiagError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    /// Fraction of strictly negative entries.
    pub negative_fraction: f64,
    /// Between-class variance of row norms over total variance; `None` when
    /// fewer than two diagnosis classes are present.
    pub radial_eta2: Option<f64>,
    /// Participation ratio of the covariance spectrum, in [1, d].
    pub effective_dim: f64,
    pub n_rows: usize,
    pub d: usize,
    /// Message set when eta squared is undefined.
    pub notes: Vec<String>,
}

pub fn geometry_report(
    emb: &EmbeddingMatrix,
    classes: &[Diagnosis],
) -> Result<GeometryReport, DiagError> {
    let m = emb.values();
    let n = m.rows();
    let d = m.cols();
    if classes.len() != n {
        return Err(DiagError::ClassCountMismatch {
            classes: classes.len(),
            rows: n,
        });
    }

    let negatives = m.data().iter().filter(|&&v| v < 0.0).count();
    let negative_fraction = negatives as f64 / (n * d) as f64;

    // Radial separation: one-way eta squared of row norms by class.
    let norms: Vec<f64> = (0..n).map(|r| libm::sqrt(dot(m.row(r), m.row(r)))).collect();
    let grand = norms.iter().sum::<f64>() / n as f64;
    let mut per_class: Vec<(usize, f64)> = vec![(0, 0.0); 3];
    for (r, dx) in classes.iter().enumerate() {
        let slot = dx.ordinal() as usize;
        per_class[slot].0 += 1;
        per_class[slot].1 += norms[r];
    }
    let present = per_class.iter().filter(|(c, _)| *c > 0).count();
    let mut notes = Vec::new();
    let radial_eta2 = if present < 2 {
        notes.push("eta2 undefined: fewer than two diagnosis classes".into());
        None
    } else {
        let ss_total: f64 = norms.iter().map(|x| (x - grand) * (x - grand)).sum();
        let mut ss_between = 0.0;
        for (count, sum) in &per_class {
            if *count > 0 {
                let mean = sum / *count as f64;
                ss_between += *count as f64 * (mean - grand) * (mean - grand);
            }
        }
        if ss_total > 0.0 {
            Some((ss_between / ss_total).clamp(0.0, 1.0))
        } else {
            notes.push("eta2 undefined: zero variance of row norms".into());
            None
        }
    };

    // Participation ratio via trace identities on the covariance matrix.
    let means = m.col_means();
    let mut cov = Matrix::zeros(d, d);
    for r in 0..n {
        let row = m.row(r);
        for a in 0..d {
            let da = row[a] - means[a];
            let cov_row = cov.row_mut(a);
            for (b, cb) in cov_row.iter_mut().enumerate().skip(a) {
                *cb += da * (row[b] - means[b]);
            }
        }
    }
    let scale = 1.0 / n as f64;
    let mut trace = 0.0;
    let mut frob_sq = 0.0;
    for a in 0..d {
        for b in a..d {
            let v = cov.get(a, b) * scale;
            if a == b {
                trace += v;
                frob_sq += v * v;
            } else {
                frob_sq += 2.0 * v * v;
            }
        }
    }
    let effective_dim = if frob_sq > 0.0 {
        (trace * trace / frob_sq).clamp(1.0, d as f64)
    } else {
        1.0
    };

    Ok(GeometryReport {
        negative_fraction,
        radial_eta2,
        effective_dim,
        n_rows: n,
        d,
        notes,
    })
}
