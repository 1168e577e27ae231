//! How well embeddings of different modalities mix within a class.
//!
//! Over every unordered pair of same-class samples, the mean cosine is split
//! into pairs drawn from the same modality and pairs drawn from different
//! modalities. The modality gap is `same_modal - cross_modal`: positive when
//! samples cluster by modality rather than by class.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::embedding::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::io::fixed6;

pub const GAP_DEFINITION: &str =
    "modality_gap = intra_class_same_modal_cosine - intra_class_cross_modal_cosine (mean cosine over same-class pairs)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentDiagnostics {
    pub definition: &'static str,
    #[serde(serialize_with = "fixed6")]
    pub intra_class_cross_modal_cosine: f64,
    #[serde(serialize_with = "fixed6")]
    pub intra_class_same_modal_cosine: f64,
    #[serde(serialize_with = "fixed6")]
    pub modality_gap: f64,
    pub cross_modal_pairs: u64,
    pub same_modal_pairs: u64,
}

/// One modality's embeddings with a category per row.
#[derive(Debug, Clone, Copy)]
pub struct LabelledSet<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    pub labels: &'a [String],
}

pub fn diagnostics(sets: &[LabelledSet<'_>]) -> Result<AlignmentDiagnostics> {
    if sets.len() < 2 {
        return Err(Error::InsufficientSamples("need at least two modalities".into()));
    }
    let dim = sets[0].embeddings.dim();
    // class -> per modality -> unit rows
    let mut by_class: BTreeMap<&str, Vec<Vec<&[f64]>>> = BTreeMap::new();
    let normalized: Vec<EmbeddingMatrix> = sets
        .iter()
        .map(|s| {
            if s.embeddings.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: s.embeddings.dim(),
                });
            }
            if s.labels.len() != s.embeddings.rows() {
                return Err(Error::CountMismatch {
                    records: s.labels.len(),
                    rows: s.embeddings.rows(),
                });
            }
            s.embeddings.normalized()
        })
        .collect::<Result<_>>()?;
    for (m, (set, unit)) in sets.iter().zip(&normalized).enumerate() {
        for (label, row) in set.labels.iter().zip(unit.iter_rows()) {
            by_class
                .entry(label.as_str())
                .or_insert_with(|| vec![Vec::new(); sets.len()])[m]
                .push(row);
        }
    }
    for (class, per_modality) in &by_class {
        for (m, rows) in per_modality.iter().enumerate() {
            if rows.len() == 1 {
                return Err(Error::InsufficientSamples(format!(
                    "class {class:?} has a single sample in modality {m}"
                )));
            }
        }
    }

    let (mut same_sum, mut same_n) = (0.0, 0u64);
    let (mut cross_sum, mut cross_n) = (0.0, 0u64);
    for per_modality in by_class.values() {
        for (m, rows) in per_modality.iter().enumerate() {
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    same_sum += dot(rows[i], rows[j]);
                    same_n += 1;
                }
            }
            for other in &per_modality[m + 1..] {
                for a in rows {
                    for b in other {
                        cross_sum += dot(a, b);
                        cross_n += 1;
                    }
                }
            }
        }
    }
    if same_n == 0 || cross_n == 0 {
        return Err(Error::InsufficientSamples(
            "no class appears with two samples in two modalities".into(),
        ));
    }
    let cross = cross_sum / cross_n as f64;
    let same = same_sum / same_n as f64;
    Ok(AlignmentDiagnostics {
        definition: GAP_DEFINITION,
        intra_class_cross_modal_cosine: cross,
        intra_class_same_modal_cosine: same,
        modality_gap: same - cross,
        cross_modal_pairs: cross_n,
        same_modal_pairs: same_n,
    })
}

/// Projects rows onto the top two principal axes of their pooled covariance.
/// Each axis is signed so its largest-magnitude component is positive.
pub fn pca_2d(m: &EmbeddingMatrix) -> Result<Vec<[f64; 2]>> {
    if m.rows() < 2 || m.dim() < 2 {
        return Err(Error::InsufficientSamples(
            "PCA needs at least 2 rows and 2 dims".into(),
        ));
    }
    let d = m.dim();
    let mut mean = vec![0.0; d];
    for r in m.iter_rows() {
        for (a, x) in mean.iter_mut().zip(r) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m.rows() as f64);
    let centered = DMatrix::from_fn(m.rows(), d, |i, j| m.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / (m.rows() - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((0..m.rows())
        .map(|i| {
            let row = centered.row(i);
            let c: Vec<f64> = row.iter().copied().collect();
            [dot(&c, &axes[0]), dot(&c, &axes[1])]
        })
        .collect())
}
