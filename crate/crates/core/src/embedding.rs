//! Dense vector primitives: normalization, cosine similarity, batched
//! similarity matrices and exact top-k selection.
//!
//! Values are held as `f64` in memory. Every dot product is a sequential
//! `f64` accumulation in index order, so a score never depends on how a
//! batch was partitioned.

use std::cmp::Ordering;
use std::ops::Deref;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm.is_nan() || norm < ZERO_NORM {
        return Err(Error::ZeroVector { row: None });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

// Shared by every cosine path so that scalar, batched and top-k scores are
// bit-identical. `+ 0.0` folds -0.0 into 0.0 so ties order by index only.
#[inline]
fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0) + 0.0
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na >= ZERO_NORM && nb >= ZERO_NORM) {
        return Err(Error::ZeroVector { row: None });
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

/// A single finite, non-empty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must have dim >= 1".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn normalize(&self) -> Result<Embedding> {
        normalize(&self.0).map(Embedding)
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        cosine(&self.0, &other.0)
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major batch of embeddings sharing one dimension, with optional
/// per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("matrix dim must be >= 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let rows = data.len() / dim;
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix row {}", pos / dim)));
        }
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::CountMismatch { records: l.len(), rows });
            }
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            data,
            labels,
        })
    }

    /// Builds a matrix from row vectors; all rows must share one length.
    pub fn from_rows<I, R>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f64]>,
    {
        let mut data = Vec::new();
        for row in rows {
            let row = row.as_ref();
            check_dims(dim, row.len())?;
            data.extend_from_slice(row);
        }
        EmbeddingMatrix::new(dim, data, None)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        EmbeddingMatrix::new(dim, Vec::new(), None)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::CountMismatch {
                records: labels.len(),
                rows: self.rows,
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, row: usize) -> Option<&str> {
        self.labels.as_ref().map(|l| l[row].as_str())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_embedding(&self, i: usize) -> Embedding {
        Embedding(self.row(i).to_vec())
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Copies the given rows (and their labels) into a new matrix.
    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r].clone()).collect());
        EmbeddingMatrix {
            rows: rows.len(),
            dim: self.dim,
            data,
            labels,
        }
    }

    /// Returns a copy with every row scaled to unit norm.
    pub fn normalized(&self) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, row) in self.iter_rows().enumerate() {
            let n = normalize(row).map_err(|_| Error::ZeroVector { row: Some(i) })?;
            data.extend(n);
        }
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data,
            labels: self.labels.clone(),
        })
    }

    /// L2 norm of every row; errors on the first zero row.
    pub fn row_norms(&self) -> Result<Vec<f64>> {
        self.iter_rows()
            .enumerate()
            .map(|(i, r)| {
                let n = l2_norm(r);
                if n >= ZERO_NORM {
                    Ok(n)
                } else {
                    Err(Error::ZeroVector { row: Some(i) })
                }
            })
            .collect()
    }

    /// Stacks matrices with equal dims; labels survive only if every part has them.
    pub fn concat(parts: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
        let dim = parts
            .first()
            .map(|p| p.dim)
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            check_dims(dim, p.dim)?;
            data.extend_from_slice(&p.data);
            labels = match (labels, &p.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend(l.iter().cloned());
                    Some(acc)
                }
                _ => None,
            };
        }
        EmbeddingMatrix::new(dim, data, labels)
    }
}

/// A row position paired with its cosine score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredIndex {
    pub index: usize,
    pub score: f64,
}

/// Descending score, then ascending index.
fn rank_order(a: &ScoredIndex, b: &ScoredIndex) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Selects the `k` best entries of a score vector under the ranking order.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<ScoredIndex> {
    let mut all: Vec<ScoredIndex> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| ScoredIndex { index, score })
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_unstable_by(rank_order);
    all
}

/// Cosine scores of `query` against every row of `keys`.
pub fn cosine_scores(query: &[f64], keys: &EmbeddingMatrix) -> Result<Vec<f64>> {
    check_dims(keys.dim, query.len())?;
    let qn = l2_norm(query);
    if qn.is_nan() || qn < ZERO_NORM {
        return Err(Error::ZeroVector { row: None });
    }
    keys.iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let kn = l2_norm(row);
            if kn.is_nan() || kn < ZERO_NORM {
                return Err(Error::ZeroVector { row: Some(i) });
            }
            Ok(cosine_from_parts(dot(query, row), qn, kn))
        })
        .collect()
}

/// Exact top-k by cosine: descending score, ties by ascending row index.
pub fn top_k(query: &[f64], keys: &EmbeddingMatrix, k: usize) -> Result<Vec<ScoredIndex>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    check_dims(keys.dim, query.len())?;
    if keys.rows == 0 {
        return Err(Error::EmptyKeys);
    }
    let scores = cosine_scores(query, keys)?;
    Ok(select_top_k(&scores, k))
}

/// Dense `rows x cols` score table.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// All-pairs cosine between query rows and key rows. Rows are computed in
/// parallel; each entry is bit-identical to [`cosine`].
pub fn similarity_matrix(queries: &EmbeddingMatrix, keys: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    check_dims(queries.dim, keys.dim)?;
    let qn = queries.row_norms()?;
    let kn = keys.row_norms()?;
    let cols = keys.rows;
    let mut data = vec![0.0; queries.rows * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            let q = queries.row(i);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = cosine_from_parts(dot(q, keys.row(j)), qn[i], kn[j]);
            }
        });
    }
    Ok(SimilarityMatrix {
        rows: queries.rows,
        cols,
        data,
    })
}
