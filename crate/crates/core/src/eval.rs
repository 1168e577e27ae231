//! Zero-shot classification and cross-modal retrieval metrics.
//!
//! Two class scorers are provided. Center-max scores a query against a
//! category by the best cosine over that category's center members;
//! prompt-mean scores it against the normalized mean of the category's prompt
//! embeddings. Argmax ties go to the lexicographically smallest category.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centers::CenterSet;
use crate::embedding::{cosine, cosine_scores, normalize, top_k, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::io::{fixed6, fixed6_map};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    CenterMax,
    PromptMean,
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::CenterMax => "center_max",
            ScoringMode::PromptMean => "prompt_mean",
        })
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center_max" => Ok(ScoringMode::CenterMax),
            "prompt_mean" => Ok(ScoringMode::PromptMean),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (expected center_max or prompt_mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub sample_id: String,
    pub predicted_category: String,
    #[serde(serialize_with = "fixed6")]
    pub score: f64,
    #[serde(serialize_with = "fixed6_map")]
    pub per_category_scores: BTreeMap<String, f64>,
}

/// Per-category anchors prepared for one scoring mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Anchors {
    /// Center members of every category.
    CenterMax(BTreeMap<String, EmbeddingMatrix>),
    /// Unit-norm mean prompt embedding of every category.
    PromptMean(BTreeMap<String, Vec<f64>>),
}

impl Anchors {
    pub fn from_centers(centers: &CenterSet) -> Result<Self> {
        if centers.centers.is_empty() {
            return Err(Error::EmptyCenterSet);
        }
        Ok(Anchors::CenterMax(
            centers
                .centers
                .iter()
                .map(|(c, center)| (c.clone(), center.member_embeddings.clone()))
                .collect(),
        ))
    }

    /// Averages each category's prompt embeddings and normalizes the mean.
    pub fn from_prompt_sets(prompt_sets: &BTreeMap<String, EmbeddingMatrix>) -> Result<Self> {
        if prompt_sets.is_empty() {
            return Err(Error::EmptyCenterSet);
        }
        let mut dim = None;
        let mut out = BTreeMap::new();
        for (category, prompts) in prompt_sets {
            if prompts.is_empty() {
                return Err(Error::MissingCategory(category.clone()));
            }
            if *dim.get_or_insert(prompts.dim()) != prompts.dim() {
                return Err(Error::DimensionMismatch {
                    expected: dim.unwrap_or_default(),
                    found: prompts.dim(),
                });
            }
            let mut mean = vec![0.0; prompts.dim()];
            for row in prompts.iter_rows() {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            let n = prompts.rows() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            out.insert(category.clone(), normalize(&mean)?);
        }
        Ok(Anchors::PromptMean(out))
    }

    pub fn mode(&self) -> ScoringMode {
        match self {
            Anchors::CenterMax(_) => ScoringMode::CenterMax,
            Anchors::PromptMean(_) => ScoringMode::PromptMean,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Anchors::CenterMax(m) => m.values().next().map_or(0, EmbeddingMatrix::dim),
            Anchors::PromptMean(m) => m.values().next().map_or(0, Vec::len),
        }
    }

    pub fn contains(&self, category: &str) -> bool {
        match self {
            Anchors::CenterMax(m) => m.contains_key(category),
            Anchors::PromptMean(m) => m.contains_key(category),
        }
    }

    pub fn score(&self, sample_id: &str, query: &[f64]) -> Result<Prediction> {
        let mut per_category = BTreeMap::new();
        match self {
            Anchors::CenterMax(m) => {
                for (category, members) in m {
                    let best = cosine_scores(query, members)?
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max);
                    per_category.insert(category.clone(), best);
                }
            }
            Anchors::PromptMean(m) => {
                for (category, mean) in m {
                    per_category.insert(category.clone(), cosine(query, mean)?);
                }
            }
        }
        let (predicted, score) = argmax(&per_category).ok_or(Error::EmptyCenterSet)?;
        Ok(Prediction {
            sample_id: sample_id.to_string(),
            predicted_category: predicted.to_string(),
            score,
            per_category_scores: per_category,
        })
    }
}

/// Highest score; ties resolve to the smallest key.
fn argmax(scores: &BTreeMap<String, f64>) -> Option<(&str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for (c, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best
}

pub fn score_center_max(query: &[f64], centers: &CenterSet) -> Result<Prediction> {
    Anchors::from_centers(centers)?.score("", query)
}

pub fn score_prompt_mean(query: &[f64], prompt_sets: &BTreeMap<String, EmbeddingMatrix>) -> Result<Prediction> {
    Anchors::from_prompt_sets(prompt_sets)?.score("", query)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: ScoringMode,
    pub sample_count: usize,
    pub correct: usize,
    #[serde(serialize_with = "fixed6")]
    pub top1_accuracy: f64,
    #[serde(serialize_with = "fixed6_map")]
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// true category -> predicted category -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Scores every query and counts top-1 hits against `labels`.
pub fn evaluate_classification(
    queries: &EmbeddingMatrix,
    labels: &[String],
    anchors: &Anchors,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if labels.len() != queries.rows() {
        return Err(Error::CountMismatch {
            records: labels.len(),
            rows: queries.rows(),
        });
    }
    if queries.dim() != anchors.dim() {
        return Err(Error::DimensionMismatch {
            expected: anchors.dim(),
            found: queries.dim(),
        });
    }
    if let Some(l) = labels.iter().find(|l| !anchors.contains(l)) {
        return Err(Error::UnknownLabel(l.clone()));
    }
    let predictions: Vec<Prediction> = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let id = queries.label(i).map(str::to_string).unwrap_or_else(|| i.to_string());
            anchors.score(&id, queries.row(i))
        })
        .collect::<Result<_>>()?;

    let mut totals: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut correct = 0;
    for (p, truth) in predictions.iter().zip(labels) {
        let hit = p.predicted_category == *truth;
        correct += hit as usize;
        let t = totals.entry(truth.clone()).or_default();
        t.0 += 1;
        t.1 += hit as usize;
        *confusion
            .entry(truth.clone())
            .or_default()
            .entry(p.predicted_category.clone())
            .or_default() += 1;
    }
    let n = predictions.len();
    let report = EvalReport {
        mode: anchors.mode(),
        sample_count: n,
        correct,
        top1_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class_accuracy: totals
            .into_iter()
            .map(|(c, (count, hits))| (c, hits as f64 / count as f64))
            .collect(),
        confusion,
    };
    Ok((report, predictions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    AToB,
    BToA,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a_to_b" => Ok(Direction::AToB),
            "b_to_a" => Ok(Direction::BToA),
            other => Err(Error::InvalidArgument(format!("unknown direction {other:?}"))),
        }
    }
}

pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub query_count: usize,
    pub gallery_count: usize,
    #[serde(serialize_with = "fixed6_map")]
    pub recall_at: BTreeMap<usize, f64>,
}

/// Relevance keyed by query id: the set of gallery ids that count as hits.
pub type Relevance = HashMap<String, BTreeSet<String>>;

/// Class-level relevance: a query is relevant to every gallery item sharing
/// its category. Use the categories themselves as gallery ids.
pub fn class_relevance(query_ids: &[String], query_categories: &[String]) -> Relevance {
    query_ids
        .iter()
        .zip(query_categories)
        .map(|(q, c)| (q.clone(), BTreeSet::from([c.clone()])))
        .collect()
}

/// Recall@k: the fraction of queries with at least one relevant gallery item
/// among their top `k` cosine matches.
pub fn evaluate_retrieval(
    queries: &EmbeddingMatrix,
    query_ids: &[String],
    gallery: &EmbeddingMatrix,
    gallery_ids: &[String],
    relevance: &Relevance,
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "ks must be non-empty, positive and strictly ascending: {ks:?}"
        )));
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim(),
            found: queries.dim(),
        });
    }
    if query_ids.len() != queries.rows() {
        return Err(Error::CountMismatch {
            records: query_ids.len(),
            rows: queries.rows(),
        });
    }
    if gallery_ids.len() != gallery.rows() {
        return Err(Error::CountMismatch {
            records: gallery_ids.len(),
            rows: gallery.rows(),
        });
    }
    let mut relevant_rows: Vec<&BTreeSet<String>> = Vec::with_capacity(query_ids.len());
    for q in query_ids {
        let rel = relevance
            .get(q)
            .filter(|set| gallery_ids.iter().any(|g| set.contains(g)))
            .ok_or_else(|| Error::MissingRelevance(q.clone()))?;
        relevant_rows.push(rel);
    }

    let k_max = *ks.last().unwrap_or(&1);
    let first_hit: Vec<Option<usize>> = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let ranked = top_k(queries.row(i), gallery, k_max)?;
            Ok(ranked
                .iter()
                .position(|s| relevant_rows[i].contains(&gallery_ids[s.index])))
        })
        .collect::<Result<_>>()?;

    let n = queries.rows();
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    Ok(RetrievalReport {
        direction,
        query_count: n,
        gallery_count: gallery.rows(),
        recall_at,
    })
}
