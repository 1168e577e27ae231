//! Class-wise embedding centers: for each category, the `k` knowledge-base
//! descriptions of that category closest to the category's basic-prompt
//! embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{top_k, Embedding, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::knowledge_base::{KnowledgeBase, PromptSet, Source};
use crate::ubem;

pub const DEFAULT_K: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCenter {
    pub category: String,
    /// Knowledge-base rows, best first.
    pub member_rows: Vec<usize>,
    /// Cosine of each member to the category's prompt embedding.
    pub member_scores: Vec<f64>,
    pub member_embeddings: EmbeddingMatrix,
    pub k_requested: usize,
}

impl EmbeddingCenter {
    pub fn len(&self) -> usize {
        self.member_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    pub k: usize,
    pub centers: BTreeMap<String, EmbeddingCenter>,
    pub prompt_embeddings: BTreeMap<String, Embedding>,
    /// The filled basic prompt of every category.
    pub prompts: BTreeMap<String, String>,
    pub source_filter: Option<Source>,
    pub warnings: Vec<String>,
}

impl CenterSet {
    pub fn dim(&self) -> Option<usize> {
        self.centers.values().next().map(|c| c.member_embeddings.dim())
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.centers.keys().map(String::as_str)
    }
}

/// Builds one center per entry of `prompt_embeddings` using the default
/// basic template for the recorded prompt strings.
pub fn localize(
    kb: &KnowledgeBase,
    prompt_embeddings: &BTreeMap<String, Embedding>,
    k: usize,
    source_filter: Option<Source>,
) -> Result<CenterSet> {
    localize_with_template(kb, prompt_embeddings, k, source_filter, &PromptSet::default())
}

pub fn localize_with_template(
    kb: &KnowledgeBase,
    prompt_embeddings: &BTreeMap<String, Embedding>,
    k: usize,
    source_filter: Option<Source>,
    prompt_set: &PromptSet,
) -> Result<CenterSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if prompt_embeddings.is_empty() {
        return Err(Error::EmptyCenterSet);
    }
    for p in prompt_embeddings.values() {
        if p.dim() != kb.dim() {
            return Err(Error::DimensionMismatch {
                expected: kb.dim(),
                found: p.dim(),
            });
        }
    }

    let jobs: Vec<(&String, &Embedding)> = prompt_embeddings.iter().collect();
    let results: Vec<Result<(EmbeddingCenter, Option<String>)>> = jobs
        .par_iter()
        .map(|(category, prompt)| {
            let rows = kb.category_rows(category, source_filter);
            if rows.is_empty() {
                return Err(Error::MissingCategory((*category).clone()));
            }
            let pool = kb.embeddings().select(&rows).without_labels();
            let ranked = top_k(prompt, &pool, k)?;
            let member_rows: Vec<usize> = ranked.iter().map(|s| rows[s.index]).collect();
            let member_scores = ranked.iter().map(|s| s.score).collect();
            let local: Vec<usize> = ranked.iter().map(|s| s.index).collect();
            let warning = (rows.len() < k).then(|| {
                format!(
                    "category {category:?} has {} descriptions, fewer than k = {k}; using all",
                    rows.len()
                )
            });
            Ok((
                EmbeddingCenter {
                    category: (*category).clone(),
                    member_rows,
                    member_scores,
                    member_embeddings: pool.select(&local),
                    k_requested: k,
                },
                warning,
            ))
        })
        .collect();

    let mut centers = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in results {
        let (center, warning) = r?;
        warnings.extend(warning);
        centers.insert(center.category.clone(), center);
    }
    let prompts = prompt_embeddings
        .keys()
        .map(|c| (c.clone(), prompt_set.fill_basic(c)))
        .collect();

    Ok(CenterSet {
        k,
        centers,
        prompt_embeddings: prompt_embeddings.clone(),
        prompts,
        source_filter,
        warnings,
    })
}

/// One center set per requested `k`.
pub fn sweep_k(
    kb: &KnowledgeBase,
    prompt_embeddings: &BTreeMap<String, Embedding>,
    k_values: &[usize],
    source_filter: Option<Source>,
) -> Result<BTreeMap<usize, CenterSet>> {
    if k_values.is_empty() {
        return Err(Error::InvalidArgument("k_values must not be empty".into()));
    }
    k_values
        .iter()
        .map(|&k| Ok((k, localize(kb, prompt_embeddings, k, source_filter)?)))
        .collect()
}

/// Reads category prompt embeddings from a labelled matrix. Each label must
/// be unique.
pub fn prompt_map(m: &EmbeddingMatrix) -> Result<BTreeMap<String, Embedding>> {
    let labels = m
        .labels()
        .ok_or_else(|| Error::Format("prompt embeddings need category labels".into()))?;
    let mut out = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        if out.insert(label.clone(), m.row_embedding(i)).is_some() {
            return Err(Error::DuplicateId(label.clone()));
        }
    }
    Ok(out)
}

/// Groups a labelled matrix into one prompt matrix per category, keeping row
/// order within each group.
pub fn prompt_sets(m: &EmbeddingMatrix) -> Result<BTreeMap<String, EmbeddingMatrix>> {
    let labels = m
        .labels()
        .ok_or_else(|| Error::Format("prompt embeddings need category labels".into()))?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(c, rows)| (c, m.select(&rows).without_labels()))
        .collect())
}

const FORMAT_TAG: &str = "unibind-centers";

#[derive(Serialize, Deserialize)]
struct Member {
    row: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct CategoryHeader {
    category: String,
    prompt: String,
    k_requested: usize,
    members: Vec<Member>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    k: usize,
    dim: usize,
    source_filter: Option<Source>,
    categories: Vec<CategoryHeader>,
    warnings: Vec<String>,
}

/// Serializes a center set: one JSON header line, then a UBEM blob of all
/// member embeddings (labelled by category, categories in order), then a
/// UBEM blob of the prompt embeddings.
pub fn to_bytes(set: &CenterSet) -> Result<Vec<u8>> {
    let dim = set.dim().ok_or(Error::EmptyCenterSet)?;
    let header = Header {
        format: FORMAT_TAG.into(),
        version: 1,
        k: set.k,
        dim,
        source_filter: set.source_filter,
        categories: set
            .centers
            .values()
            .map(|c| CategoryHeader {
                category: c.category.clone(),
                prompt: set.prompts.get(&c.category).cloned().unwrap_or_default(),
                k_requested: c.k_requested,
                members: c
                    .member_rows
                    .iter()
                    .zip(&c.member_scores)
                    .map(|(&row, &score)| Member { row, score })
                    .collect(),
            })
            .collect(),
        warnings: set.warnings.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');

    let parts: Vec<&EmbeddingMatrix> = set.centers.values().map(|c| &c.member_embeddings).collect();
    let labels = set
        .centers
        .values()
        .flat_map(|c| std::iter::repeat_n(c.category.clone(), c.len()))
        .collect();
    let members = EmbeddingMatrix::concat(&parts)?.without_labels().with_labels(labels)?;
    ubem::write(&mut out, &members)?;

    let names: Vec<String> = set.prompt_embeddings.keys().cloned().collect();
    let prompts = EmbeddingMatrix::from_rows(dim, set.prompt_embeddings.values())?.with_labels(names)?;
    ubem::write(&mut out, &prompts)?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<CenterSet> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("center file has no header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT_TAG || header.version != 1 {
        return Err(Error::Format(format!(
            "not a center-set file ({} v{})",
            header.format, header.version
        )));
    }
    let mut rest = &bytes[split + 1..];
    let members = ubem::read(&mut rest)?;
    let prompt_matrix = ubem::read(&mut rest)?;
    if members.dim() != header.dim || prompt_matrix.dim() != header.dim {
        return Err(Error::DimensionMismatch {
            expected: header.dim,
            found: members.dim(),
        });
    }

    let mut centers = BTreeMap::new();
    let mut prompts = BTreeMap::new();
    let mut offset = 0;
    for c in header.categories {
        let n = c.members.len();
        if offset + n > members.rows() {
            return Err(Error::Format("member block shorter than header".into()));
        }
        let local: Vec<usize> = (offset..offset + n).collect();
        offset += n;
        prompts.insert(c.category.clone(), c.prompt);
        centers.insert(
            c.category.clone(),
            EmbeddingCenter {
                member_rows: c.members.iter().map(|m| m.row).collect(),
                member_scores: c.members.iter().map(|m| m.score).collect(),
                member_embeddings: members.select(&local).without_labels(),
                k_requested: c.k_requested,
                category: c.category,
            },
        );
    }
    if offset != members.rows() {
        return Err(Error::Format("member block longer than header".into()));
    }
    Ok(CenterSet {
        k: header.k,
        centers,
        prompt_embeddings: prompt_map(&prompt_matrix)?,
        prompts,
        source_filter: header.source_filter,
        warnings: header.warnings,
    })
}

pub fn save(path: impl AsRef<Path>, set: &CenterSet) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(set)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<CenterSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
