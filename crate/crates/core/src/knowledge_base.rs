//! Description records with their text embeddings, plus the category and
//! sample indexes used by center localization and training.
//!
//! On disk a knowledge base is a directory holding `records.jsonl` (one
//! [`KnowledgeRecord`] per line) and `embeddings.ubem` (rows in the same
//! order).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_norm, Embedding, EmbeddingMatrix, ZERO_NORM};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, to_jsonl, write_atomic};
use crate::ubem;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.ubem";

/// Rows whose norm is already this close to 1 are stored untouched.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Which half of the knowledge base a description belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Category descriptions generated from a category name.
    LlmCategory,
    /// Descriptions of individual data samples.
    MllmData,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::LlmCategory => "llm_category",
            Source::MllmData => "mllm_data",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm_category" => Ok(Source::LlmCategory),
            "mllm_data" => Ok(Source::MllmData),
            other => Err(Error::InvalidArgument(format!(
                "unknown source {other:?} (expected llm_category or mllm_data)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: String,
    pub category: String,
    pub description: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KbStats {
    pub records: usize,
    pub dim: usize,
    pub by_source: BTreeMap<Source, usize>,
    pub by_category: BTreeMap<String, BTreeMap<Source, usize>>,
}

/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    records: Vec<KnowledgeRecord>,
    embeddings: EmbeddingMatrix,
    category_index: BTreeMap<String, Vec<usize>>,
    pair_index: HashMap<String, usize>,
}

impl KnowledgeBase {
    /// Validates records against embeddings, normalizes rows and builds the
    /// indexes.
    pub fn from_parts(records: Vec<KnowledgeRecord>, embeddings: EmbeddingMatrix) -> Result<Self> {
        if records.len() != embeddings.rows() {
            return Err(Error::CountMismatch {
                records: records.len(),
                rows: embeddings.rows(),
            });
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.category.is_empty() {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason: "empty category".into(),
                });
            }
            if r.id.is_empty() {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason: "empty id".into(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }

        let dim = embeddings.dim();
        let mut data = Vec::with_capacity(embeddings.data().len());
        for (i, row) in embeddings.iter_rows().enumerate() {
            let norm = l2_norm(row);
            if norm.is_nan() || norm < ZERO_NORM {
                return Err(Error::ZeroVector { row: Some(i) });
            }
            if (norm - 1.0).abs() <= UNIT_TOLERANCE {
                data.extend_from_slice(row);
            } else {
                // Stored at the f32 precision of the on-disk format so an
                // export/build cycle is lossless.
                data.extend(row.iter().map(|x| (x / norm) as f32 as f64));
            }
        }
        let ids = records.iter().map(|r| r.id.clone()).collect();
        let embeddings = EmbeddingMatrix::new(dim, data, Some(ids))?;

        let mut category_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut pair_index = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            category_index.entry(r.category.clone()).or_default().push(i);
            if r.source == Source::MllmData {
                pair_index.insert(r.id.clone(), i);
            }
        }

        Ok(KnowledgeBase {
            records,
            embeddings,
            category_index,
            pair_index,
        })
    }

    pub fn build(records_file: impl AsRef<Path>, embeddings_file: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<KnowledgeRecord> = read_jsonl(records_file.as_ref())?;
        let embeddings = ubem::load(embeddings_file)?;
        KnowledgeBase::from_parts(records, embeddings)
    }

    /// Loads a directory previously written by [`KnowledgeBase::export`].
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        KnowledgeBase::build(dir.join(RECORDS_FILE), dir.join(EMBEDDINGS_FILE))
    }

    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_atomic(&dir.join(RECORDS_FILE), to_jsonl(&self.records)?.as_bytes())?;
        ubem::save(dir.join(EMBEDDINGS_FILE), &self.embeddings)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn records(&self) -> &[KnowledgeRecord] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &KnowledgeRecord {
        &self.records[row]
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn embedding(&self, row: usize) -> Embedding {
        self.embeddings.row_embedding(row)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.category_index.keys().map(String::as_str)
    }

    /// Rows of `category` in ascending order, optionally restricted to one
    /// source. Unknown categories yield an empty list.
    pub fn category_rows(&self, category: &str, source_filter: Option<Source>) -> Vec<usize> {
        let Some(rows) = self.category_index.get(category) else {
            return Vec::new();
        };
        match source_filter {
            None => rows.clone(),
            Some(s) => rows.iter().copied().filter(|&r| self.records[r].source == s).collect(),
        }
    }

    /// Row of the description paired with a data sample.
    pub fn pair_row(&self, sample_id: &str) -> Result<usize> {
        self.pair_index
            .get(sample_id)
            .copied()
            .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))
    }

    pub fn paired_text_embedding(&self, sample_id: &str) -> Result<Embedding> {
        Ok(self.embedding(self.pair_row(sample_id)?))
    }

    pub fn stats(&self) -> KbStats {
        let mut stats = KbStats {
            records: self.len(),
            dim: self.dim(),
            ..Default::default()
        };
        for r in &self.records {
            *stats.by_source.entry(r.source).or_default() += 1;
            *stats
                .by_category
                .entry(r.category.clone())
                .or_default()
                .entry(r.source)
                .or_default() += 1;
        }
        stats
    }
}

pub const CATEGORY_PLACEHOLDER: &str = "[Category]";

/// Prompt templates; the basic template is the one used for localization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub templates: Vec<String>,
    pub basic_template: String,
}

impl PromptSet {
    pub fn new(basic_template: impl Into<String>, templates: Vec<String>) -> Result<Self> {
        let basic_template = basic_template.into();
        let count = basic_template.matches(CATEGORY_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::InvalidArgument(format!(
                "basic template must contain exactly one {CATEGORY_PLACEHOLDER} placeholder, found {count}"
            )));
        }
        Ok(PromptSet {
            templates,
            basic_template,
        })
    }

    pub fn fill_basic(&self, category: &str) -> String {
        self.basic_template.replace(CATEGORY_PLACEHOLDER, category)
    }

    pub fn fill_all(&self, category: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replace(CATEGORY_PLACEHOLDER, category))
            .collect()
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet::new(
            "A photo of a [Category]",
            vec![
                "a photo of a [Category].".into(),
                "a bad photo of a [Category].".into(),
                "a good photo of a [Category].".into(),
                "a close-up photo of a [Category].".into(),
            ],
        )
        .expect("default template is valid")
    }
}
