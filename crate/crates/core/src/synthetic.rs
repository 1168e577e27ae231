//! Seeded synthetic data for desk-scale runs of the whole pipeline.
//!
//! Each class has a center `c` of norm `class_separation` in a random
//! direction. Noise vectors have expected norm `noise_sigma`. For a sample
//! of class `c` in modality `m`:
//!
//! ```text
//! content = c + noise
//! visual  = content + offset_m + noise     (offset_m has norm modality_offset)
//! text    = content + noise                (paired description, no offset)
//! ```
//!
//! Category descriptions are `c + noise`, and each category's prompt
//! embedding is `c + noise`. Every random draw comes from its own ChaCha
//! stream, so adding a modality leaves the draws of the others unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::io::{to_json_pretty, to_jsonl, write_atomic};
use crate::knowledge_base::{KnowledgeRecord, Source, EMBEDDINGS_FILE, RECORDS_FILE};
use crate::pipeline::{LabelRow, ModalityInput, PipelineConfig, SampleRef};
use crate::train::TrainConfig;
use crate::ubem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub categories: usize,
    pub modalities: usize,
    pub samples_per_class_per_modality: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub modality_offset: f64,
    pub noise_sigma: f64,
    pub descriptions_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            categories: 10,
            modalities: 2,
            samples_per_class_per_modality: 20,
            dim: 32,
            class_separation: 1.0,
            modality_offset: 2.0,
            noise_sigma: 0.8,
            descriptions_per_class: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("categories", self.categories),
            ("modalities", self.modalities),
            ("samples_per_class_per_modality", self.samples_per_class_per_modality),
            ("dim", self.dim),
            ("descriptions_per_class", self.descriptions_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        let reals = [
            ("class_separation", self.class_separation),
            ("modality_offset", self.modality_offset),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn category_name(&self, g: usize) -> String {
        format!("class{g:02}")
    }

    pub fn modality_name(&self, m: usize) -> String {
        format!("m{m}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModality {
    pub name: String,
    /// Training samples, labelled by sample id; each id has a paired
    /// description in the knowledge base.
    pub train: EmbeddingMatrix,
    pub train_categories: Vec<String>,
    /// Held-out samples, labelled by sample id.
    pub test: EmbeddingMatrix,
    pub test_categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub spec: SyntheticSpec,
    pub records: Vec<KnowledgeRecord>,
    pub text_embeddings: EmbeddingMatrix,
    /// One row per category, labelled by category.
    pub prompts: EmbeddingMatrix,
    pub modalities: Vec<SyntheticModality>,
}

const STREAM_CENTERS: u64 = 1;
const STREAM_DESCRIPTIONS: u64 = 2;
const STREAM_PROMPTS: u64 = 3;

fn modality_stream(m: usize, part: u64) -> u64 {
    1000 + 16 * m as u64 + part
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian vector with expected norm close to `scale`.
fn noise(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * s).collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    loop {
        let v = noise(rng, dim, 1.0);
        if let Ok(u) = normalize(&v) {
            return u.into_iter().map(|x| x * norm).collect();
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

// A zero vector can only come out of an exact cancellation; nudge it onto
// the first axis so downstream normalization always succeeds.
fn nonzero(mut v: Vec<f64>) -> Vec<f64> {
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    spec.validate()?;
    let d = spec.dim;
    let sigma = spec.noise_sigma;

    let mut rng = rng_for(spec.seed, STREAM_CENTERS);
    let centers: Vec<Vec<f64>> = (0..spec.categories)
        .map(|_| random_direction(&mut rng, d, spec.class_separation))
        .collect();

    let mut records = Vec::new();
    let mut text = Vec::new();
    let mut rng = rng_for(spec.seed, STREAM_DESCRIPTIONS);
    for (g, c) in centers.iter().enumerate() {
        for j in 0..spec.descriptions_per_class {
            let name = spec.category_name(g);
            records.push(KnowledgeRecord {
                id: format!("{name}-desc{j:04}"),
                description: format!("synthetic description {j} of {name}"),
                category: name,
                source: Source::LlmCategory,
                generator: Some("synthetic".into()),
            });
            text.extend(nonzero(add(c, &noise(&mut rng, d, sigma))));
        }
    }

    let mut rng = rng_for(spec.seed, STREAM_PROMPTS);
    let mut prompt_rows = Vec::new();
    for c in &centers {
        prompt_rows.extend(nonzero(add(c, &noise(&mut rng, d, sigma))));
    }
    let prompts = EmbeddingMatrix::new(
        d,
        prompt_rows,
        Some((0..spec.categories).map(|g| spec.category_name(g)).collect()),
    )?;

    let mut modalities = Vec::with_capacity(spec.modalities);
    for m in 0..spec.modalities {
        let name = spec.modality_name(m);
        let offset = random_direction(&mut rng_for(spec.seed, modality_stream(m, 0)), d, spec.modality_offset);
        let mut split = |part: u64, tag: &str, with_text: bool| -> Result<(EmbeddingMatrix, Vec<String>)> {
            let mut rng = rng_for(spec.seed, modality_stream(m, part));
            let mut data = Vec::new();
            let mut ids = Vec::new();
            let mut cats = Vec::new();
            for (g, c) in centers.iter().enumerate() {
                for s in 0..spec.samples_per_class_per_modality {
                    let category = spec.category_name(g);
                    let id = format!("{name}-{tag}-{category}-{s:04}");
                    let content = add(c, &noise(&mut rng, d, sigma));
                    let visual = add(&add(&content, &offset), &noise(&mut rng, d, sigma));
                    data.extend(nonzero(visual));
                    if with_text {
                        text.extend(nonzero(add(&content, &noise(&mut rng, d, sigma))));
                        records.push(KnowledgeRecord {
                            id: id.clone(),
                            category: category.clone(),
                            description: format!("synthetic caption of {id}"),
                            source: Source::MllmData,
                            generator: Some("synthetic".into()),
                        });
                    }
                    ids.push(id);
                    cats.push(category);
                }
            }
            Ok((EmbeddingMatrix::new(d, data, Some(ids))?, cats))
        };
        let (train, train_categories) = split(1, "train", true)?;
        let (test, test_categories) = split(2, "test", false)?;
        modalities.push(SyntheticModality {
            name,
            train,
            train_categories,
            test,
            test_categories,
        });
    }

    Ok(SyntheticBundle {
        spec: spec.clone(),
        text_embeddings: EmbeddingMatrix::new(d, text, None)?,
        records,
        prompts,
        modalities,
    })
}

/// Training settings sized for the default bundle: a few hundred pairs per
/// modality, so a small step and few epochs avoid overfitting the adapter.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 20,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

pub const BUNDLE_SPEC_FILE: &str = "synthetic.json";
pub const BUNDLE_CONFIG_FILE: &str = "pipeline.toml";
pub const BUNDLE_TRAIN_FILE: &str = "train.conf";

impl SyntheticBundle {
    /// Pipeline configuration pointing at the files [`SyntheticBundle::write_to`]
    /// produces (paths relative to the bundle directory).
    pub fn pipeline_config(&self, k: usize, train: TrainConfig) -> PipelineConfig {
        PipelineConfig {
            records: format!("kb/{RECORDS_FILE}").into(),
            embeddings: format!("kb/{EMBEDDINGS_FILE}").into(),
            prompts: "prompts.ubem".into(),
            prompt_ensemble: None,
            k,
            source_filter: None,
            retrieval_ks: crate::eval::DEFAULT_RECALL_KS.to_vec(),
            train,
            modalities: self
                .modalities
                .iter()
                .map(|m| ModalityInput {
                    name: m.name.clone(),
                    visual: format!("{}/train.ubem", m.name).into(),
                    pairs: format!("{}/train_pairs.jsonl", m.name).into(),
                    queries: format!("{}/test.ubem", m.name).into(),
                    labels: format!("{}/test_labels.jsonl", m.name).into(),
                })
                .collect(),
            dump_projection: false,
        }
    }

    pub fn write_to(&self, dir: impl AsRef<Path>, k: usize, train: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        write_atomic(&dir.join("kb").join(RECORDS_FILE), to_jsonl(&self.records)?.as_bytes())?;
        ubem::save(dir.join("kb").join(EMBEDDINGS_FILE), &self.text_embeddings)?;
        ubem::save(dir.join("prompts.ubem"), &self.prompts)?;
        for m in &self.modalities {
            let sub = dir.join(&m.name);
            ubem::save(sub.join("train.ubem"), &m.train)?;
            ubem::save(sub.join("test.ubem"), &m.test)?;
            let pairs: Vec<SampleRef> = m
                .train
                .labels()
                .unwrap_or_default()
                .iter()
                .map(|id| SampleRef { sample_id: id.clone() })
                .collect();
            write_atomic(&sub.join("train_pairs.jsonl"), to_jsonl(&pairs)?.as_bytes())?;
            let labels: Vec<LabelRow> = m
                .test
                .labels()
                .unwrap_or_default()
                .iter()
                .zip(&m.test_categories)
                .map(|(id, c)| LabelRow {
                    id: id.clone(),
                    category: c.clone(),
                })
                .collect();
            write_atomic(&sub.join("test_labels.jsonl"), to_jsonl(&labels)?.as_bytes())?;
        }
        write_atomic(&dir.join(BUNDLE_SPEC_FILE), to_json_pretty(&self.spec)?.as_bytes())?;
        write_atomic(&dir.join(BUNDLE_TRAIN_FILE), train.to_kv_string().as_bytes())?;
        let config = self.pipeline_config(k, train.clone());
        write_atomic(&dir.join(BUNDLE_CONFIG_FILE), config.to_toml()?.as_bytes())?;
        Ok(())
    }

    /// Test-split embeddings and categories of every modality, for diagnostics.
    pub fn test_sets(&self) -> BTreeMap<String, (&EmbeddingMatrix, &[String])> {
        self.modalities
            .iter()
            .map(|m| (m.name.clone(), (&m.test, m.test_categories.as_slice())))
            .collect()
    }
}
