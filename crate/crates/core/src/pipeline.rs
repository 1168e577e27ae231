//! End-to-end run: knowledge base, centers, per-modality adapters, zero-shot
//! and retrieval evaluation before and after training, and alignment
//! diagnostics.
//!
//! Every input is loaded and cross-checked before anything is written, and
//! all artifacts are computed in memory first, so a failing run leaves the
//! output directory untouched. Each file is written atomically. Reports carry
//! no timestamps; two runs over the same inputs produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, LinearAdapter};
use crate::centers::{self, prompt_map, prompt_sets, CenterSet};
use crate::diagnostics::{diagnostics, pca_2d, AlignmentDiagnostics, LabelledSet};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{
    class_relevance, evaluate_classification, evaluate_retrieval, Anchors, Direction, EvalReport, RetrievalReport,
    ScoringMode, DEFAULT_RECALL_KS,
};
use crate::io::{fixed6_seq, read_jsonl, require_file, sha256_hex, to_json_pretty, to_jsonl, write_atomic};
use crate::knowledge_base::{KnowledgeBase, Source, EMBEDDINGS_FILE, RECORDS_FILE};
use crate::train::{default_init, resolve_pairs, train, TrainConfig, TrainingPair};
use crate::ubem;

/// One line of a pair file: a training sample whose paired description is the
/// knowledge-base record with the same id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub sample_id: String,
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityInput {
    pub name: String,
    /// Training embeddings, labelled by sample id.
    pub visual: PathBuf,
    /// JSON lines of [`SampleRef`].
    pub pairs: PathBuf,
    /// Evaluation embeddings.
    pub queries: PathBuf,
    /// JSON lines of [`LabelRow`], one per query row.
    pub labels: PathBuf,
}

/// Paths are relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub records: PathBuf,
    pub embeddings: PathBuf,
    /// One basic-prompt embedding per category, labelled by category.
    pub prompts: PathBuf,
    /// Several prompt embeddings per category for prompt-mean scoring;
    /// `prompts` is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_ensemble: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_filter: Option<Source>,
    #[serde(default = "default_ks")]
    pub retrieval_ks: Vec<usize>,
    #[serde(default)]
    pub dump_projection: bool,
    #[serde(default)]
    pub train: TrainConfig,
    pub modalities: Vec<ModalityInput>,
}

fn default_k() -> usize {
    centers::DEFAULT_K
}

fn default_ks() -> Vec<usize> {
    DEFAULT_RECALL_KS.to_vec()
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("pipeline config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("pipeline config: {e}")))
    }

    /// Reads a config file; the returned directory anchors its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_toml_str(&text)?, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        self.train.validate()?;
        let ks = &self.retrieval_ks;
        if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "retrieval_ks must be positive and strictly ascending: {ks:?}"
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidArgument("at least one modality is required".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.modalities {
            let ok = !m.name.is_empty()
                && m.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "modality name {:?} must be non-empty [A-Za-z0-9_-]",
                    m.name
                )));
            }
            if !seen.insert(&m.name) {
                return Err(Error::DuplicateId(m.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Inputs,
    KnowledgeBase,
    Centers,
    Train,
    Eval,
    Retrieval,
    Diagnostics,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Inputs => "inputs",
            Stage::KnowledgeBase => "kb build",
            Stage::Centers => "centers localize",
            Stage::Train => "train",
            Stage::Eval => "eval zeroshot",
            Stage::Retrieval => "eval retrieval",
            Stage::Diagnostics => "diagnostics",
            Stage::Write => "write outputs",
        })
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Post,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotResult {
    pub modality: String,
    pub phase: Phase,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_modality: String,
    pub gallery_modality: String,
    pub phase: Phase,
    pub relevance: &'static str,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub modality: String,
    pub dim_in: usize,
    pub dim_out: usize,
    pub pairs: usize,
    pub init: &'static str,
    pub config: TrainConfig,
    #[serde(serialize_with = "fixed6_seq")]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub phase: Phase,
    pub modalities: Vec<String>,
    pub note: &'static str,
    pub diagnostics: AlignmentDiagnostics,
}

const DIAGNOSTICS_NOTE: &str =
    "chosen quantification of cross-modal clustering; lower gap means classes mix across modalities";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub zeroshot: Vec<ZeroShotResult>,
    pub retrieval: Vec<RetrievalResult>,
    pub train: Vec<TrainReport>,
    pub diagnostics_pre: Option<AlignmentDiagnostics>,
    pub diagnostics_post: Option<AlignmentDiagnostics>,
    /// Output path relative to the run directory -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn zeroshot_accuracy(&self, modality: &str, phase: Phase, mode: ScoringMode) -> Option<f64> {
        self.zeroshot
            .iter()
            .find(|z| z.modality == modality && z.phase == phase && z.report.mode == mode)
            .map(|z| z.report.top1_accuracy)
    }

    pub fn recall(&self, query: &str, gallery: &str, phase: Phase, k: usize) -> Option<f64> {
        self.retrieval
            .iter()
            .find(|r| r.query_modality == query && r.gallery_modality == gallery && r.phase == phase)
            .and_then(|r| r.report.recall_at.get(&k).copied())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: &'static str,
    ubem_version: u16,
    config_sha256: String,
    stages: Vec<String>,
    inputs: BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    warnings: &'a [String],
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct LoadedModality {
    name: String,
    pairs: Vec<TrainingPair>,
    queries: EmbeddingMatrix,
    ids: Vec<String>,
    categories: Vec<String>,
}

struct Inputs {
    kb: KnowledgeBase,
    prompts: EmbeddingMatrix,
    ensemble: EmbeddingMatrix,
    modalities: Vec<LoadedModality>,
    hashes: BTreeMap<String, String>,
}

fn read_hashed(base: &Path, rel: &Path, hashes: &mut BTreeMap<String, String>) -> Result<Vec<u8>> {
    let path = require_file(&base.join(rel))?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    hashes.insert(rel.to_string_lossy().into_owned(), sha256_hex(&bytes));
    Ok(bytes)
}

fn load_inputs(config: &PipelineConfig, base: &Path) -> std::result::Result<Inputs, PipelineError> {
    // every path must exist before anything is parsed
    let mut all: Vec<&Path> = vec![&config.records, &config.embeddings, &config.prompts];
    all.extend(config.prompt_ensemble.as_deref());
    for m in &config.modalities {
        all.extend([m.visual.as_path(), &m.pairs, &m.queries, &m.labels]);
    }
    for p in &all {
        require_file(&base.join(p)).at(Stage::Inputs)?;
    }

    let mut hashes = BTreeMap::new();
    read_hashed(base, &config.records, &mut hashes).at(Stage::Inputs)?;
    read_hashed(base, &config.embeddings, &mut hashes).at(Stage::Inputs)?;
    let kb =
        KnowledgeBase::build(base.join(&config.records), base.join(&config.embeddings)).at(Stage::KnowledgeBase)?;

    let load_ubem = |rel: &Path, hashes: &mut BTreeMap<String, String>| -> Result<EmbeddingMatrix> {
        let bytes = read_hashed(base, rel, hashes)?;
        ubem::read(bytes.as_slice()).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", rel.display())),
            other => other,
        })
    };
    let check_dim = |what: &str, found: usize, expected: usize| -> Result<()> {
        if found == expected {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} has dim {found}, expected {expected}"
            )))
        }
    };

    let prompts = load_ubem(&config.prompts, &mut hashes).at(Stage::Inputs)?;
    check_dim("prompt embeddings", prompts.dim(), kb.dim()).at(Stage::Inputs)?;
    let prompt_categories = prompt_map(&prompts).at(Stage::Inputs)?;
    let ensemble = match &config.prompt_ensemble {
        Some(p) => {
            let e = load_ubem(p, &mut hashes).at(Stage::Inputs)?;
            check_dim("prompt ensemble", e.dim(), kb.dim()).at(Stage::Inputs)?;
            e
        }
        None => prompts.clone(),
    };
    let ensemble_categories = prompt_sets(&ensemble).at(Stage::Inputs)?;

    let mut modalities = Vec::new();
    for m in &config.modalities {
        let visual = load_ubem(&m.visual, &mut hashes).at(Stage::Inputs)?;
        let queries = load_ubem(&m.queries, &mut hashes).at(Stage::Inputs)?;
        check_dim(&format!("{} queries", m.name), queries.dim(), visual.dim()).at(Stage::Inputs)?;
        read_hashed(base, &m.pairs, &mut hashes).at(Stage::Inputs)?;
        read_hashed(base, &m.labels, &mut hashes).at(Stage::Inputs)?;
        let refs: Vec<SampleRef> = read_jsonl(&base.join(&m.pairs)).at(Stage::Inputs)?;
        let ids: Vec<String> = refs.into_iter().map(|r| r.sample_id).collect();
        let pairs = resolve_pairs(&kb, &visual, &ids).at(Stage::Inputs)?;
        let labels: Vec<LabelRow> = read_jsonl(&base.join(&m.labels)).at(Stage::Inputs)?;
        if labels.len() != queries.rows() {
            return Err(Error::CountMismatch {
                records: labels.len(),
                rows: queries.rows(),
            })
            .at(Stage::Inputs);
        }
        if let Some(qids) = queries.labels() {
            if let Some((i, _)) = qids.iter().zip(&labels).enumerate().find(|(_, (q, l))| **q != l.id) {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason: format!("{}: id does not match query row {i}", m.labels.display()),
                })
                .at(Stage::Inputs);
            }
        }
        for l in &labels {
            if !prompt_categories.contains_key(&l.category) || !ensemble_categories.contains_key(&l.category) {
                return Err(Error::UnknownLabel(l.category.clone())).at(Stage::Inputs);
            }
        }
        let (ids, categories) = labels.into_iter().map(|l| (l.id, l.category)).unzip();
        modalities.push(LoadedModality {
            name: m.name.clone(),
            pairs,
            queries,
            ids,
            categories,
        });
    }
    Ok(Inputs {
        kb,
        prompts,
        ensemble,
        modalities,
        hashes,
    })
}

/// Runs every stage and writes the run directory. `base_dir` anchors the
/// config's relative paths.
pub fn run_pipeline(
    config: &PipelineConfig,
    base_dir: &Path,
    out_dir: &Path,
) -> std::result::Result<RunSummary, PipelineError> {
    config.validate().at(Stage::Config)?;
    let config_toml = config.to_toml().at(Stage::Config)?;
    let inputs = load_inputs(config, base_dir)?;
    let kb = &inputs.kb;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut warnings = Vec::new();

    files.push((
        format!("kb/{RECORDS_FILE}"),
        to_jsonl(kb.records()).at(Stage::KnowledgeBase)?.into_bytes(),
    ));
    files.push((
        format!("kb/{EMBEDDINGS_FILE}"),
        ubem::to_bytes(kb.embeddings()).at(Stage::KnowledgeBase)?,
    ));

    let center_set: CenterSet = centers::localize(
        kb,
        &prompt_map(&inputs.prompts).at(Stage::Centers)?,
        config.k,
        config.source_filter,
    )
    .at(Stage::Centers)?;
    warnings.extend(center_set.warnings.iter().cloned());
    files.push(("centers.bin".into(), centers::to_bytes(&center_set).at(Stage::Centers)?));

    let trained: Vec<(LinearAdapter, TrainReport)> = inputs
        .modalities
        .par_iter()
        .map(|m| {
            let dim_in = m.queries.dim();
            let init = default_init(&m.name, dim_in, kb.dim(), config.train.seed);
            let outcome = train(&m.name, &m.pairs, kb, &config.train, Some(init))?;
            let report = TrainReport {
                modality: m.name.clone(),
                dim_in,
                dim_out: kb.dim(),
                pairs: m.pairs.len(),
                init: if dim_in == kb.dim() { "identity" } else { "random" },
                config: config.train.clone(),
                loss_history: outcome.loss_history,
            };
            Ok((outcome.adapter, report))
        })
        .collect::<Result<_>>()
        .at(Stage::Train)?;
    for (adapter, report) in &trained {
        files.push((
            format!("adapters/{}.adapter", report.modality),
            adapter::to_bytes(adapter).at(Stage::Train)?,
        ));
        files.push((
            format!("train/{}.json", report.modality),
            to_json_pretty(report).at(Stage::Train)?.into_bytes(),
        ));
    }

    // query embeddings per phase; raw embeddings only take part when they
    // already live in the text space
    let mut embedded: BTreeMap<Phase, Vec<EmbeddingMatrix>> = BTreeMap::new();
    let raw_fits = inputs.modalities.iter().all(|m| m.queries.dim() == kb.dim());
    if raw_fits {
        let pre = inputs
            .modalities
            .iter()
            .map(|m| m.queries.normalized())
            .collect::<Result<_>>()
            .at(Stage::Eval)?;
        embedded.insert(Phase::Pre, pre);
    } else {
        warnings.push("raw embeddings differ in dim from the text space; pre-training evaluation skipped".into());
    }
    let post = inputs
        .modalities
        .iter()
        .zip(&trained)
        .map(|(m, (a, _))| a.apply(&m.queries))
        .collect::<Result<_>>()
        .at(Stage::Eval)?;
    embedded.insert(Phase::Post, post);

    let anchors = [
        Anchors::from_centers(&center_set).at(Stage::Eval)?,
        Anchors::from_prompt_sets(&prompt_sets(&inputs.ensemble).at(Stage::Eval)?).at(Stage::Eval)?,
    ];
    let mut zeroshot = Vec::new();
    for (&phase, mats) in &embedded {
        for (m, q) in inputs.modalities.iter().zip(mats) {
            for a in &anchors {
                let (report, _) = evaluate_classification(q, &m.categories, a).at(Stage::Eval)?;
                let result = ZeroShotResult {
                    modality: m.name.clone(),
                    phase,
                    report,
                };
                files.push((
                    format!("eval/{}/zeroshot_{}_{}.json", m.name, phase.as_str(), a.mode()),
                    to_json_pretty(&result).at(Stage::Eval)?.into_bytes(),
                ));
                zeroshot.push(result);
            }
        }
    }

    let mut retrieval = Vec::new();
    for (&phase, mats) in &embedded {
        for (i, qm) in inputs.modalities.iter().enumerate() {
            for (j, gm) in inputs.modalities.iter().enumerate() {
                if i == j {
                    continue;
                }
                let relevance = class_relevance(&qm.ids, &qm.categories);
                let report = evaluate_retrieval(
                    &mats[i],
                    &qm.ids,
                    &mats[j],
                    &gm.categories,
                    &relevance,
                    &config.retrieval_ks,
                    if i < j { Direction::AToB } else { Direction::BToA },
                )
                .at(Stage::Retrieval)?;
                let result = RetrievalResult {
                    query_modality: qm.name.clone(),
                    gallery_modality: gm.name.clone(),
                    phase,
                    relevance: "class",
                    report,
                };
                files.push((
                    format!("retrieval/{}_to_{}_{}.json", qm.name, gm.name, phase.as_str()),
                    to_json_pretty(&result).at(Stage::Retrieval)?.into_bytes(),
                ));
                retrieval.push(result);
            }
        }
    }

    let mut diag: BTreeMap<Phase, AlignmentDiagnostics> = BTreeMap::new();
    if inputs.modalities.len() >= 2 {
        for (&phase, mats) in &embedded {
            let sets: Vec<LabelledSet> = inputs
                .modalities
                .iter()
                .zip(mats)
                .map(|(m, e)| LabelledSet {
                    embeddings: e,
                    labels: &m.categories,
                })
                .collect();
            let d = diagnostics(&sets).at(Stage::Diagnostics)?;
            let report = DiagnosticsReport {
                phase,
                modalities: inputs.modalities.iter().map(|m| m.name.clone()).collect(),
                note: DIAGNOSTICS_NOTE,
                diagnostics: d.clone(),
            };
            files.push((
                format!("diagnostics_{}.json", phase.as_str()),
                to_json_pretty(&report).at(Stage::Diagnostics)?.into_bytes(),
            ));
            diag.insert(phase, d);
        }
    } else {
        warnings.push("a single modality has no cross-modal diagnostics".into());
    }

    if config.dump_projection {
        for (&phase, mats) in &embedded {
            let refs: Vec<&EmbeddingMatrix> = mats.iter().collect();
            let pooled = EmbeddingMatrix::concat(&refs).at(Stage::Diagnostics)?;
            let coords = pca_2d(&pooled).at(Stage::Diagnostics)?;
            let mut csv = String::from("modality,id,category,x,y\n");
            let rows = inputs
                .modalities
                .iter()
                .flat_map(|m| m.ids.iter().zip(&m.categories).map(move |(id, c)| (&m.name, id, c)));
            for ((name, id, category), [x, y]) in rows.zip(&coords) {
                csv.push_str(&format!("{name},{id},{category},{x:.6},{y:.6}\n"));
            }
            files.push((format!("projection_{}.csv", phase.as_str()), csv.into_bytes()));
        }
    }

    let outputs: BTreeMap<String, String> = files.iter().map(|(p, b)| (p.clone(), sha256_hex(b))).collect();
    let manifest = Manifest {
        format: "unibind-run",
        version: env!("CARGO_PKG_VERSION"),
        ubem_version: ubem::VERSION,
        config_sha256: sha256_hex(config_toml.as_bytes()),
        stages: [
            Stage::KnowledgeBase,
            Stage::Centers,
            Stage::Train,
            Stage::Eval,
            Stage::Retrieval,
            Stage::Diagnostics,
        ]
        .iter()
        .map(ToString::to_string)
        .collect(),
        inputs: inputs.hashes.clone(),
        outputs: &outputs,
        warnings: &warnings,
    };
    files.push((
        MANIFEST_FILE.into(),
        to_json_pretty(&manifest).at(Stage::Write)?.into_bytes(),
    ));
    files.push(("config.toml".into(), config_toml.into_bytes()));

    for (rel, bytes) in &files {
        write_atomic(&out_dir.join(rel), bytes).at(Stage::Write)?;
    }

    Ok(RunSummary {
        zeroshot,
        retrieval,
        train: trained.into_iter().map(|(_, r)| r).collect(),
        diagnostics_pre: diag.remove(&Phase::Pre),
        diagnostics_post: diag.remove(&Phase::Post),
        outputs,
        warnings,
    })
}
