//! Text-anchored alignment of multi-modal embeddings.
//!
//! Frozen backbone embeddings of any modality are mapped by a per-modality
//! linear adapter into a text embedding space. The anchors of that space are
//! class-wise embedding centers: the descriptions in a knowledge base that
//! sit closest to each category's prompt embedding. Classification scores a
//! query by its best cosine against a category's center members.
//!
//! All inputs are precomputed embeddings; no encoder or language model is
//! run here.

pub mod adapter;
pub mod centers;
pub mod contrastive;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod knowledge_base;
pub mod pipeline;
pub mod synthetic;
pub mod train;
pub mod ubem;

pub use adapter::LinearAdapter;
pub use centers::{localize, sweep_k, CenterSet, EmbeddingCenter};
pub use contrastive::{info_nce_loss, InfoNce};
pub use diagnostics::{diagnostics, AlignmentDiagnostics};
pub use embedding::{cosine, normalize, similarity_matrix, top_k, Embedding, EmbeddingMatrix, ScoredIndex};
pub use error::{Error, Result};
pub use eval::{
    evaluate_classification, evaluate_retrieval, score_center_max, score_prompt_mean, Anchors, EvalReport, Prediction,
    RetrievalReport, ScoringMode,
};
pub use knowledge_base::{KnowledgeBase, KnowledgeRecord, PromptSet, Source};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError};
pub use synthetic::{generate_synthetic, SyntheticBundle, SyntheticSpec};
pub use train::{gradient_check, train, GradCheckReport, OptimizerKind, TrainConfig, TrainingPair};
