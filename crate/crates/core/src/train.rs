//! Contrastive training of a linear adapter against paired description
//! embeddings, and a finite-difference check of its gradients.
//!
//! Forward pass for one batch:
//!
//! ```text
//! u_i = W v_i + b,   a_i = u_i / |u_i|,   loss = InfoNCE(a, t)
//! ```
//!
//! where `t_i` is the (unit) knowledge-base embedding of the description
//! paired with sample `i`. Only `W` and `b` are updated.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::LinearAdapter;
use crate::contrastive::InfoNce;
use crate::embedding::{dot, l2_norm, Embedding, EmbeddingMatrix, ZERO_NORM};
use crate::error::{Error, Result};
use crate::knowledge_base::{KnowledgeBase, KnowledgeRecord, Source};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Finite-difference step and pass threshold for [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub symmetric_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.07,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            symmetric_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<InfoNce> {
        InfoNce::new(self.temperature, self.symmetric_loss)
    }

    /// Parses `key = value` lines; `#` starts a comment, values may be quoted.
    /// Keys not present keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::MalformedRecord { line: n + 1, reason };
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            let int = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "temperature" => cfg.temperature = num(value)?,
                "learning_rate" => cfg.learning_rate = num(value)?,
                "batch_size" => cfg.batch_size = int(value)? as usize,
                "epochs" => cfg.epochs = int(value)? as usize,
                "seed" => cfg.seed = int(value)?,
                "optimizer" => cfg.optimizer = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "symmetric_loss" => {
                    cfg.symmetric_loss = value
                        .parse()
                        .map_err(|_| bad(format!("symmetric_loss: expected true/false, got {value:?}")))?
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "temperature = {}\nlearning_rate = {}\nbatch_size = {}\nepochs = {}\nseed = {}\noptimizer = {}\nsymmetric_loss = {}\n",
            self.temperature,
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.seed,
            self.optimizer,
            self.symmetric_loss
        )
    }
}

/// A frozen-backbone sample and the row of its paired description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub sample_id: String,
    pub visual_embedding: Embedding,
    pub text_row: usize,
}

/// Resolves each sample id against the visual matrix labels and the
/// knowledge-base pair index.
pub fn resolve_pairs(kb: &KnowledgeBase, visual: &EmbeddingMatrix, sample_ids: &[String]) -> Result<Vec<TrainingPair>> {
    let labels = visual
        .labels()
        .ok_or_else(|| Error::Format("visual embeddings need sample-id labels".into()))?;
    let by_id: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    sample_ids
        .iter()
        .map(|id| {
            let row = *by_id.get(id.as_str()).ok_or_else(|| Error::UnknownSample(id.clone()))?;
            Ok(TrainingPair {
                sample_id: id.clone(),
                visual_embedding: visual.row_embedding(row),
                text_row: kb.pair_row(id)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub excess: f64,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradient(
    adapter: &LinearAdapter,
    batch: &[&TrainingPair],
    kb: &KnowledgeBase,
    objective: InfoNce,
) -> Result<BatchGradient> {
    let (dim_in, dim_out) = (adapter.dim_in(), adapter.dim_out());
    if dim_out != kb.dim() {
        return Err(Error::DimensionMismatch {
            expected: kb.dim(),
            found: dim_out,
        });
    }
    let b = batch.len();
    if b < 2 {
        return Err(Error::DegenerateBatch("a batch needs at least two pairs".into()));
    }
    let mut adapted = vec![0.0; b * dim_out];
    let mut norms = vec![0.0; b];
    let mut texts = Vec::with_capacity(b * dim_out);
    for (i, p) in batch.iter().enumerate() {
        if p.visual_embedding.dim() != dim_in {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                found: p.visual_embedding.dim(),
            });
        }
        if p.text_row >= kb.len() {
            return Err(Error::UnknownSample(p.sample_id.clone()));
        }
        let out = &mut adapted[i * dim_out..(i + 1) * dim_out];
        adapter.forward(&p.visual_embedding, out);
        let n = l2_norm(out);
        if n.is_nan() || n < ZERO_NORM {
            return Err(Error::ZeroVector { row: Some(i) });
        }
        out.iter_mut().for_each(|x| *x /= n);
        norms[i] = n;
        texts.extend_from_slice(kb.embeddings().row(p.text_row));
    }

    let out = objective.evaluate(&adapted, &texts, b, dim_out);

    let mut grad_w = vec![0.0; dim_out * dim_in];
    let mut grad_b = vec![0.0; dim_out];
    let mut grad_u = vec![0.0; dim_out];
    for (i, p) in batch.iter().enumerate() {
        let a = &adapted[i * dim_out..(i + 1) * dim_out];
        let g = &out.grad[i * dim_out..(i + 1) * dim_out];
        // through a = u / |u|
        let proj = dot(a, g);
        for k in 0..dim_out {
            grad_u[k] = (g[k] - a[k] * proj) / norms[i];
        }
        let v = p.visual_embedding.as_slice();
        for (r, gu) in grad_u.iter().enumerate() {
            grad_b[r] += gu;
            let row = &mut grad_w[r * dim_in..(r + 1) * dim_in];
            for (w, x) in row.iter_mut().zip(v) {
                *w += gu * x;
            }
        }
    }
    Ok(BatchGradient {
        loss: out.loss,
        excess: out.excess,
        weight: grad_w,
        bias: grad_b,
    })
}

enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; params],
                v: vec![0.0; params],
                t: 0,
            },
        }
    }

    fn step(&mut self, adapter: &mut LinearAdapter, grad: &BatchGradient, lr: f64) {
        let params = adapter.weight.iter_mut().chain(adapter.bias.iter_mut());
        let grads = grad.weight.iter().chain(&grad.bias);
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for (((p, g), m), v) in params.zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapter: LinearAdapter,
    /// Mean loss of every epoch, weighted by batch size.
    pub loss_history: Vec<f64>,
}

/// Initial adapter used when none is supplied: identity when the backbone and
/// text spaces share a dimension, otherwise a seeded random map.
pub fn default_init(modality: &str, dim_in: usize, dim_out: usize, seed: u64) -> LinearAdapter {
    if dim_in == dim_out {
        LinearAdapter::identity(modality, dim_in)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        LinearAdapter::random(modality, dim_in, dim_out, &mut rng)
    }
}

/// Trains one adapter. Pairs are shuffled every epoch with a generator
/// seeded from `config.seed` and the epoch number; a trailing batch with a
/// single pair is dropped.
pub fn train(
    modality: &str,
    pairs: &[TrainingPair],
    kb: &KnowledgeBase,
    config: &TrainConfig,
    init: Option<LinearAdapter>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let objective = config.objective()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training pairs".into()))?;
    let dim_in = first.visual_embedding.dim();
    for p in pairs {
        if p.visual_embedding.dim() != dim_in {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                found: p.visual_embedding.dim(),
            });
        }
        if p.text_row >= kb.len() {
            return Err(Error::UnknownSample(p.sample_id.clone()));
        }
    }
    if pairs.len() < 2 || pairs.iter().all(|p| p.text_row == first.text_row) {
        return Err(Error::DegenerateBatch(
            "all pairs share one description; no negatives".into(),
        ));
    }

    let mut adapter = match init {
        Some(mut a) => {
            if a.dim_in() != dim_in {
                return Err(Error::DimensionMismatch {
                    expected: dim_in,
                    found: a.dim_in(),
                });
            }
            if a.dim_out() != kb.dim() {
                return Err(Error::DimensionMismatch {
                    expected: kb.dim(),
                    found: a.dim_out(),
                });
            }
            a.modality = modality.to_string();
            a
        }
        None => default_init(modality, dim_in, kb.dim(), config.seed),
    };
    adapter.check_finite()?;

    let mut optimizer = Optimizer::new(config.optimizer, adapter.param_count());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let grad = batch_gradient(&adapter, &batch, kb, objective)?;
            optimizer.step(&mut adapter, &grad, config.learning_rate);
            total += grad.loss * chunk.len() as f64;
            seen += chunk.len();
        }
        adapter.check_finite()?;
        history.push(total / seen as f64);
    }
    Ok(TrainOutcome {
        adapter,
        loss_history: history,
    })
}

fn param_mut(a: &mut LinearAdapter, p: usize) -> &mut f64 {
    let n = a.weight.len();
    if p < n {
        &mut a.weight[p]
    } else {
        &mut a.bias[p - n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub params_checked: usize,
    pub pass: bool,
}

/// Compares analytic weight and bias gradients with central differences of
/// step [`GRADCHECK_STEP`]. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(
    adapter: &LinearAdapter,
    batch: &[TrainingPair],
    kb: &KnowledgeBase,
    config: &TrainConfig,
) -> Result<GradCheckReport> {
    let objective = config.objective()?;
    adapter.check_finite()?;
    let refs: Vec<&TrainingPair> = batch.iter().collect();
    let analytic = batch_gradient(adapter, &refs, kb, objective)?;

    let mut probe = adapter.clone();
    let h = GRADCHECK_STEP;
    let n_weight = adapter.weight.len();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let total = adapter.param_count();
    for p in 0..total {
        let original = *param_mut(&mut probe, p);
        *param_mut(&mut probe, p) = original + h;
        let plus = batch_gradient(&probe, &refs, kb, objective)?.excess;
        *param_mut(&mut probe, p) = original - h;
        let minus = batch_gradient(&probe, &refs, kb, objective)?.excess;
        *param_mut(&mut probe, p) = original;

        let numeric = (plus - minus) / (2.0 * h);
        let exact = if p < n_weight {
            analytic.weight[p]
        } else {
            analytic.bias[p - n_weight]
        };
        let abs = (exact - numeric).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if !rel.is_finite() {
            return Err(Error::NonFinite("finite-difference gradient".into()));
        }
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        params_checked: total,
        pass: max_rel < GRADCHECK_TOLERANCE,
    })
}

/// A random adapter, knowledge base and batch for standalone gradient checks.
pub fn random_gradcheck_setup(
    dim_in: usize,
    dim_out: usize,
    batch: usize,
    seed: u64,
) -> Result<(LinearAdapter, Vec<TrainingPair>, KnowledgeBase)> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    if batch < 2 {
        return Err(Error::DegenerateBatch("batch must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapter = LinearAdapter::random("gradcheck", dim_in, dim_out, &mut rng);
    adapter
        .bias
        .iter_mut()
        .for_each(|b| *b = 0.1 * rng.sample::<f64, _>(StandardNormal));

    let mut records = Vec::with_capacity(batch);
    let mut text = Vec::with_capacity(batch * dim_out);
    let mut pairs = Vec::with_capacity(batch);
    for i in 0..batch {
        let id = format!("sample-{i}");
        records.push(KnowledgeRecord {
            id: id.clone(),
            category: format!("c{}", i % 3),
            description: String::new(),
            source: Source::MllmData,
            generator: None,
        });
        text.extend((0..dim_out).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let v: Vec<f64> = (0..dim_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        pairs.push(TrainingPair {
            sample_id: id,
            visual_embedding: Embedding::new(crate::embedding::normalize(&v)?)?,
            text_row: i,
        });
    }
    let kb = KnowledgeBase::from_parts(records, EmbeddingMatrix::new(dim_out, text, None)?)?;
    Ok((adapter, pairs, kb))
}
