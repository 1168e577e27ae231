//! In-batch InfoNCE between adapted sample embeddings and their paired text
//! embeddings.
//!
//! Row `i` of `adapted` is matched with row `i` of `texts`; every other text
//! row in the batch is a negative. With `s_ij = adapted_i . texts_j` and
//! logits `x_ij = s_ij / temperature`,
//!
//! ```text
//! loss = mean_i [ logsumexp_j(x_ij) - x_ii ]
//! ```
//!
//! The symmetric variant averages this with the same loss taken over
//! columns (text to sample).

use crate::embedding::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNce {
    pub temperature: f64,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// `loss - ln(B)`, evaluated without cancellation. Differences of this
    /// quantity are accurate even when every logit is nearly equal.
    pub excess: f64,
    /// `d loss / d adapted`, row-major `B x d`.
    pub grad: Vec<f64>,
}

struct Direction {
    loss: f64,
    excess: f64,
}

impl InfoNce {
    pub fn new(temperature: f64, symmetric: bool) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        Ok(InfoNce { temperature, symmetric })
    }

    /// Loss and gradient over `batch` rows of width `dim` (row-major slices).
    pub fn evaluate(&self, adapted: &[f64], texts: &[f64], batch: usize, dim: usize) -> ContrastiveOutput {
        debug_assert_eq!(adapted.len(), batch * dim);
        debug_assert_eq!(texts.len(), batch * dim);
        let b = batch;
        let inv_t = 1.0 / self.temperature;
        let mut logits = vec![0.0; b * b];
        for i in 0..b {
            let a = &adapted[i * dim..(i + 1) * dim];
            for j in 0..b {
                logits[i * b + j] = dot(a, &texts[j * dim..(j + 1) * dim]) * inv_t;
            }
        }

        // coefficient of each logit in d loss / d x
        let mut coeff = vec![0.0; b * b];
        let weight = if self.symmetric { 0.5 } else { 1.0 };
        let rows = softmax_ce(&logits, b, false, weight, &mut coeff);
        let (loss, excess) = if self.symmetric {
            let cols = softmax_ce(&logits, b, true, weight, &mut coeff);
            (0.5 * (rows.loss + cols.loss), 0.5 * (rows.excess + cols.excess))
        } else {
            (rows.loss, rows.excess)
        };

        let mut grad = vec![0.0; b * dim];
        for i in 0..b {
            let g = &mut grad[i * dim..(i + 1) * dim];
            for j in 0..b {
                let c = coeff[i * b + j] * inv_t;
                if c == 0.0 {
                    continue;
                }
                for (gk, tk) in g.iter_mut().zip(&texts[j * dim..(j + 1) * dim]) {
                    *gk += c * tk;
                }
            }
        }
        ContrastiveOutput { loss, excess, grad }
    }
}

/// Mean cross-entropy with the diagonal as target, over rows or (when
/// `transpose`) columns of the `b x b` logit table. Adds
/// `weight * (softmax - onehot) / b` into `coeff`.
fn softmax_ce(logits: &[f64], b: usize, transpose: bool, weight: f64, coeff: &mut [f64]) -> Direction {
    let at = |i: usize, j: usize| if transpose { j * b + i } else { i * b + j };
    let mut loss = 0.0;
    let mut excess = 0.0;
    let mut probs = vec![0.0; b];
    for i in 0..b {
        let mut m = f64::NEG_INFINITY;
        for j in 0..b {
            m = m.max(logits[at(i, j)]);
        }
        let mut sum = 0.0;
        let mut sum_m1 = 0.0;
        for j in 0..b {
            let z = logits[at(i, j)] - m;
            probs[j] = z.exp();
            sum += probs[j];
            sum_m1 += z.exp_m1();
        }
        let diag = logits[at(i, i)];
        loss += (m - diag) + sum.ln();
        // sum = b + sum_m1
        excess += (m - diag) + (sum_m1 / b as f64).ln_1p();
        for j in 0..b {
            let target = if i == j { 1.0 } else { 0.0 };
            coeff[at(i, j)] += weight * (probs[j] / sum - target) / b as f64;
        }
    }
    Direction {
        loss: loss / b as f64,
        excess: excess / b as f64,
    }
}

fn check_pair(adapted: &EmbeddingMatrix, texts: &EmbeddingMatrix) -> Result<()> {
    if adapted.dim() != texts.dim() {
        return Err(Error::DimensionMismatch {
            expected: adapted.dim(),
            found: texts.dim(),
        });
    }
    if adapted.rows() != texts.rows() {
        return Err(Error::DimensionMismatch {
            expected: adapted.rows(),
            found: texts.rows(),
        });
    }
    if adapted.rows() < 2 {
        return Err(Error::DegenerateBatch("a batch needs at least two pairs".into()));
    }
    Ok(())
}

/// One-directional InfoNCE over row-normalized matrices. Returns the mean
/// loss and its gradient with respect to `adapted` (row-major).
pub fn info_nce_loss(adapted: &EmbeddingMatrix, texts: &EmbeddingMatrix, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let out = info_nce(adapted, texts, InfoNce::new(temperature, false)?)?;
    Ok((out.loss, out.grad))
}

pub fn info_nce(adapted: &EmbeddingMatrix, texts: &EmbeddingMatrix, objective: InfoNce) -> Result<ContrastiveOutput> {
    InfoNce::new(objective.temperature, objective.symmetric)?;
    check_pair(adapted, texts)?;
    Ok(objective.evaluate(adapted.data(), texts.data(), adapted.rows(), adapted.dim()))
}
