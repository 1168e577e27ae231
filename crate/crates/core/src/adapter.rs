//! Per-modality affine adapters from frozen backbone space into the shared
//! text-anchored space.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_norm, EmbeddingMatrix, ZERO_NORM};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ubem;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter {
    pub modality: String,
    dim_in: usize,
    dim_out: usize,
    /// Row-major `dim_out x dim_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearAdapter {
    pub fn new(
        modality: impl Into<String>,
        dim_in: usize,
        dim_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::InvalidArgument("adapter dims must be >= 1".into()));
        }
        if weight.len() != dim_in * dim_out {
            return Err(Error::DimensionMismatch {
                expected: dim_in * dim_out,
                found: weight.len(),
            });
        }
        if bias.len() != dim_out {
            return Err(Error::DimensionMismatch {
                expected: dim_out,
                found: bias.len(),
            });
        }
        Ok(LinearAdapter {
            modality: modality.into(),
            dim_in,
            dim_out,
            weight,
            bias,
        })
    }

    pub fn identity(modality: impl Into<String>, dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        LinearAdapter {
            modality: modality.into(),
            dim_in: dim,
            dim_out: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Gaussian weights with variance `1 / dim_in`, zero bias.
    pub fn random<R: Rng>(modality: impl Into<String>, dim_in: usize, dim_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim_in as f64).sqrt();
        let weight = (0..dim_in * dim_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        LinearAdapter {
            modality: modality.into(),
            dim_in,
            dim_out,
            weight,
            bias: vec![0.0; dim_out],
        }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.weight.iter().chain(&self.bias).all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("adapter {:?} parameters", self.modality)))
        }
    }

    /// `weight . v + bias`, unnormalized.
    pub fn forward(&self, v: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.dim_in).zip(&self.bias))
        {
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(v) {
                acc += w * x;
            }
            *o = acc + b;
        }
    }

    /// Maps every row and rescales it to unit norm. Labels are kept.
    pub fn apply(&self, visual: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if visual.dim() != self.dim_in {
            return Err(Error::DimensionMismatch {
                expected: self.dim_in,
                found: visual.dim(),
            });
        }
        self.check_finite()?;
        let mut data = vec![0.0; visual.rows() * self.dim_out];
        for (i, (v, out)) in visual.iter_rows().zip(data.chunks_exact_mut(self.dim_out)).enumerate() {
            self.forward(v, out);
            let n = l2_norm(out);
            if n.is_nan() || n < ZERO_NORM {
                return Err(Error::ZeroVector { row: Some(i) });
            }
            out.iter_mut().for_each(|x| *x /= n);
        }
        EmbeddingMatrix::new(self.dim_out, data, visual.labels().map(<[String]>::to_vec))
    }
}

const FORMAT_TAG: &str = "unibind-adapter";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    modality: String,
    dim_in: usize,
    dim_out: usize,
}

/// JSON header line, then the weight as a `dim_out x dim_in` UBEM blob,
/// then the bias as a single-row UBEM blob. Parameters are stored as f32.
pub fn to_bytes(adapter: &LinearAdapter) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: 1,
        modality: adapter.modality.clone(),
        dim_in: adapter.dim_in,
        dim_out: adapter.dim_out,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    ubem::write(
        &mut out,
        &EmbeddingMatrix::new(adapter.dim_in, adapter.weight.clone(), None)?,
    )?;
    ubem::write(
        &mut out,
        &EmbeddingMatrix::new(adapter.dim_out, adapter.bias.clone(), None)?,
    )?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<LinearAdapter> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("adapter file has no header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT_TAG || header.version != 1 {
        return Err(Error::Format(format!(
            "not an adapter file ({} v{})",
            header.format, header.version
        )));
    }
    let mut rest = &bytes[split + 1..];
    let weight = ubem::read(&mut rest)?;
    let bias = ubem::read(&mut rest)?;
    if weight.rows() != header.dim_out || weight.dim() != header.dim_in {
        return Err(Error::Format("weight block does not match header dims".into()));
    }
    if bias.rows() != 1 || bias.dim() != header.dim_out {
        return Err(Error::Format("bias block does not match header dims".into()));
    }
    LinearAdapter::new(
        header.modality,
        header.dim_in,
        header.dim_out,
        weight.data().to_vec(),
        bias.data().to_vec(),
    )
}

pub fn save(path: impl AsRef<Path>, adapter: &LinearAdapter) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(adapter)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<LinearAdapter> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
