//! The `UBEM` binary embedding-matrix format.
//!
//! ```text
//! magic    4 bytes  "UBEM"
//! version  u16      1
//! flags    u16      reserved, written as 0
//! dim      u32
//! rows     u64
//! data     rows * dim f32, row-major
//! labels   u8 present flag, then `rows` x (u32 byte length, UTF-8 bytes)
//! ```
//!
//! All integers and floats are little-endian. Readers accept a file that
//! ends right after the data block as unlabeled.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"UBEM";
pub const VERSION: u16 = 1;

fn stream_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("UBEM stream truncated".into())
    } else {
        Error::io("<stream>", e)
    }
}

pub fn write<W: Write>(mut w: W, m: &EmbeddingMatrix) -> Result<()> {
    let dim = u32::try_from(m.dim()).map_err(|_| Error::Format(format!("dim {} exceeds u32", m.dim())))?;
    let mut buf = Vec::with_capacity(21 + m.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    for &x in m.data() {
        let v = x as f32;
        if !v.is_finite() {
            return Err(Error::NonFinite("value out of f32 range".into()));
        }
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match m.labels() {
        Some(labels) => {
            buf.push(1);
            for l in labels {
                let len =
                    u32::try_from(l.len()).map_err(|_| Error::Format("label longer than u32::MAX bytes".into()))?;
                buf.extend_from_slice(&len.to_le_bytes());
                buf.extend_from_slice(l.as_bytes());
            }
        }
        None => buf.push(0),
    }
    w.write_all(&buf).map_err(stream_err)
}

pub fn to_bytes(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write(&mut out, m)?;
    Ok(out)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(stream_err)?;
    Ok(b)
}

pub fn read<R: Read>(mut r: R) -> Result<EmbeddingMatrix> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported UBEM version {version}")));
    }
    let _flags = u16::from_le_bytes(read_array(&mut r)?);
    let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let rows = u64::from_le_bytes(read_array(&mut r)?);
    let rows = usize::try_from(rows).map_err(|_| Error::Format("row count overflow".into()))?;
    let count = rows
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("rows * dim overflow".into()))?;

    let mut raw = Vec::new();
    (&mut r)
        .take(count as u64 * 4)
        .read_to_end(&mut raw)
        .map_err(stream_err)?;
    if raw.len() != count * 4 {
        return Err(Error::Format("UBEM payload truncated".into()));
    }
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut flag = [0u8; 1];
    let present = match r.read(&mut flag).map_err(stream_err)? {
        0 => false,
        _ => match flag[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad label flag {other}"))),
        },
    };
    let labels = if present {
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let mut bytes = Vec::new();
            (&mut r).take(len as u64).read_to_end(&mut bytes).map_err(stream_err)?;
            if bytes.len() != len {
                return Err(Error::Format("label truncated".into()));
            }
            labels.push(String::from_utf8(bytes).map_err(|_| Error::Format("label is not UTF-8".into()))?);
        }
        Some(labels)
    } else {
        None
    };
    if dim == 0 {
        return Err(Error::Format("dim must be >= 1".into()));
    }
    EmbeddingMatrix::new(dim, data, labels)
}

pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read(bytes.as_slice()).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(m)?)
}
