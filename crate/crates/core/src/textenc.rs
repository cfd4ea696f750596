//! Initial text-node feature vectors.
//!
//! Production runs load precomputed sentence embeddings from an `EMB1` file.
//! [`hash_encode`] is a deterministic bag-of-words stand-in used by tests and
//! by `ingest` when no embedding file is supplied.
//!
//! `EMB1` layout: magic, `u32` dim, `u64` count, then `count * dim`
//! little-endian `f32` values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GastonError, Result};
use crate::numerics::Tensor2;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// Dense row-major `f32` matrix, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(GastonError::arg("embedding dim must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(GastonError::arg(format!(
                "{} values is not a whole number of {dim}-dim rows",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(GastonError::Data(format!(
                "non-finite value in row {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(EmbeddingTable { dim, data })
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = Vec<f32>>) -> Result<Self> {
        let mut data = Vec::new();
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != dim {
                return Err(GastonError::arg(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            data.extend(r);
        }
        Self::new(dim, data)
    }

    pub fn from_tensor(t: &Tensor2) -> Result<Self> {
        Self::new(t.cols(), t.to_f32())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor2 {
        Tensor2::from_f32(self.count(), self.dim, &self.data).expect("shape is consistent")
    }

    /// Rows `idx` widened to `f64`.
    pub fn gather(&self, idx: &[usize]) -> Tensor2 {
        let mut t = Tensor2::zeros(idx.len(), self.dim);
        for (i, &j) in idx.iter().enumerate() {
            for (o, &x) in t.row_mut(i).iter_mut().zip(self.row(j)) {
                *o = f64::from(x);
            }
        }
        t
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        let dim = u32::try_from(self.dim).map_err(|_| GastonError::arg("dim exceeds u32"))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.count() as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| GastonError::Format("missing embedding magic".into()))?;
        if &magic != EMBEDDING_MAGIC {
            return Err(GastonError::Format(format!("bad embedding magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| GastonError::Format("truncated embedding header".into()))?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|_| GastonError::Format("truncated embedding header".into()))?;
        let count = u64::from_le_bytes(b8) as usize;
        if dim == 0 {
            return Err(GastonError::Format("embedding dim is zero".into()));
        }

        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| GastonError::Format("embedding header overflows".into()))?;
        if bytes.len() != expected {
            return Err(GastonError::Format(format!(
                "header declares {count} rows of dim {dim} ({expected} bytes) but payload has {} bytes",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path)
}

// FNV-1a, 64-bit. Stable across platforms and toolchains, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing of lowercased alphanumeric tokens, L2-normalized.
/// Returns the zero vector for token-free input.
pub fn hash_encode(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 8, "hash_encode needs dim >= 8");
    let mut acc = vec![0.0f64; dim];
    for tok in tokenize(text) {
        let h = fnv1a(tok.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    acc.iter().map(|x| (x / norm) as f32).collect()
}

pub fn encode_texts<S: AsRef<str>>(texts: &[S], dim: usize) -> Result<EmbeddingTable> {
    if dim < 8 {
        return Err(GastonError::arg("hash encoding needs dim >= 8"));
    }
    EmbeddingTable::from_rows(dim, texts.iter().map(|t| hash_encode(t.as_ref(), dim)))
}
