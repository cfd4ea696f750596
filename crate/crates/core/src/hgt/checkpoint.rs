//! `HGTP` parameter checkpoints.
//!
//! ```text
//! "HGTP" | u32 version | u64 d layers heads d_in[3] | u64 tensor_count
//! per tensor: u32 name_len | name (utf-8) | u64 rows | u64 cols | f32 * rows * cols
//! ```
//!
//! Integers and floats are little-endian. Encoder tensors come first in
//! [`Weights::flat`] order; any further named tensors follow.

use std::io::{Read, Write};

use crate::error::{GastonError, Result};
use crate::hgt::{HgtConfig, HgtParams, Weights};
use crate::numerics::Tensor2;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HGTP";
const VERSION: u32 = 1;

/// Encoder parameters plus extra named tensors such as the trained
/// community matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HgtParams,
    pub extras: Vec<(String, Tensor2)>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor2> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_u64<W: Write>(w: &mut W, x: usize) -> Result<()> {
    w.write_all(&(x as u64).to_le_bytes())?;
    Ok(())
}

fn put_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor2) -> Result<()> {
    let len = u32::try_from(name.len()).map_err(|_| GastonError::arg("tensor name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    put_u64(w, t.rows())?;
    put_u64(w, t.cols())?;
    for x in t.to_f32() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, mut w: W) -> Result<()> {
    let c = &ck.params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for x in [c.d, c.layers, c.heads, c.d_in[0], c.d_in[1], c.d_in[2]] {
        put_u64(&mut w, x)?;
    }
    let names = ck.params.names();
    put_u64(&mut w, names.len() + ck.extras.len())?;
    for (name, t) in names.iter().zip(ck.params.weights.flat()) {
        put_tensor(&mut w, name, t)?;
    }
    for (name, t) in &ck.extras {
        put_tensor(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(GastonError::Format(format!("truncated checkpoint reading {what}")));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| GastonError::Format(format!("{what} {v} does not fit in memory")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor2)> {
        let len = self.u32("tensor name length")? as usize;
        let name = String::from_utf8(self.bytes(len, "tensor name")?)
            .map_err(|_| GastonError::Format("tensor name is not utf-8".into()))?;
        let rows = self.u64("tensor rows")?;
        let cols = self.u64("tensor cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| GastonError::Format(format!("tensor {name} shape overflows")))?;
        let raw = self.bytes(n, &name)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(GastonError::Data(format!("tensor {name} has non-finite entries")));
        }
        Ok((name, Tensor2::from_f32(rows, cols, &data)?))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut rd = Reader { inner: r };
    if rd.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(GastonError::Format("bad checkpoint magic".into()));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(GastonError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut h = [0usize; 6];
    for x in &mut h {
        *x = rd.u64("config header")?;
    }
    let config = HgtConfig {
        d: h[0],
        layers: h[1],
        heads: h[2],
        d_in: [h[3], h[4], h[5]],
    };
    config.validate().map_err(|e| GastonError::Format(format!("checkpoint header: {e}")))?;
    let count = rd.u64("tensor count")?;
    let names = Weights::<()>::names(config.layers);
    if count < names.len() {
        return Err(GastonError::Format(format!(
            "checkpoint holds {count} tensors, the encoder needs {}",
            names.len()
        )));
    }
    let mut weights = Vec::with_capacity(names.len());
    for want in &names {
        let (name, t) = rd.tensor()?;
        if &name != want {
            return Err(GastonError::Format(format!("expected tensor {want}, found {name}")));
        }
        weights.push(t);
    }
    let mut extras = Vec::new();
    for _ in names.len()..count {
        extras.push(rd.tensor()?);
    }
    let mut rest = [0u8; 1];
    if rd.inner.read(&mut rest)? != 0 {
        return Err(GastonError::Format("trailing bytes after checkpoint".into()));
    }
    let params = HgtParams::from_weights(config, Weights::from_flat(h[1], weights)?)
        .map_err(|e| GastonError::Format(format!("checkpoint tensors: {e}")))?;
    Ok(Checkpoint { params, extras })
}
