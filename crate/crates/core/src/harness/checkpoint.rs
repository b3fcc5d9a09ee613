//! Binary model checkpoints.
//!
//! Layout, all integers little-endian: 8-byte magic, `u32` format version,
//! `u64`-prefixed JSON model config, `u32` tensor count, then per tensor a
//! `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims and `f64` data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transducer::{ModelConfig, TransducerModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for x in t.data() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn err(&self, detail: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("{}: {detail} at byte {}", self.what, self.pos))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| self.err("length overflow"))?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| self.err("name is not UTF-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(self.err(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.err("tensor too large"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }

    pub fn magic(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        if self.take(8).ok() != Some(&magic[..]) {
            return Err(Error::Checkpoint(format!("{}: bad magic", self.what)));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Checkpoint(format!("{}: unsupported format version {v} (expected {version})", self.what)));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

pub fn checkpoint_bytes(model: &TransducerModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&serde_json::to_vec(&model.config)?);
    w.u32(model.params.len() as u32);
    for (_, name, t) in model.params.iter() {
        w.str(name);
        w.tensor(t);
    }
    Ok(w.buf)
}

/// Rebuilds the model from its config and overwrites every parameter; names
/// and shapes must match exactly.
pub fn model_from_bytes(bytes: &[u8]) -> Result<TransducerModel> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
    let mut model = TransducerModel::new(config)?;
    let n = r.u32()? as usize;
    if n != model.params.len() {
        return Err(Error::Checkpoint(format!("{n} tensors stored, model has {}", model.params.len())));
    }
    let mut seen = vec![false; n];
    for _ in 0..n {
        let name = r.str()?.to_string();
        let t = r.tensor()?;
        let id = model.params.id_of(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
        }
        *slot = t;
    }
    r.finish()?;
    Ok(model)
}

pub fn save_checkpoint(model: &TransducerModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransducerModel> {
    model_from_bytes(&std::fs::read(path)?)
}
