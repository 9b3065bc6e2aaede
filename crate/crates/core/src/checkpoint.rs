//! Binary checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "SHAQCKPT"  u32 version  u8 scalar-bytes
//! u64 len, model config JSON
//! u64 count, then per parameter:
//!     u32 len, name   u32 ndim   u64 dims..   raw values
//! u8 has-optimizer
//!     u64 len, optimizer config JSON   u64 step
//!     per parameter, in order: raw m, raw v
//! u64 len, trainer state JSON
//! ```

use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{OptimConfig, Optimizer};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"SHAQCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<Optimizer<T>>,
    pub trainer: Value,
}

impl<T: Float> Checkpoint<T> {
    /// Copies parameters into `store` by name; every registered parameter
    /// must be present with a matching shape.
    pub fn restore_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_values<T: Float>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Float>(
    config: &ModelConfig,
    store: &ParamStore<T>,
    optimizer: Option<&Optimizer<T>>,
    trainer: &Value,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::BYTES as u8);
    put_blob(&mut out, serde_json::to_string(config)?.as_bytes());
    put_u64(&mut out, store.len() as u64);
    for (_, name, t) in store.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_values(&mut out, t);
    }
    match optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            put_blob(&mut out, serde_json::to_string(&opt.config)?.as_bytes());
            put_u64(&mut out, opt.step);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_values(&mut out, m);
                put_values(&mut out, v);
            }
        }
    }
    put_blob(&mut out, serde_json::to_string(trainer)?.as_bytes());
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save<T: Float>(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore<T>,
    optimizer: Option<&Optimizer<T>>,
    trainer: &Value,
) -> Result<()> {
    let bytes = encode(config, store, optimizer, trainer)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    /// Reads `n` stored scalars of width `width`, converting to `T`.
    fn values<T: Float>(&mut self, n: usize, width: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(match width {
            w if w == T::BYTES => raw.chunks_exact(w).map(T::read_le).collect(),
            4 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            8 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
            w => return Err(Error::Checkpoint(format!("unsupported scalar width {w}"))),
        })
    }
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = r.u8()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.blob()?)?;
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = r.values(n, width)?;
        params.push((name, Tensor::new(&shape, data)?));
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let config: OptimConfig = serde_json::from_slice(r.blob()?)?;
            let step = r.u64()?;
            let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
            for (_, p) in &params {
                m.push(Tensor::new(p.shape(), r.values(p.len(), width)?)?);
                v.push(Tensor::new(p.shape(), r.values(p.len(), width)?)?);
            }
            Some(Optimizer { config, m, v, step })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    let trainer = serde_json::from_slice(r.blob()?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, params, optimizer, trainer })
}

pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
