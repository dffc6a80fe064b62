//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TCRGCKPT"
//! 8       4     u32 format version (1)
//! 12      8     u64 header length H
//! 20      H     UTF-8 JSON header: model config, vocabulary, descriptor
//!               table SHA-256, optimizer step (or null)
//! 20+H    4     u32 tensor count N
//!               N records of:
//!                 u32 name length, name bytes (UTF-8)
//!                 u32 rank R, R x u64 dims
//!                 prod(dims) x f64
//! ```
//!
//! Model tensors use their parameter names (`fusion.gate.weight`, ...).
//! Optimizer moments, when present, follow as `optim.m.<name>` and
//! `optim.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::{Parameters, Tensor};
use crate::train::AdamState;
use crate::vocab;

pub const MAGIC: &[u8; 8] = b"TCRGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocabulary: Vec<String>,
    pub descriptor_sha256: String,
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(
    params: &ModelParams,
    optimizer: Option<&AdamState>,
    descriptor_sha256: &str,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: params.config.clone(),
        vocabulary: vocab::SYMBOLS.iter().map(|s| s.to_string()).collect(),
        descriptor_sha256: descriptor_sha256.to_string(),
        optimizer_step: optimizer.map(|s| s.step),
    };
    let json = serde_json::to_vec(&header)?;
    let named = params.named_tensors();
    let mut out = Vec::with_capacity(64 + json.len() + 8 * params.num_params() * 3);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let n_opt = if optimizer.is_some() { 2 * named.len() } else { 0 };
    put_u32(&mut out, (named.len() + n_opt) as u32);
    for (name, t) in &named {
        put_tensor(&mut out, name, &t.shape, &t.data);
    }
    if let Some(state) = optimizer {
        if state.m.len() != named.len() || state.v.len() != named.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (kind, moments) in [("m", &state.m), ("v", &state.v)] {
            for ((name, t), data) in named.iter().zip(moments.iter()) {
                put_tensor(&mut out, &format!("optim.{kind}.{name}"), &t.shape, data);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor { shape, data }))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
    if header.vocabulary.iter().map(String::as_str).ne(vocab::SYMBOLS.iter().copied()) {
        return Err(Error::Checkpoint("vocabulary differs from this build".into()));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(r.tensor()?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let mut params = ModelParams::init(&header.model)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named_tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
    let n = expected.len();
    let with_opt = header.optimizer_step.is_some();
    if count != if with_opt { 3 * n } else { n } {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", if with_opt { 3 * n } else { n })));
    }
    let check = |i: usize, prefix: &str, rec: &(String, Tensor)| -> Result<()> {
        let (name, shape) = &expected[i];
        let want = format!("{prefix}{name}");
        if rec.0 != want {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {}", rec.0)));
        }
        if &rec.1.shape != shape {
            return Err(Error::ShapeMismatch { name: want, expected: shape.clone(), found: rec.1.shape.clone() });
        }
        Ok(())
    };
    for (i, rec) in records[..n].iter().enumerate() {
        check(i, "", rec)?;
    }
    let mut i = 0;
    params.visit_mut("", &mut |_, t| {
        t.data.clone_from(&records[i].1.data);
        i += 1;
    });
    let optimizer = match header.optimizer_step {
        Some(step) => {
            for (i, rec) in records[n..2 * n].iter().enumerate() {
                check(i, "optim.m.", rec)?;
            }
            for (i, rec) in records[2 * n..].iter().enumerate() {
                check(i, "optim.v.", rec)?;
            }
            Some(AdamState {
                step,
                m: records[n..2 * n].iter().map(|r| r.1.data.clone()).collect(),
                v: records[2 * n..].iter().map(|r| r.1.data.clone()).collect(),
            })
        }
        None => None,
    };
    Ok(Checkpoint { header, params, optimizer })
}

pub fn save(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&AdamState>,
    descriptor_sha256: &str,
) -> Result<()> {
    let bytes = to_bytes(params, optimizer, descriptor_sha256)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
