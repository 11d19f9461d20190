//! `HSCK` checkpoint container.
//!
//! ```text
//! "HSCK" | u32 version | u32 len | JSON metadata | u32 count |
//!   count × (u32 name_len | name | u8 dtype | u32 ndim | ndim × u32 | payload)
//! ```
//! Tensors are written in name order; all integers and payloads are
//! little-endian. dtype codes: 0 = f32, 1 = u8, 2 = f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{ArchitectureConfig, ModelParams, ParamSet, Partition};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
    F64(Tensor<f64>),
}

impl StoredTensor {
    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => &t.shape,
            StoredTensor::U8 { shape, .. } => shape,
            StoredTensor::F64(t) => &t.shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            StoredTensor::F32(t) => Ok(t),
            _ => Err(Error::Format("expected an f32 tensor".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub arch: ArchitectureConfig,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub epoch: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(kind: &str, arch: &ArchitectureConfig) -> Self {
        CheckpointMeta { kind: kind.into(), arch: arch.clone(), step: 0, epoch: 0, extra: serde_json::Value::Null }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, StoredTensor>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let json = serde_json::to_vec(meta)?;
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        let code = match t {
            StoredTensor::F32(_) => 0u8,
            StoredTensor::U8 { .. } => 1,
            StoredTensor::F64(_) => 2,
        };
        buf.push(code);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        match t {
            StoredTensor::F32(t) => t.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::U8 { data, .. } => buf.extend_from_slice(data),
            StoredTensor::F64(t) => t.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("hsck.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, StoredTensor>)> {
    let mut raw = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &raw, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: not an HSCK checkpoint", path.display())));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("{}: unsupported checkpoint version {version}", path.display())));
    }
    let len = cur.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let count = cur.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nl = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nl)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let code = cur.take(1)?[0];
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let t = match code {
            0 => {
                let b = cur.take(4 * n)?;
                let data = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                StoredTensor::F32(Tensor { shape, data })
            }
            1 => StoredTensor::U8 { data: cur.take(n)?.to_vec(), shape },
            2 => {
                let b = cur.take(8 * n)?;
                let data = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                StoredTensor::F64(Tensor { shape, data })
            }
            other => return Err(Error::Format(format!("tensor {name}: unknown dtype code {other}"))),
        };
        tensors.insert(name, t);
    }
    if cur.pos != raw.len() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok((meta, tensors))
}

/// Prefix every tensor of `set` with `prefix` into `out`.
pub fn stash(out: &mut BTreeMap<String, StoredTensor>, prefix: &str, set: &ParamSet<f32>) {
    for (k, p) in set.iter() {
        out.insert(format!("{prefix}{k}"), StoredTensor::F32(p.tensor.clone()));
    }
}

/// Collect tensors under `prefix` back into a parameter set, stripping it.
pub fn unstash(tensors: &BTreeMap<String, StoredTensor>, prefix: &str) -> Result<ParamSet<f32>> {
    let mut set = ParamSet::new();
    for (k, t) in tensors.range(prefix.to_string()..) {
        let Some(rest) = k.strip_prefix(prefix) else { break };
        let tag = Partition::of_name(rest).ok_or_else(|| Error::Format(format!("tensor {k}: unknown partition")))?;
        set.insert(rest, tag, t.clone().into_f32()?);
    }
    Ok(set)
}

pub fn save_model(path: &Path, model: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = BTreeMap::new();
    stash(&mut tensors, "", &model.params);
    write_checkpoint(path, meta, &tensors)
}

/// Load a plain model checkpoint, or the student of an SSL checkpoint.
pub fn load_model(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path)?;
    let prefix = if tensors.keys().any(|k| k.starts_with("student/")) { "student/" } else { "" };
    let params = if prefix.is_empty() {
        let mut set = ParamSet::new();
        for (k, t) in &tensors {
            if let Some(tag) = Partition::of_name(k).filter(|t| *t != Partition::Projector) {
                set.insert(k.clone(), tag, t.clone().into_f32()?);
            }
        }
        set
    } else {
        unstash(&tensors, prefix)?
    };
    let model = ModelParams { cfg: meta.arch.clone(), params };
    model.validate()?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ArchitectureConfig::default();
        let m = build_model(&cfg, &mut rng_from_seed(1)).unwrap();
        let mut meta = CheckpointMeta::new("finetune", &cfg);
        meta.step = 42;
        let path = dir.path().join("m.hsck");
        save_model(&path, &m, &meta).unwrap();
        let (back, meta2) = load_model(&path).unwrap();
        assert_eq!(meta2, meta);
        for ((a, pa), (b, pb)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert!(pa.tensor.data.iter().zip(&pb.tensor.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let bytes1 = fs::read(&path).unwrap();
        save_model(&path, &back, &meta2).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn mixed_dtypes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.hsck");
        let mut t = BTreeMap::new();
        t.insert("a".into(), StoredTensor::F64(Tensor::from_vec(&[2], vec![1.5, -0.25])));
        t.insert("b".into(), StoredTensor::U8 { shape: vec![3], data: vec![1, 2, 3] });
        let meta = CheckpointMeta::new("misc", &ArchitectureConfig::default());
        write_checkpoint(&path, &meta, &t).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap().1, t);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hsck");
        fs::write(&path, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }
}
