//! `HSV1` raw container.
//!
//! ```text
//! "HSV1" | dtype u32 (0=f32, 1=u8) | dims u32×3 (D,H,W) | spacing f32×3
//!        | modality u8 (0=CT, 1=MR) | payload, little-endian, z-major
//! ```

use super::{check_geometry, numel, Modality};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"HSV1";
const HEADER_LEN: usize = 4 + 4 + 12 + 12 + 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RawPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawContainer {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub payload: RawPayload,
}

pub fn write_raw(payload: &RawPayload, dims: [usize; 3], spacing: [f32; 3], modality: Modality) -> Vec<u8> {
    let (code, elem) = match payload {
        RawPayload::F32(v) => (0u32, v.len() * 4),
        RawPayload::U8(v) => (1u32, v.len()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + elem);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&code.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(modality.code());
    match payload {
        RawPayload::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        RawPayload::U8(v) => out.extend_from_slice(v),
    }
    out
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub fn read_raw(bytes: &[u8]) -> Result<RawContainer> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("not an HSV1 container (bad magic or short header)".into()));
    }
    let code = u32_at(bytes, 4);
    let dims = [u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize];
    let spacing = [f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28)];
    let modality = Modality::from_code(bytes[32])?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("non-positive dims {dims:?}")));
    }
    let n = numel(dims);
    let body = &bytes[HEADER_LEN..];
    let payload = match code {
        0 => {
            if body.len() != n * 4 {
                return Err(Error::Format(format!("f32 payload has {} bytes, expected {}", body.len(), n * 4)));
            }
            RawPayload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        1 => {
            if body.len() != n {
                return Err(Error::Format(format!("u8 payload has {} bytes, expected {n}", body.len())));
            }
            RawPayload::U8(body.to_vec())
        }
        c => return Err(Error::Format(format!("unknown dtype code {c}"))),
    };
    check_geometry(dims, spacing, n)?;
    Ok(RawContainer {
        dims,
        spacing,
        modality,
        payload,
    })
}
