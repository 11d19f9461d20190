//! Minimal single-file NIfTI-1 (`.nii`), little-endian, index space only.
//!
//! Orientation (qform/sform) is ignored on read and written as unset.
//! NIfTI axis 1 (fastest) is our W, axis 3 is D, so the payload order is the
//! same z-major raster used everywhere else.

use super::{check_geometry, numel, Modality};
use crate::error::{Error, Result};

const HDR: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

pub struct NiftiPayload {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub values: Vec<f32>,
}

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn get_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Serialize either an f32 payload or, when `labels` is given, a uint8 one.
pub fn write_nifti(values: &[f32], labels: Option<&[u8]>, dims: [usize; 3], spacing: [f32; 3], modality: Modality) -> Vec<u8> {
    let (dtype, bitpix, bytes_per) = if labels.is_some() { (DT_UINT8, 8, 1) } else { (DT_FLOAT32, 32, 4) };
    let n = numel(dims);
    let mut out = vec![0u8; VOX_OFFSET + n * bytes_per];
    out[0..4].copy_from_slice(&(HDR as i32).to_le_bytes());
    out[38] = b'r';
    put_i16(&mut out, 40, 3);
    put_i16(&mut out, 42, dims[2] as i16);
    put_i16(&mut out, 44, dims[1] as i16);
    put_i16(&mut out, 46, dims[0] as i16);
    for i in 4..8 {
        put_i16(&mut out, 40 + 2 * i, 1);
    }
    put_i16(&mut out, 70, dtype);
    put_i16(&mut out, 72, bitpix);
    put_f32(&mut out, 76, 1.0);
    put_f32(&mut out, 80, spacing[2]);
    put_f32(&mut out, 84, spacing[1]);
    put_f32(&mut out, 88, spacing[0]);
    put_f32(&mut out, 108, VOX_OFFSET as f32);
    put_f32(&mut out, 112, 1.0);
    out[123] = 2; // xyzt_units: mm
    let descrip = format!("heartseg modality={modality}");
    out[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    out[344..348].copy_from_slice(b"n+1\0");
    let body = &mut out[VOX_OFFSET..];
    match labels {
        Some(l) => body.copy_from_slice(l),
        None => {
            for (chunk, v) in body.chunks_exact_mut(4).zip(values) {
                chunk.copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_nifti(bytes: &[u8]) -> Result<NiftiPayload> {
    if bytes.len() < HDR {
        return Err(Error::Format(format!("file too small for a NIfTI-1 header ({} bytes)", bytes.len())));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HDR as i32 {
        return Err(Error::Format(format!("unsupported header (sizeof_hdr={sizeof_hdr}; only little-endian NIfTI-1)")));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Format("only single-file NIfTI-1 (magic n+1) is supported".into()));
    }
    let ndim = get_i16(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0]={ndim} out of range")));
    }
    let mut d = [1i64; 7];
    for (i, slot) in d.iter_mut().enumerate().take(ndim as usize) {
        *slot = get_i16(bytes, 42 + 2 * i) as i64;
    }
    if d.iter().any(|&x| x <= 0) {
        return Err(Error::Format(format!("non-positive dims {:?}", &d[..ndim as usize])));
    }
    if d[3..].iter().any(|&x| x != 1) {
        return Err(Error::Format("only 3D volumes are supported".into()));
    }
    let dims = [d[2] as usize, d[1] as usize, d[0] as usize];
    let px = |i: usize| get_f32(bytes, 76 + 4 * i).abs();
    let spacing = [px(3), px(2), px(1)].map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    let dtype = get_i16(bytes, 70);
    let vox_offset = get_f32(bytes, 108);
    if !(vox_offset.is_finite() && vox_offset >= HDR as f32) {
        return Err(Error::Format(format!("bad vox_offset {vox_offset}")));
    }
    let off = vox_offset as usize;
    let slope = get_f32(bytes, 112);
    let inter = get_f32(bytes, 116);
    let n = numel(dims);
    let width = match dtype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
    };
    let body = bytes.get(off..).unwrap_or(&[]);
    if body.len() < n * width {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", body.len(), n * width)));
    }
    let body = &body[..n * width];
    let mut values: Vec<f32> = match dtype {
        DT_UINT8 => body.iter().map(|&b| b as f32).collect(),
        DT_INT8 => body.iter().map(|&b| b as i8 as f32).collect(),
        DT_INT16 => body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        DT_UINT16 => body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        DT_INT32 => body.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
        DT_FLOAT32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        _ => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    let descrip = String::from_utf8_lossy(&bytes[148..228]);
    let modality = if descrip.contains("modality=MR") { Modality::MR } else { Modality::CT };
    check_geometry(dims, spacing, values.len())?;
    Ok(NiftiPayload {
        dims,
        spacing,
        modality,
        values,
    })
}
