//! Volume and label-mask IO, intensity normalization, and patch extraction.
//!
//! Two on-disk layouts are supported: the `HSV1` raw container (bit-exact,
//! used for all golden tests) and minimal single-file NIfTI-1 (`.nii`). The
//! layout is chosen from the file extension on save and from the magic bytes
//! on load.

mod nifti;
pub mod raw;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::nifti::{read_nifti, write_nifti, NiftiPayload};
pub use self::raw::{read_raw, write_raw, RawPayload, RAW_MAGIC};

/// Number of labels in the cardiac label set, background included.
pub const NUM_CLASSES: usize = 7;

/// Label names indexed by label value.
pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["BG", "LV", "RV", "LA", "RA", "AO", "PA"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[default]
    CT,
    MR,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::CT => 0,
            Modality::MR => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::CT),
            1 => Ok(Modality::MR),
            c => Err(Error::Format(format!("unknown modality code {c}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::CT => "CT",
            Modality::MR => "MR",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CT" | "ct" => Ok(Modality::CT),
            "MR" | "mr" | "MRI" => Ok(Modality::MR),
            other => Err(Error::Format(format!("unknown modality {other:?}"))),
        }
    }
}

/// A 3D scalar volume, voxels in z-major `(D, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub voxels: Vec<f32>,
    pub dims: [usize; 3],
    /// Millimetres per voxel along (z, y, x).
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub case_id: String,
}

/// An integer label grid aligned with a [`Volume3D`].
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

pub(crate) fn numel(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

pub(crate) fn check_geometry(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("non-positive dims {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Format(format!("spacing must be positive, got {spacing:?}")));
    }
    if numel(dims) != len {
        return Err(Error::Format(format!(
            "payload has {len} voxels, dims {dims:?} need {}",
            numel(dims)
        )));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(
        voxels: Vec<f32>,
        dims: [usize; 3],
        spacing: [f32; 3],
        modality: Modality,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        check_geometry(dims, spacing, voxels.len())?;
        Ok(Volume3D {
            voxels,
            dims,
            spacing,
            modality,
            case_id: case_id.into(),
        })
    }

    pub fn filled(value: f32, dims: [usize; 3], spacing: [f32; 3], modality: Modality) -> Self {
        Volume3D {
            voxels: vec![value; numel(dims)],
            dims,
            spacing,
            modality,
            case_id: String::new(),
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Same geometry, new payload.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Self {
        debug_assert_eq!(voxels.len(), self.voxels.len());
        Volume3D {
            voxels,
            dims: self.dims,
            spacing: self.spacing,
            modality: self.modality,
            case_id: self.case_id.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.voxels
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.voxels.len() as f64
    }
}

impl SegmentationMask {
    pub fn new(labels: Vec<u8>, dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        check_geometry(dims, spacing, labels.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(SegmentationMask {
            labels,
            dims,
            spacing,
        })
    }

    pub fn empty(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        SegmentationMask {
            labels: vec![0; numel(dims)],
            dims,
            spacing,
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Binarized view of one class.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn aligned_with(&self, v: &Volume3D) -> bool {
        self.dims == v.dims && self.spacing == v.spacing
    }
}

fn is_nifti_path(path: &Path) -> bool {
    path.extension().map(|e| e == "nii").unwrap_or(false)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a volume from a raw container or a NIfTI-1 file. Intensities are
/// returned as stored; call [`normalize_intensity`] afterwards.
///
/// NIfTI carries no modality; it is read from a `modality=` tag in the
/// description field, defaulting to CT. Pipeline code overrides it from the
/// manifest.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let case_id = stem(path);
    if bytes.starts_with(RAW_MAGIC) {
        let raw = read_raw(&bytes)?;
        let voxels = match raw.payload {
            RawPayload::F32(v) => v,
            RawPayload::U8(v) => v.into_iter().map(f32::from).collect(),
        };
        Volume3D::new(voxels, raw.dims, raw.spacing, raw.modality, case_id)
    } else {
        let nii = read_nifti(&bytes)?;
        Volume3D::new(nii.values, nii.dims, nii.spacing, nii.modality, case_id)
    }
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_nifti_path(path) {
        write_nifti(&v.voxels, None, v.dims, v.spacing, v.modality)
    } else {
        write_raw(&RawPayload::F32(v.voxels.clone()), v.dims, v.spacing, v.modality)
    };
    write_bytes(path, &bytes)
}

/// Load a label mask; the payload must be integral and inside the label set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<SegmentationMask> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (dims, spacing, values): ([usize; 3], [f32; 3], Vec<f32>) = if bytes.starts_with(RAW_MAGIC) {
        let raw = read_raw(&bytes)?;
        match raw.payload {
            RawPayload::U8(labels) => return SegmentationMask::new(labels, raw.dims, raw.spacing),
            RawPayload::F32(v) => (raw.dims, raw.spacing, v),
        }
    } else {
        let nii = read_nifti(&bytes)?;
        (nii.dims, nii.spacing, nii.values)
    };
    let mut labels = Vec::with_capacity(values.len());
    for v in values {
        if v.fract() != 0.0 || !(0.0..NUM_CLASSES as f32).contains(&v) {
            return Err(Error::Format(format!("mask value {v} is not a label")));
        }
        labels.push(v as u8);
    }
    SegmentationMask::new(labels, dims, spacing)
}

/// Save a mask with `u8` payload. Masks carry no modality; `CT` is written.
pub fn save_mask(m: &SegmentationMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_nifti_path(path) {
        let values: Vec<f32> = m.labels.iter().map(|&l| l as f32).collect();
        write_nifti(&values, Some(&m.labels), m.dims, m.spacing, Modality::CT)
    } else {
        write_raw(&RawPayload::U8(m.labels.clone()), m.dims, m.spacing, Modality::CT)
    };
    write_bytes(path, &bytes)
}

/// Lower/upper CT window in Hounsfield units.
pub const CT_WINDOW: (f32, f32) = (-1000.0, 1000.0);
const MR_STD_FLOOR: f64 = 1e-8;

/// CT: clip to [`CT_WINDOW`], map affinely onto [-1, 1].
/// MR: z-score using mean/std of the nonzero voxels; zero (air) voxels stay 0.
/// Non-finite inputs become 0.
pub fn normalize_intensity(v: &Volume3D) -> Volume3D {
    let voxels = match v.modality {
        Modality::CT => {
            let (lo, hi) = CT_WINDOW;
            let half = (hi - lo) / 2.0;
            let mid = (hi + lo) / 2.0;
            v.voxels
                .iter()
                .map(|&x| {
                    if x.is_finite() {
                        (x.clamp(lo, hi) - mid) / half
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Modality::MR => {
            let nz = v.voxels.iter().filter(|x| x.is_finite() && **x != 0.0);
            let (mut n, mut sum) = (0usize, 0.0f64);
            for &x in nz.clone() {
                n += 1;
                sum += x as f64;
            }
            let mean = if n > 0 { sum / n as f64 } else { 0.0 };
            let var = if n > 0 {
                nz.map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64
            } else {
                0.0
            };
            let std = var.sqrt().max(MR_STD_FLOOR);
            v.voxels
                .iter()
                .map(|&x| {
                    if x.is_finite() && x != 0.0 {
                        ((x as f64 - mean) / std) as f32
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    v.with_voxels(voxels)
}

fn check_box(dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > dims[a] {
            return Err(Error::Bounds(format!(
                "patch origin {origin:?} size {size:?} exceeds dims {dims:?}"
            )));
        }
    }
    Ok(())
}

/// Copy the box `origin..origin+size` out of a z-major grid.
pub(crate) fn copy_box<T: Copy>(src: &[T], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(numel(size));
    for z in origin[0]..origin[0] + size[0] {
        for y in origin[1]..origin[1] + size[1] {
            let start = (z * dims[1] + y) * dims[2] + origin[2];
            out.extend_from_slice(&src[start..start + size[2]]);
        }
    }
    out
}

pub fn extract_patch(v: &Volume3D, origin: [usize; 3], size: [usize; 3]) -> Result<Volume3D> {
    check_box(v.dims, origin, size)?;
    Ok(Volume3D {
        voxels: copy_box(&v.voxels, v.dims, origin, size),
        dims: size,
        spacing: v.spacing,
        modality: v.modality,
        case_id: v.case_id.clone(),
    })
}

pub fn extract_mask_patch(m: &SegmentationMask, origin: [usize; 3], size: [usize; 3]) -> Result<SegmentationMask> {
    check_box(m.dims, origin, size)?;
    Ok(SegmentationMask {
        labels: copy_box(&m.labels, m.dims, origin, size),
        dims: size,
        spacing: m.spacing,
    })
}
