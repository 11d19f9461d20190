//! Dataset manifests: `case_id,image_path,mask_path,modality,split`.
//!
//! Paths are stored relative to the manifest's directory so that a dataset
//! directory can be moved or regenerated elsewhere without changing bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{self, Modality, SegmentationMask, Volume3D};

pub const MANIFEST_HEADER: [&str; 5] = ["case_id", "image_path", "mask_path", "modality", "split"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub image_path: String,
    /// Empty for unlabeled cases.
    pub mask_path: String,
    pub modality: Modality,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            rows,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Format(format!("manifest header {header:?} != {MANIFEST_HEADER:?}")));
        }
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { rows, base_dir })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Load and normalize the image of `row`; the manifest's modality wins
    /// over whatever the file header says.
    pub fn load_image(&self, row: &ManifestRow) -> Result<Volume3D> {
        let mut v = volio::load_volume(self.resolve(&row.image_path))?;
        v.modality = row.modality;
        v.case_id = row.case_id.clone();
        Ok(volio::normalize_intensity(&v))
    }

    pub fn load_labeled(&self, row: &ManifestRow) -> Result<(Volume3D, SegmentationMask)> {
        if row.mask_path.is_empty() {
            return Err(Error::Data(format!("case {} has no mask", row.case_id)));
        }
        let v = self.load_image(row)?;
        let m = volio::load_mask(self.resolve(&row.mask_path))?;
        if !m.aligned_with(&v) {
            return Err(Error::Data(format!("mask of {} is not aligned with its image", row.case_id)));
        }
        Ok((v, m))
    }

    pub fn load_all_images(&self) -> Result<Vec<Volume3D>> {
        self.rows.iter().map(|r| self.load_image(r)).collect()
    }

    pub fn load_all_labeled(&self) -> Result<Vec<(Volume3D, SegmentationMask)>> {
        self.rows.iter().map(|r| self.load_labeled(r)).collect()
    }

    /// Rows whose case id is in `ids`, in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> Result<Manifest> {
        let rows = ids
            .iter()
            .map(|id| {
                self.rows
                    .iter()
                    .find(|r| &r.case_id == id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("case {id} not in manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest {
            rows,
            base_dir: self.base_dir.clone(),
        })
    }

    /// Concatenate manifests sharing a base directory.
    pub fn concat(parts: &[&Manifest]) -> Result<Manifest> {
        let base = parts.first().map(|m| m.base_dir.clone()).unwrap_or_default();
        let mut rows = Vec::new();
        for m in parts {
            if m.base_dir != base {
                return Err(Error::Data("cannot concatenate manifests from different directories".into()));
            }
            rows.extend(m.rows.iter().cloned());
        }
        Ok(Manifest { rows, base_dir: base })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_golden() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(
            vec![ManifestRow {
                case_id: "c0".into(),
                image_path: "c0_img.hsv".into(),
                mask_path: String::new(),
                modality: Modality::MR,
                split: "ssl".into(),
            }],
            dir.path(),
        );
        let p = dir.path().join("manifest.csv");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "case_id,image_path,mask_path,modality,split\nc0,c0_img.hsv,,MR,ssl\n");
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }

    #[test]
    fn missing_mask_is_data_error() {
        let m = Manifest::new(vec![], "/tmp");
        let row = ManifestRow {
            case_id: "x".into(),
            image_path: "x.hsv".into(),
            mask_path: String::new(),
            modality: Modality::CT,
            split: "l".into(),
        };
        assert!(matches!(m.load_labeled(&row), Err(Error::Data(_))));
    }
}
