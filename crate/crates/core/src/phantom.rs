//! Synthetic labeled cardiac phantoms.
//!
//! Geometry lives in normalized coordinates `u ∈ [-1, 1]³` (voxel centers,
//! `(z, y, x)` order). Four rotated ellipsoids model the chambers (LV, RV,
//! LA, RA) and two circular tubes swept along quadratic Bézier curves model
//! the great vessels (AO leaving the LV, PA leaving the RV). Labels resolve by
//! priority `LV > RV > LA > RA > AO > PA`, so the atria are clipped by their
//! ventricles and share a boundary with them, and each vessel starts inside
//! its ventricle.
//!
//! The geometry stream and the noise stream are seeded separately from the
//! case seed, so the mask does not depend on the modality.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestRow};
use crate::rng::{rng_from_seed, split, Rng};
use crate::volio::{self, numel, Modality, SegmentationMask, Volume3D};

pub const MIN_DIM: usize = 16;

/// Per-structure random perturbation ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    /// Max absolute center offset per axis, normalized units.
    pub center: f64,
    /// Isotropic scale factor range.
    pub scale: [f64; 2],
    /// Max absolute rotation per axis, degrees.
    pub rotation_deg: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            center: 0.025,
            scale: [0.94, 1.06],
            rotation_deg: 8.0,
        }
    }
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            center: 0.0,
            scale: [1.0, 1.0],
            rotation_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub jitter: Jitter,
    /// Additive Gaussian noise, raw intensity units (HU for CT).
    pub noise_sigma: f64,
    /// Max deviation of the multiplicative bias field from 1.
    pub bias_amplitude: f64,
    /// Accepted class volume, as factors of the nominal (unjittered,
    /// unclipped) primitive volume.
    pub volume_band: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [32, 32, 32],
            spacing: [2.0, 2.0, 2.0],
            modality: Modality::CT,
            jitter: Jitter::default(),
            noise_sigma: 25.0,
            bias_amplitude: 0.05,
            volume_band: [0.35, 1.6],
        }
    }
}

type V3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: V3,
    pub axes: V3,
    /// Rotation, body frame → volume frame.
    pub rotation: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    pub control: [V3; 3],
    pub radius: f64,
}

/// Resolved geometry of one phantom, chambers in label order LV, RV, LA, RA.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub body: Ellipsoid,
    pub chambers: [Ellipsoid; 4],
    /// AO, PA.
    pub vessels: [Tube; 2],
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

const CHAMBER_CENTERS: [V3; 4] = [
    [-0.20, 0.05, 0.22],
    [-0.20, 0.00, -0.22],
    [0.12, 0.20, 0.22],
    [0.12, 0.18, -0.24],
];
const CHAMBER_AXES: [V3; 4] = [
    [0.30, 0.24, 0.22],
    [0.28, 0.22, 0.20],
    [0.20, 0.18, 0.18],
    [0.20, 0.18, 0.18],
];
/// Vessel control points relative to the parent ventricle center (P0) and
/// absolute (P1, P2).
const VESSEL_CONTROL: [[V3; 3]; 2] = [
    [[0.10, -0.05, -0.07], [0.25, -0.30, 0.10], [0.62, -0.25, -0.08]],
    [[0.10, -0.05, 0.04], [0.20, -0.45, -0.20], [0.55, -0.55, 0.10]],
];
const VESSEL_RADIUS: [f64; 2] = [0.11, 0.10];
const BODY_AXES: V3 = [0.94, 0.88, 0.94];

/// Raw intensity plateaus, index = label (0 is soft tissue inside the body).
const CT_PLATEAU: [f64; 7] = [40.0, 520.0, 300.0, 420.0, 200.0, 650.0, 360.0];
const CT_AIR: f64 = -1000.0;
const MR_PLATEAU: [f64; 7] = [250.0, 900.0, 700.0, 820.0, 560.0, 1000.0, 640.0];
const MR_AIR: f64 = 0.0;

pub fn plateau(modality: Modality, label: u8) -> f64 {
    match modality {
        Modality::CT => CT_PLATEAU[label as usize],
        Modality::MR => MR_PLATEAU[label as usize],
    }
}

pub fn air(modality: Modality) -> f64 {
    match modality {
        Modality::CT => CT_AIR,
        Modality::MR => MR_AIR,
    }
}

fn rotation_from_degrees(angles: V3) -> [[f64; 3]; 3] {
    let [a, b, c] = angles.map(f64::to_radians);
    // R = Rz(a) · Ry(b) · Rx(c), acting on (z, y, x) column vectors; "Rz"
    // rotates in the (y, x) plane and so on.
    let rz = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul3(&matmul3(&rz, &ry), &rx)
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl Ellipsoid {
    pub fn contains(&self, p: V3) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        // body coordinates: Rᵀ d
        let mut s = 0.0;
        for a in 0..3 {
            let q = self.rotation[0][a] * d[0] + self.rotation[1][a] * d[1] + self.rotation[2][a] * d[2];
            s += (q / self.axes[a]).powi(2);
        }
        s <= 1.0
    }
}

impl Tube {
    pub fn point(&self, t: f64) -> V3 {
        let [p0, p1, p2] = self.control;
        let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
        [0, 1, 2].map(|i| a * p0[i] + b * p1[i] + c * p2[i])
    }

    /// Distance from `p` to the centre curve: coarse scan, then Newton on
    /// the squared distance, clamped to `[0, 1]`.
    pub fn distance(&self, p: V3) -> f64 {
        const COARSE: usize = 64;
        let d2 = |t: f64| {
            let q = self.point(t);
            (0..3).map(|i| (q[i] - p[i]).powi(2)).sum::<f64>()
        };
        let mut best_t = 0.0;
        let mut best = d2(0.0);
        for i in 1..=COARSE {
            let t = i as f64 / COARSE as f64;
            let v = d2(t);
            if v < best {
                best = v;
                best_t = t;
            }
        }
        let [p0, p1, p2] = self.control;
        // B'(t) = 2[(1-t)(p1-p0) + t(p2-p1)], B'' = 2(p2 - 2p1 + p0)
        let mut t = best_t;
        for _ in 0..8 {
            let q = self.point(t);
            let dq: V3 = [0, 1, 2].map(|i| 2.0 * ((1.0 - t) * (p1[i] - p0[i]) + t * (p2[i] - p1[i])));
            let ddq: V3 = [0, 1, 2].map(|i| 2.0 * (p2[i] - 2.0 * p1[i] + p0[i]));
            let g: f64 = (0..3).map(|i| (q[i] - p[i]) * dq[i]).sum();
            let h: f64 = (0..3).map(|i| dq[i] * dq[i] + (q[i] - p[i]) * ddq[i]).sum();
            if h <= 0.0 {
                break;
            }
            let next = (t - g / h).clamp(0.0, 1.0);
            if (next - t).abs() < 1e-14 {
                t = next;
                break;
            }
            t = next;
        }
        best.min(d2(t)).sqrt()
    }

    pub fn contains(&self, p: V3) -> bool {
        self.distance(p) <= self.radius
    }
}

impl Geometry {
    /// Label of the primitive containing `u`, by priority.
    pub fn label_at(&self, u: V3) -> u8 {
        for (i, e) in self.chambers.iter().enumerate() {
            if e.contains(u) {
                return i as u8 + 1;
            }
        }
        for (i, t) in self.vessels.iter().enumerate() {
            if t.contains(u) {
                return i as u8 + 5;
            }
        }
        0
    }
}

pub fn nominal_geometry() -> Geometry {
    sample_geometry_with(&Jitter::none(), &mut rng_from_seed(0))
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_geometry_with(j: &Jitter, rng: &mut Rng) -> Geometry {
    let offset = |rng: &mut Rng| -> V3 { [0, 1, 2].map(|_| uniform(rng, -j.center, j.center)) };
    let mut chambers = Vec::with_capacity(4);
    for i in 0..4 {
        let o = offset(rng);
        let s = uniform(rng, j.scale[0], j.scale[1]);
        let angles = [0, 1, 2].map(|_| uniform(rng, -j.rotation_deg, j.rotation_deg));
        let rotation = if j.rotation_deg > 0.0 { rotation_from_degrees(angles) } else { IDENTITY };
        chambers.push(Ellipsoid {
            center: [0, 1, 2].map(|a| CHAMBER_CENTERS[i][a] + o[a]),
            axes: CHAMBER_AXES[i].map(|x| x * s),
            rotation,
        });
    }
    let chambers: [Ellipsoid; 4] = chambers.try_into().unwrap();
    let vessels = [0, 1].map(|v| {
        let parent = &chambers[v].center;
        let p0 = [0, 1, 2].map(|a| parent[a] + VESSEL_CONTROL[v][0][a]);
        let o1 = offset(rng);
        let o2 = offset(rng);
        let p1 = [0, 1, 2].map(|a| VESSEL_CONTROL[v][1][a] + o1[a]);
        let p2 = [0, 1, 2].map(|a| VESSEL_CONTROL[v][2][a] + o2[a]);
        let s = uniform(rng, j.scale[0], j.scale[1]);
        Tube {
            control: [p0, p1, p2],
            radius: VESSEL_RADIUS[v] * s,
        }
    });
    Geometry {
        body: Ellipsoid {
            center: [0.0; 3],
            axes: BODY_AXES,
            rotation: IDENTITY,
        },
        chambers,
        vessels,
    }
}

/// Normalized coordinate of a voxel center.
#[inline]
pub fn voxel_coord(idx: [usize; 3], dims: [usize; 3]) -> V3 {
    [0, 1, 2].map(|a| 2.0 * (idx[a] as f64 + 0.5) / dims[a] as f64 - 1.0)
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::Config(format!("phantom dims {:?} below minimum {MIN_DIM}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("phantom spacing {:?} must be positive", self.spacing)));
        }
        let j = &self.jitter;
        if !(j.center >= 0.0 && j.rotation_deg >= 0.0 && j.scale[0] > 0.0 && j.scale[0] <= j.scale[1]) {
            return Err(Error::Config(format!("malformed jitter {j:?}")));
        }
        if !(self.noise_sigma >= 0.0 && (0.0..1.0).contains(&self.bias_amplitude)) {
            return Err(Error::Config("noise_sigma must be >= 0 and bias_amplitude in [0, 1)".into()));
        }
        if !(self.volume_band[0] >= 0.0 && self.volume_band[0] <= self.volume_band[1]) {
            return Err(Error::Config("volume_band must be ordered".into()));
        }
        // Worst-case extent of every primitive must stay one voxel inside
        // the field of view. Rotation is bounded by the largest semi-axis.
        let smax = j.scale[1];
        for a in 0..3 {
            let margin = 1.0 - 2.0 / self.dims[a] as f64;
            for i in 0..4 {
                let r = CHAMBER_AXES[i].iter().cloned().fold(0.0, f64::max) * smax;
                if CHAMBER_CENTERS[i][a].abs() + j.center + r > margin {
                    return Err(Error::Config(format!("jitter lets chamber {} leave the volume", i + 1)));
                }
            }
            for v in 0..2 {
                let r = VESSEL_RADIUS[v] * smax;
                let p0 = (CHAMBER_CENTERS[v][a] + VESSEL_CONTROL[v][0][a]).abs();
                let p1 = VESSEL_CONTROL[v][1][a].abs();
                let p2 = VESSEL_CONTROL[v][2][a].abs();
                if p0.max(p1).max(p2) + j.center + r > margin {
                    return Err(Error::Config(format!("jitter lets vessel {} leave the volume", v + 5)));
                }
            }
        }
        Ok(())
    }

    /// Physical field-of-view volume in mL.
    pub fn fov_ml(&self) -> f64 {
        self.dims.iter().zip(&self.spacing).map(|(&d, &s)| d as f64 * s as f64).product::<f64>() / 1000.0
    }

    /// Accepted volume band `(min, max)` in mL for a foreground class.
    pub fn class_volume_band(&self, class: u8) -> (f64, f64) {
        let nominal = nominal_volume_fraction(class) * self.fov_ml();
        (nominal * self.volume_band[0], nominal * self.volume_band[1])
    }
}

/// Unclipped primitive volume as a fraction of the normalized cube (volume 8).
pub fn nominal_volume_fraction(class: u8) -> f64 {
    match class {
        1..=4 => {
            let a = CHAMBER_AXES[class as usize - 1];
            4.0 / 3.0 * std::f64::consts::PI * a[0] * a[1] * a[2] / 8.0
        }
        5 | 6 => {
            let v = class as usize - 5;
            let tube = Tube {
                control: [
                    [0, 1, 2].map(|a| CHAMBER_CENTERS[v][a] + VESSEL_CONTROL[v][0][a]),
                    VESSEL_CONTROL[v][1],
                    VESSEL_CONTROL[v][2],
                ],
                radius: VESSEL_RADIUS[v],
            };
            let n = 256;
            let mut len = 0.0;
            let mut prev = tube.point(0.0);
            for i in 1..=n {
                let q = tube.point(i as f64 / n as f64);
                len += (0..3).map(|a| (q[a] - prev[a]).powi(2)).sum::<f64>().sqrt();
                prev = q;
            }
            std::f64::consts::PI * tube.radius * tube.radius * len / 8.0
        }
        _ => 0.0,
    }
}

/// 6-connected components of a binary grid, returned as a per-voxel
/// component id (0 = background, ids from 1) and the component sizes.
pub fn connected_components(fg: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = dims;
    let mut ids = vec![0u32; fg.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if fg[j] && ids[j] == 0 {
                    ids[j] = id;
                    queue.push_back(j);
                }
            };
            if z > 0 { visit(i - h * w); }
            if z + 1 < d { visit(i + h * w); }
            if y > 0 { visit(i - w); }
            if y + 1 < h { visit(i + w); }
            if x > 0 { visit(i - 1); }
            if x + 1 < w { visit(i + 1); }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Rasterize the geometry at voxel centers, then keep only the largest
/// 6-connected component of every class.
pub fn rasterize(geom: &Geometry, dims: [usize; 3]) -> Vec<u8> {
    let [d, h, w] = dims;
    let mut labels = vec![0u8; numel(dims)];
    labels.par_chunks_mut(h * w).enumerate().for_each(|(z, slab)| {
        for y in 0..h {
            for x in 0..w {
                slab[y * w + x] = geom.label_at(voxel_coord([z, y, x], dims));
            }
        }
    });
    let _ = d;
    for class in 1..volio::NUM_CLASSES as u8 {
        let fg: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let (ids, sizes) = connected_components(&fg, dims);
        if sizes.len() > 1 {
            let keep = sizes.iter().enumerate().max_by_key(|(i, s)| (**s, usize::MAX - i)).unwrap().0 as u32 + 1;
            for (l, &id) in labels.iter_mut().zip(&ids) {
                if id != 0 && id != keep {
                    *l = 0;
                }
            }
        }
    }
    labels
}

/// Smooth multiplicative field `1 + A·Σ aᵢ fᵢ(u) / Σ|aᵢ|` over low-order
/// polynomial terms bounded by 1 on the cube.
fn bias_field(u: V3, coeffs: &[f64; 9], amplitude: f64) -> f64 {
    let [z, y, x] = u;
    let terms = [z, y, x, z * y, y * x, z * x, 2.0 * z * z - 1.0, 2.0 * y * y - 1.0, 2.0 * x * x - 1.0];
    let norm: f64 = coeffs.iter().map(|c| c.abs()).sum();
    if norm == 0.0 || amplitude == 0.0 {
        return 1.0;
    }
    1.0 + amplitude * coeffs.iter().zip(&terms).map(|(c, t)| c * t).sum::<f64>() / norm
}

/// Sample the geometry of `spec` (depends only on seed and jitter).
pub fn sample_geometry(spec: &PhantomSpec) -> Geometry {
    sample_geometry_with(&spec.jitter, &mut rng_from_seed(split(spec.seed, "geometry")))
}

/// Generate one phantom with raw (un-normalized) intensities.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, SegmentationMask)> {
    spec.validate()?;
    let dims = spec.dims;
    let geom = sample_geometry(spec);
    let labels = rasterize(&geom, dims);

    let mut noise_rng = rng_from_seed(split(spec.seed, "intensity"));
    let coeffs: [f64; 9] = std::array::from_fn(|_| noise_rng.gen_range(-1.0..1.0));
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let [_, h, w] = dims;
    let mut voxels = vec![0.0f32; labels.len()];
    for (i, (v, &l)) in voxels.iter_mut().zip(&labels).enumerate() {
        let u = voxel_coord([i / (h * w), (i / w) % h, i % w], dims);
        let base = if l != 0 || geom.body.contains(u) { plateau(spec.modality, l) } else { air(spec.modality) };
        let mut value = base * bias_field(u, &coeffs, spec.bias_amplitude);
        if spec.noise_sigma > 0.0 {
            value += normal.sample(&mut noise_rng);
        }
        *v = value as f32;
    }
    let case_id = format!("phantom{}", spec.seed);
    Ok((
        Volume3D::new(voxels, dims, spec.spacing, spec.modality, case_id)?,
        SegmentationMask::new(labels, dims, spec.spacing)?,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityMix {
    /// Use the template's modality for every case.
    #[default]
    Template,
    /// Even cases CT, odd cases MR.
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    /// Case-id prefix and manifest name (`<split>.csv`).
    pub split: String,
    pub modality: ModalityMix,
    pub with_masks: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            split: "labeled".into(),
            modality: ModalityMix::Template,
            with_masks: true,
        }
    }
}

/// Write `n` phantoms with seeds `template.seed + i` into `out_dir` and a
/// manifest `<split>.csv` next to them.
pub fn generate_dataset(n: usize, template: &PhantomSpec, opts: &DatasetOptions, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    template.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let modality = match opts.modality {
                ModalityMix::Template => template.modality,
                ModalityMix::Alternate if i % 2 == 0 => Modality::CT,
                ModalityMix::Alternate => Modality::MR,
            };
            let spec = PhantomSpec {
                seed: template.seed.wrapping_add(i as u64),
                modality,
                ..template.clone()
            };
            let (vol, mask) = generate_phantom(&spec)?;
            let case_id = format!("{}{:04}", opts.split, i);
            let image_path = format!("{case_id}_img.hsv");
            volio::save_volume(&vol, out_dir.join(&image_path))?;
            let mask_path = if opts.with_masks {
                let p = format!("{case_id}_seg.hsv");
                volio::save_mask(&mask, out_dir.join(&p))?;
                p
            } else {
                String::new()
            };
            Ok(ManifestRow {
                case_id,
                image_path,
                mask_path,
                modality,
                split: opts.split.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(rows, out_dir);
    manifest.save(out_dir.join(format!("{}.csv", opts.split)))?;
    Ok(manifest)
}
