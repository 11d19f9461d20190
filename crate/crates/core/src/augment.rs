//! Stochastic augmentations: the two-view generator for self-supervised
//! pretraining and the paired image/mask transform for fine-tuning.
//!
//! Boundary handling: blur reflects (half-sample symmetric); zoom, rotation
//! and elastic warps read zeros (label 0) outside the field of view.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volio::{SegmentationMask, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    /// Flip probability per axis (z, y, x).
    pub flip_prob: [f64; 3],
    /// Isotropic zoom factor range.
    pub scale: [f64; 2],
    pub noise_sigma: [f64; 2],
    /// Gaussian blur sigma range, voxels.
    pub blur_sigma: [f64; 2],
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    /// Rotation range in degrees about each axis (z, y, x). Supervised only.
    pub rotation_deg: [[f64; 2]; 3],
    /// RMS elastic displacement in voxels. Supervised only.
    pub elastic_alpha: f64,
    /// Smoothing of the elastic displacement field, voxels.
    pub elastic_sigma: f64,
    pub rng_seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy::ssl_default()
    }
}

fn ordered(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

fn sample(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl AugPolicy {
    /// Every operation collapsed to the identity.
    pub fn identity() -> Self {
        AugPolicy {
            flip_prob: [0.0; 3],
            scale: [1.0, 1.0],
            noise_sigma: [0.0, 0.0],
            blur_sigma: [0.0, 0.0],
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
            rotation_deg: [[0.0, 0.0]; 3],
            elastic_alpha: 0.0,
            elastic_sigma: 4.0,
            rng_seed: 0,
        }
    }

    pub fn ssl_default() -> Self {
        AugPolicy {
            flip_prob: [0.5; 3],
            scale: [0.9, 1.1],
            noise_sigma: [0.0, 0.1],
            blur_sigma: [0.0, 1.0],
            brightness: [-0.1, 0.1],
            contrast: [0.9, 1.1],
            ..AugPolicy::identity()
        }
    }

    pub fn supervised_default() -> Self {
        AugPolicy {
            rotation_deg: [[-10.0, 10.0]; 3],
            elastic_alpha: 0.75,
            elastic_sigma: 4.0,
            ..AugPolicy::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("augmentation policy: {what}")));
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        let ranges = [self.scale, self.noise_sigma, self.blur_sigma, self.brightness, self.contrast];
        if !ranges.iter().all(|r| ordered(*r)) || !self.rotation_deg.iter().all(|r| ordered(*r)) {
            return bad("ranges must be finite with min <= max");
        }
        if self.scale[0] < 0.5 || self.scale[1] > 2.0 {
            return bad("zoom factor must lie in [0.5, 2]");
        }
        if self.noise_sigma[0] < 0.0 || self.blur_sigma[0] < 0.0 {
            return bad("sigmas must be >= 0");
        }
        if self.contrast[0] <= 0.0 {
            return bad("contrast gain must be > 0");
        }
        if !(self.elastic_alpha >= 0.0 && self.elastic_sigma >= 0.0) {
            return bad("elastic alpha and sigma must be >= 0");
        }
        Ok(())
    }
}

fn stride(dims: [usize; 3], axis: usize) -> usize {
    match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    }
}

fn flip_slice<T: Copy>(data: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out.push(data[(sz * h + sy) * w + sx]);
            }
        }
    }
    out
}

pub fn flip(v: &Volume3D, axis: usize) -> Result<Volume3D> {
    if axis > 2 {
        return Err(Error::Config(format!("flip axis {axis} not in 0..3")));
    }
    Ok(v.with_voxels(flip_slice(&v.voxels, v.dims, axis)))
}

pub fn flip_mask(m: &SegmentationMask, axis: usize) -> Result<SegmentationMask> {
    if axis > 2 {
        return Err(Error::Config(format!("flip axis {axis} not in 0..3")));
    }
    Ok(SegmentationMask {
        labels: flip_slice(&m.labels, m.dims, axis),
        ..m.clone()
    })
}

/// Trilinear read with zeros outside the grid.
fn trilinear(data: &[f32], dims: [usize; 3], s: [f64; 3]) -> f32 {
    let base = s.map(f64::floor);
    let frac = [s[0] - base[0], s[1] - base[1], s[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            idx[a] = base[a] as i64 + hi as i64;
            weight *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if weight == 0.0 {
            continue;
        }
        if (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < dims[a]) {
            let i = (idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize;
            acc += weight * data[i] as f64;
        }
    }
    acc as f32
}

fn nearest(labels: &[u8], dims: [usize; 3], s: [f64; 3]) -> u8 {
    let r = s.map(f64::round);
    if (0..3).all(|a| r[a] >= 0.0 && (r[a] as usize) < dims[a]) {
        labels[(r[0] as usize * dims[1] + r[1] as usize) * dims[2] + r[2] as usize]
    } else {
        0
    }
}

fn center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

/// Zoom about the volume center by `factor`, resampled back to the input dims.
pub fn zoom(v: &Volume3D, factor: f64) -> Result<Volume3D> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::Config(format!("zoom factor {factor} outside [0.5, 2]")));
    }
    if factor == 1.0 {
        return Ok(v.clone());
    }
    let c = center(v.dims);
    let [d, h, w] = v.dims;
    let mut out = Vec::with_capacity(v.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let s = [0, 1, 2].map(|a| c[a] + (p[a] - c[a]) / factor);
                out.push(trilinear(&v.voxels, v.dims, s));
            }
        }
    }
    Ok(v.with_voxels(out))
}

pub fn add_noise(v: &Volume3D, sigma: f64, rng: &mut Rng) -> Result<Volume3D> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0f64, sigma).expect("valid sigma");
    Ok(v.with_voxels(v.voxels.iter().map(|&x| (x as f64 + normal.sample(rng)) as f32).collect()))
}

/// Half-sample symmetric reflection into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m >= n as i64 {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= sum);
    k
}

pub(crate) fn blur_grid(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let s = stride(dims, axis);
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / s) % n;
            let line_start = i - pos * s;
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let j = reflect(pos as i64 + k as i64 - radius, n);
                acc += wk * cur[line_start + j * s];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Separable Gaussian blur truncated at 3σ, reflect padding.
pub fn blur(v: &Volume3D, sigma: f64) -> Result<Volume3D> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let data: Vec<f64> = v.voxels.iter().map(|&x| x as f64).collect();
    Ok(v.with_voxels(blur_grid(&data, v.dims, sigma).into_iter().map(|x| x as f32).collect()))
}

/// `gain · (v − mean) + mean + shift`.
pub fn brightness_contrast(v: &Volume3D, shift: f64, gain: f64) -> Result<Volume3D> {
    if !(gain > 0.0 && gain.is_finite() && shift.is_finite()) {
        return Err(Error::Config(format!("contrast gain {gain} must be > 0")));
    }
    if shift == 0.0 && gain == 1.0 {
        return Ok(v.clone());
    }
    let mean = v.mean();
    Ok(v.with_voxels(v.voxels.iter().map(|&x| (gain * (x as f64 - mean) + mean + shift) as f32).collect()))
}

/// Intensity and flip/zoom chain used for SSL views.
fn ssl_augment(v: &Volume3D, p: &AugPolicy, rng: &mut Rng) -> Result<Volume3D> {
    let mut out = v.clone();
    for axis in 0..3 {
        let u: f64 = rng.gen();
        if u < p.flip_prob[axis] {
            out = flip(&out, axis)?;
        }
    }
    out = zoom(&out, sample(rng, p.scale))?;
    out = blur(&out, sample(rng, p.blur_sigma))?;
    let shift = sample(rng, p.brightness);
    let gain = sample(rng, p.contrast);
    out = brightness_contrast(&out, shift, gain)?;
    let sigma = sample(rng, p.noise_sigma);
    add_noise(&out, sigma, rng)
}

/// Two independent augmentations of `v`.
pub fn make_views(v: &Volume3D, policy: &AugPolicy, rng: &mut Rng) -> Result<(Volume3D, Volume3D)> {
    policy.validate()?;
    let a = ssl_augment(v, policy, rng)?;
    let b = ssl_augment(v, policy, rng)?;
    Ok((a, b))
}

fn rotation_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = deg.map(f64::to_radians);
    let rz = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(&mul(&rz, &ry), &rx)
}

/// Smoothed i.i.d. Gaussian displacement field, rescaled to RMS `alpha`.
fn elastic_field(dims: [usize; 3], alpha: f64, sigma: f64, rng: &mut Rng) -> [Vec<f64>; 3] {
    let n = dims.iter().product::<usize>();
    let normal = Normal::new(0.0, 1.0).unwrap();
    std::array::from_fn(|_| {
        let raw: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let mut smooth = if sigma > 0.0 { blur_grid(&raw, dims, sigma) } else { raw };
        let rms = (smooth.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            smooth.iter_mut().for_each(|x| *x *= alpha / rms);
        }
        smooth
    })
}

/// Random rotation + elastic warp applied identically to image (trilinear)
/// and mask (nearest), followed by the policy's intensity operations on the
/// image only.
pub fn supervised_augment(
    v: &Volume3D,
    m: &SegmentationMask,
    policy: &AugPolicy,
    rng: &mut Rng,
) -> Result<(Volume3D, SegmentationMask)> {
    policy.validate()?;
    if v.dims != m.dims {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", v.dims, m.dims)));
    }
    let angles = [0, 1, 2].map(|a| sample(rng, policy.rotation_deg[a]));
    let field = (policy.elastic_alpha > 0.0).then(|| elastic_field(v.dims, policy.elastic_alpha, policy.elastic_sigma, rng));
    let (mut img, mask) = if angles == [0.0; 3] && field.is_none() {
        (v.clone(), m.clone())
    } else {
        // Output voxel p samples source R⁻¹(p − c) + c + u(p).
        let r = rotation_matrix(angles);
        let c = center(v.dims);
        let [d, h, w] = v.dims;
        let mut vox = Vec::with_capacity(v.len());
        let mut lab = Vec::with_capacity(v.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = vox.len();
                    let q = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                    let mut s = [0.0; 3];
                    for a in 0..3 {
                        s[a] = c[a] + r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2];
                        if let Some(f) = &field {
                            s[a] += f[a][i];
                        }
                    }
                    vox.push(trilinear(&v.voxels, v.dims, s));
                    lab.push(nearest(&m.labels, m.dims, s));
                }
            }
        }
        (v.with_voxels(vox), SegmentationMask { labels: lab, ..m.clone() })
    };
    img = blur(&img, sample(rng, policy.blur_sigma))?;
    let shift = sample(rng, policy.brightness);
    let gain = sample(rng, policy.contrast);
    img = brightness_contrast(&img, shift, gain)?;
    let sigma = sample(rng, policy.noise_sigma);
    img = add_noise(&img, sigma, rng)?;
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::volio::Modality;
    use proptest::prelude::*;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
        let mut rng = rng_from_seed(seed);
        let n = dims.iter().product();
        Volume3D::new((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), dims, [1.0; 3], Modality::CT, "r").unwrap()
    }

    fn random_mask(dims: [usize; 3], seed: u64) -> SegmentationMask {
        let mut rng = rng_from_seed(seed);
        let n = dims.iter().product();
        SegmentationMask::new((0..n).map(|_| rng.gen_range(0..7u8)).collect(), dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn identity_policy_views_equal_input() {
        let v = random_volume([8, 8, 8], 1);
        let (a, b) = make_views(&v, &AugPolicy::identity(), &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, v);
        assert_eq!(b, v);
    }

    #[test]
    fn views_deterministic_in_seed() {
        let v = random_volume([8, 8, 8], 2);
        let p = AugPolicy::ssl_default();
        let x = make_views(&v, &p, &mut rng_from_seed(9)).unwrap();
        let y = make_views(&v, &p, &mut rng_from_seed(9)).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.0, x.1);
    }

    #[test]
    fn flip_only_policy_reverses_z() {
        let v = random_volume([4, 5, 6], 4);
        let p = AugPolicy { flip_prob: [1.0, 0.0, 0.0], ..AugPolicy::identity() };
        let (a, _) = make_views(&v, &p, &mut rng_from_seed(0)).unwrap();
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    assert_eq!(a.at(z, y, x), v.at(3 - z, y, x));
                }
            }
        }
        assert_eq!(flip(&a, 0).unwrap(), v);
    }

    #[test]
    fn zero_sigmas_are_identity() {
        let v = random_volume([6, 6, 6], 5);
        assert_eq!(blur(&v, 0.0).unwrap(), v);
        assert_eq!(add_noise(&v, 0.0, &mut rng_from_seed(1)).unwrap(), v);
        assert_eq!(brightness_contrast(&v, 0.0, 1.0).unwrap(), v);
    }

    #[test]
    fn invalid_parameters_are_config_errors() {
        let v = random_volume([4, 4, 4], 6);
        assert!(matches!(blur(&v, -1.0), Err(Error::Config(_))));
        assert!(matches!(add_noise(&v, -0.1, &mut rng_from_seed(0)), Err(Error::Config(_))));
        assert!(matches!(brightness_contrast(&v, 0.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(zoom(&v, 3.0), Err(Error::Config(_))));
        assert!(matches!(flip(&v, 3), Err(Error::Config(_))));
        let bad = AugPolicy { scale: [1.2, 1.1], ..AugPolicy::identity() };
        assert!(matches!(make_views(&v, &bad, &mut rng_from_seed(0)), Err(Error::Config(_))));
    }

    #[test]
    fn contrast_gain_two_quadruples_variance() {
        // variance scales with gain²; gain 2 doubles the standard deviation
        let v = Volume3D::new((0..64).map(|i| (i % 5) as f32).collect(), [4, 4, 4], [1.0; 3], Modality::CT, "g").unwrap();
        let var0 = v.variance();
        let out = brightness_contrast(&v, 0.0, 2.0).unwrap();
        assert!((out.variance() - 4.0 * var0).abs() < 1e-9, "{} vs {}", out.variance(), 4.0 * var0);
        assert!((out.mean() - v.mean()).abs() < 1e-9);
    }

    #[test]
    fn supervised_identity_policy_is_identity() {
        let v = random_volume([8, 8, 8], 7);
        let m = random_mask([8, 8, 8], 7);
        let (a, b) = supervised_augment(&v, &m, &AugPolicy::identity(), &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, v);
        assert_eq!(b, m);
    }

    fn rot90(axis: usize) -> AugPolicy {
        let mut p = AugPolicy::identity();
        p.rotation_deg[axis] = [90.0, 90.0];
        p
    }

    #[test]
    fn quarter_turn_preserves_class_counts_and_four_turns_are_identity() {
        let v = random_volume([8, 8, 8], 8);
        let m = random_mask([8, 8, 8], 8);
        for axis in 0..3 {
            let p = rot90(axis);
            let (mut vi, mut mi) = (v.clone(), m.clone());
            for turn in 0..4 {
                let (a, b) = supervised_augment(&vi, &mi, &p, &mut rng_from_seed(turn)).unwrap();
                for c in 0..7 {
                    assert_eq!(b.count(c), m.count(c), "axis {axis} class {c}");
                }
                vi = a;
                mi = b;
            }
            assert_eq!(mi, m);
            for (a, b) in vi.voxels.iter().zip(&v.voxels) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn elastic_alpha_zero_is_identity() {
        let v = random_volume([8, 8, 8], 9);
        let m = random_mask([8, 8, 8], 9);
        let p = AugPolicy { elastic_alpha: 0.0, elastic_sigma: 3.0, ..AugPolicy::identity() };
        let (a, b) = supervised_augment(&v, &m, &p, &mut rng_from_seed(1)).unwrap();
        assert_eq!((a, b), (v, m));
    }

    #[test]
    fn supervised_default_keeps_label_set() {
        let v = random_volume([16, 16, 16], 10);
        let m = random_mask([16, 16, 16], 10);
        let (a, b) = supervised_augment(&v, &m, &AugPolicy::supervised_default(), &mut rng_from_seed(4)).unwrap();
        assert!(b.labels.iter().all(|&l| l < 7));
        assert!(a.voxels.iter().all(|x| x.is_finite()));
        assert_ne!(b, m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn blur_preserves_mean_and_never_increases_variance(seed in any::<u64>(), sigma in 0.1f64..2.5) {
            let v = random_volume([6, 7, 8], seed);
            let b = blur(&v, sigma).unwrap();
            prop_assert!((b.mean() - v.mean()).abs() < 1e-4);
            prop_assert!(b.variance() <= v.variance() + 1e-9);
        }

        #[test]
        fn flips_are_involutions(seed in any::<u64>(), axis in 0usize..3) {
            let v = random_volume([3, 4, 5], seed);
            prop_assert_eq!(flip(&flip(&v, axis).unwrap(), axis).unwrap(), v);
        }

        #[test]
        fn spatial_transforms_commute_with_binarization(seed in any::<u64>(), axis in 0usize..3, class in 0u8..7, flip_it in any::<bool>()) {
            let m = random_mask([6, 6, 6], seed);
            let bin = SegmentationMask { labels: m.labels.iter().map(|&l| (l == class) as u8).collect(), ..m.clone() };
            let v = random_volume([6, 6, 6], seed);
            let (tm, tb) = if flip_it {
                (flip_mask(&m, axis).unwrap(), flip_mask(&bin, axis).unwrap())
            } else {
                let p = rot90(axis);
                (supervised_augment(&v, &m, &p, &mut rng_from_seed(0)).unwrap().1,
                 supervised_augment(&v, &bin, &p, &mut rng_from_seed(0)).unwrap().1)
            };
            let after: Vec<u8> = tm.labels.iter().map(|&l| (l == class) as u8).collect();
            prop_assert_eq!(after, tb.labels);
        }
    }
}
