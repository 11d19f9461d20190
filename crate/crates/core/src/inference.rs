//! Sliding-window whole-volume prediction with weighted overlap blending.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{segment, ModelParams};
use crate::supervised::softmax_channels;
use crate::tensor::Grid;
use crate::volio::{SegmentationMask, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlendWeights {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub window: [usize; 3],
    pub overlap: f64,
    pub weights: BlendWeights,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { window: [32; 3], overlap: 0.5, weights: BlendWeights::Gaussian }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if self.window.contains(&0) {
            return Err(Error::Config(format!("window {:?} has a zero extent", self.window)));
        }
        Ok(())
    }
}

/// Window origins along one axis. The last window is snapped to the edge.
pub fn window_origins(dim: usize, win: usize, overlap: f64) -> Result<Vec<usize>> {
    if win == 0 || win > dim {
        return Err(Error::Config(format!("window {win} does not fit extent {dim}")));
    }
    let stride = ((win as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = vec![0];
    let mut o = 0;
    while o + win < dim {
        o = (o + stride).min(dim - win);
        out.push(o);
    }
    Ok(out)
}

/// Separable per-voxel blending weights for one window, peak 1.
pub fn weight_map(window: [usize; 3], mode: BlendWeights) -> Vec<f32> {
    let n: usize = window.iter().product();
    if mode == BlendWeights::Uniform {
        return vec![1.0; n];
    }
    let axis = |w: usize| -> Vec<f64> {
        let c = (w as f64 - 1.0) / 2.0;
        let sigma = w as f64 / 8.0;
        (0..w).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (a, b, c) = (axis(window[0]), axis(window[1]), axis(window[2]));
    let peak = a.iter().cloned().fold(0.0, f64::max) * b.iter().cloned().fold(0.0, f64::max) * c.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(n);
    for z in &a {
        for y in &b {
            for x in &c {
                out.push(((z * y * x / peak).max(0.01)) as f32);
            }
        }
    }
    out
}

fn pad_amounts(dims: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| window[a].saturating_sub(dims[a]) / 2)
}

/// Zero-pads `g` symmetrically so that every axis is at least `window`.
fn pad(g: &Grid<f32>, window: [usize; 3]) -> (Grid<f32>, [usize; 3]) {
    let before = pad_amounts(g.dims, window);
    let pd: [usize; 3] = std::array::from_fn(|a| g.dims[a].max(window[a]));
    if pd == g.dims {
        return (g.clone(), before);
    }
    let mut out = Grid::zeros(g.channels, pd);
    let [d, h, w] = g.dims;
    for c in 0..g.channels {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = ((c * pd[0] + z + before[0]) * pd[1] + y + before[1]) * pd[2] + before[2];
                out.data[dst..dst + w].copy_from_slice(&g.data[src..src + w]);
            }
        }
    }
    (out, before)
}

fn crop(g: &Grid<f32>, origin: [usize; 3], size: [usize; 3]) -> Grid<f32> {
    let mut out = Grid::zeros(g.channels, size);
    let [_, h, w] = g.dims;
    let d = g.dims[0];
    for c in 0..g.channels {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let src = ((c * d + z + origin[0]) * h + y + origin[1]) * w + origin[2];
                let dst = ((c * size[0] + z) * size[1] + y) * size[2];
                out.data[dst..dst + size[2]].copy_from_slice(&g.data[src..src + size[2]]);
            }
        }
    }
    out
}

/// Per-voxel argmax over channels; ties resolve to the lowest class.
pub fn argmax_channels(p: &Grid<f32>) -> Vec<u8> {
    let n = p.voxels();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..p.channels {
                if p.data[k * n + v] > p.data[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Predicts a whole volume. Returns the argmax mask and the blended
/// per-class probabilities at the input resolution.
pub fn sliding_window_predict(m: &ModelParams, v: &Volume3D, cfg: &InferenceConfig) -> Result<(SegmentationMask, Grid<f32>)> {
    cfg.validate()?;
    m.cfg.check_dims(cfg.window).map_err(|e| Error::Config(format!("window {:?}: {e}", cfg.window)))?;
    let (x, before) = pad(&Grid::from_vec(1, v.dims, v.voxels.clone()), cfg.window);
    let pd = x.dims;
    let axes: Vec<Vec<usize>> = (0..3).map(|a| window_origins(pd[a], cfg.window[a], cfg.overlap)).collect::<Result<_>>()?;
    let mut origins = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &xo in &axes[2] {
                origins.push([z, y, xo]);
            }
        }
    }
    let probs: Vec<Grid<f32>> = origins
        .par_iter()
        .map(|&o| segment(m, &crop(&x, o, cfg.window)).map(|(l, _)| softmax_channels(&l)))
        .collect::<Result<_>>()?;

    let classes = m.cfg.num_classes;
    let wmap = weight_map(cfg.window, cfg.weights);
    let npad: usize = pd.iter().product();
    let mut acc = Grid::<f32>::zeros(classes, pd);
    let mut wsum = vec![0.0f32; npad];
    let [wd, wh, ww] = cfg.window;
    let nw = wd * wh * ww;
    for (o, p) in origins.iter().zip(&probs) {
        for z in 0..wd {
            for y in 0..wh {
                let row = ((z + o[0]) * pd[1] + y + o[1]) * pd[2] + o[2];
                let wrow = (z * wh + y) * ww;
                for i in 0..ww {
                    let wt = wmap[wrow + i];
                    wsum[row + i] += wt;
                    for k in 0..classes {
                        acc.data[k * npad + row + i] += wt * p.data[k * nw + wrow + i];
                    }
                }
            }
        }
    }
    for k in 0..classes {
        for (a, &w) in acc.data[k * npad..(k + 1) * npad].iter_mut().zip(&wsum) {
            *a /= w;
        }
    }
    let probs = crop(&acc, before, v.dims);
    let mask = SegmentationMask::new(argmax_channels(&probs), v.dims, v.spacing)?;
    Ok((mask, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureConfig};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn model() -> ModelParams {
        let arch = ArchitectureConfig { stage_channels: vec![4, 8], vil_blocks_per_stage: vec![0, 1], vil_head_dim: 4, ..Default::default() };
        let mut m = build_model(&arch, &mut rng_from_seed(2)).unwrap();
        // non-zero biases so constant inputs still produce structured output
        let mut rng = rng_from_seed(3);
        for (_, p) in m.params.iter_mut() {
            for x in p.tensor.data.iter_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        m
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3D {
        let mut rng = rng_from_seed(seed);
        let n = dims.iter().product();
        Volume3D::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), dims, [1.0; 3], Default::default(), "v").unwrap()
    }

    #[test]
    fn origins_snap_to_edge() {
        assert_eq!(window_origins(32, 16, 0.5).unwrap(), vec![0, 8, 16]);
        assert_eq!(window_origins(32, 16, 0.0).unwrap(), vec![0, 16]);
        assert_eq!(window_origins(20, 16, 0.0).unwrap(), vec![0, 4]);
        assert_eq!(window_origins(16, 16, 0.9).unwrap(), vec![0]);
        assert!(matches!(window_origins(8, 16, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_weights_are_positive_and_peaked() {
        let w = weight_map([8, 8, 8], BlendWeights::Gaussian);
        assert!(w.iter().all(|&x| (0.01..=1.0).contains(&x)));
        assert_eq!(w.iter().cloned().fold(0.0, f32::max), 1.0);
        assert!(w[0] < w[(3 * 8 + 3) * 8 + 3]);
        assert!(weight_map([4; 3], BlendWeights::Uniform).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let m = model();
        let v = random_volume([8, 16, 8], 1);
        let cfg = InferenceConfig { window: v.dims, overlap: 0.0, weights: BlendWeights::Uniform };
        let (mask, p) = sliding_window_predict(&m, &v, &cfg).unwrap();
        let (l, _) = segment(&m, &Grid::from_vec(1, v.dims, v.voxels.clone())).unwrap();
        let direct = softmax_channels(&l);
        assert_eq!(p.data, direct.data);
        assert_eq!(mask.labels, argmax_channels(&direct));
    }

    #[test]
    fn constant_input_blend_matches_single_window() {
        // a zero head makes the window output position independent
        let mut m = model();
        m.params.w_mut("head.w").iter_mut().for_each(|x| *x = 0.0);
        let v = Volume3D::filled(0.3, [16, 16, 16], [1.0; 3], Default::default());
        let (l, _) = segment(&m, &Grid::from_vec(1, [8; 3], vec![0.3; 512])).unwrap();
        let single = softmax_channels(&l);
        let n = 16 * 16 * 16;
        for overlap in [0.0, 0.25, 0.5, 0.75] {
            let cfg = InferenceConfig { window: [8; 3], overlap, weights: BlendWeights::Gaussian };
            let (_, p) = sliding_window_predict(&m, &v, &cfg).unwrap();
            for k in 0..7 {
                for i in 0..n {
                    assert!((p.data[k * n + i] - single.data[k * 512]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn blend_is_a_convex_combination() {
        let m = model();
        let v = random_volume([16, 8, 8], 9);
        let cfg = InferenceConfig { window: [8; 3], overlap: 0.5, weights: BlendWeights::Gaussian };
        let (_, p) = sliding_window_predict(&m, &v, &cfg).unwrap();
        let g = Grid::from_vec(1, v.dims, v.voxels.clone());
        let wins: Vec<(usize, Grid<f32>)> = [0, 4, 8]
            .iter()
            .map(|&o| (o, softmax_channels(&segment(&m, &crop(&g, [o, 0, 0], [8; 3])).unwrap().0)))
            .collect();
        let n = p.voxels();
        for k in 0..7 {
            for z in 0..16 {
                let vals: Vec<f32> = wins.iter().filter(|(o, _)| (*o..o + 8).contains(&z)).map(|(o, w)| w.data[k * 512 + (z - o) * 64]).collect();
                let x = p.data[k * n + z * 64];
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_shapes_hold() {
        let m = model();
        let v = random_volume([12, 20, 9], 4);
        let cfg = InferenceConfig { window: [8; 3], overlap: 0.5, weights: BlendWeights::Gaussian };
        let (mask, p) = sliding_window_predict(&m, &v, &cfg).unwrap();
        assert_eq!(mask.dims, v.dims);
        assert_eq!(p.dims, v.dims);
        let n = p.voxels();
        for i in 0..n {
            let s: f32 = (0..7).map(|k| p.data[k * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(mask.labels.iter().all(|&l| l < 7));
    }

    #[test]
    fn undersized_volume_is_padded_and_cropped() {
        let m = model();
        let v = random_volume([5, 8, 3], 5);
        let cfg = InferenceConfig { window: [8; 3], overlap: 0.0, weights: BlendWeights::Uniform };
        let (mask, p) = sliding_window_predict(&m, &v, &cfg).unwrap();
        assert_eq!(mask.dims, [5, 8, 3]);
        let (padded, before) = pad(&Grid::from_vec(1, v.dims, v.voxels.clone()), [8; 3]);
        assert_eq!(before, [1, 0, 2]);
        let (l, _) = segment(&m, &padded).unwrap();
        assert_eq!(crop(&softmax_channels(&l), before, v.dims).data, p.data);
    }

    #[test]
    fn bad_windows_are_config_errors() {
        let m = model();
        let v = random_volume([8; 3], 6);
        for window in [[5, 8, 8], [0, 8, 8]] {
            let cfg = InferenceConfig { window, overlap: 0.0, weights: BlendWeights::Uniform };
            assert!(matches!(sliding_window_predict(&m, &v, &cfg), Err(Error::Config(_))));
        }
        let cfg = InferenceConfig { window: [8; 3], overlap: 1.0, weights: BlendWeights::Uniform };
        assert!(matches!(sliding_window_predict(&m, &v, &cfg), Err(Error::Config(_))));
    }
}
