//! Forward/backward kernels shared by the network: 3D convolution
//! (im2col + GEMM), per-sample layer normalization of feature grids, row-wise layer norm,
//! GELU, and nearest-neighbour ×2 upsampling.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tensor::{matmul, Grid, Scalar};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom { kernel: 3, stride: 1, pad: 1 };
    pub const DOWN2: ConvGeom = ConvGeom { kernel: 2, stride: 2, pad: 0 };
    pub const POINT: ConvGeom = ConvGeom { kernel: 1, stride: 1, pad: 0 };

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|d| (d + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Rows `(ic, kz, ky, kx)`, columns = output voxels.
fn im2col<T: Scalar>(x: &Grid<T>, g: ConvGeom, out: [usize; 3]) -> Vec<T> {
    let k = g.kernel;
    let [d, h, w] = x.dims;
    let n_out = out[0] * out[1] * out[2];
    let mut cols = vec![T::zero(); x.channels * k * k * k * n_out];
    let mut row = 0;
    for ic in 0..x.channels {
        let src = x.channel(ic);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oz in 0..out[0] {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[(iz as usize * h + iy as usize) * w..][..w];
                            let dst_row = &mut dst[(oz * out[1] + oy) * out[2]..][..out[2]];
                            if g.stride == 1 {
                                // ix = ox + kx - pad
                                let lo = g.pad.saturating_sub(kx);
                                let hi = (w + g.pad - kx).min(out[2]);
                                if lo < hi {
                                    dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - g.pad..hi + kx - g.pad]);
                                }
                            } else {
                                for (ox, v) in dst_row.iter_mut().enumerate() {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *v = src_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `gx`.
fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, out: [usize; 3], gx: &mut Grid<T>) {
    let k = g.kernel;
    let [d, h, w] = gx.dims;
    let n_out = out[0] * out[1] * out[2];
    let mut row = 0;
    for ic in 0..gx.channels {
        let dstc = gx.channel_mut(ic);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oz in 0..out[0] {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dstc[(iz as usize * h + iy as usize) * w..][..w];
                            let src_row = &src[(oz * out[1] + oy) * out[2]..][..out[2]];
                            if g.stride == 1 {
                                let lo = g.pad.saturating_sub(kx);
                                let hi = (w + g.pad - kx).min(out[2]);
                                for ox in lo..hi {
                                    dst_row[ox + kx - g.pad] += src_row[ox];
                                }
                            } else {
                                for (ox, &v) in src_row.iter().enumerate() {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst_row[ix as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y = W ∗ x + b` with `W` of shape `(Cout, Cin, k, k, k)`.
pub fn conv3d<T: Scalar>(x: &Grid<T>, weight: &[T], bias: &[T], cout: usize, g: ConvGeom) -> Grid<T> {
    let out = g.out_dims(x.dims);
    let n_out = out[0] * out[1] * out[2];
    let kdim = x.channels * g.kernel.pow(3);
    assert_eq!(weight.len(), cout * kdim, "conv3d: weight shape");
    let mut y = Grid::zeros(cout, out);
    for (oc, b) in bias.iter().enumerate() {
        y.channel_mut(oc).iter_mut().for_each(|v| *v = *b);
    }
    if g.is_pointwise() {
        matmul(weight, false, &x.data, false, &mut y.data, cout, kdim, n_out, true);
    } else {
        let cols = im2col(x, g, out);
        matmul(weight, false, &cols, false, &mut y.data, cout, kdim, n_out, true);
    }
    y
}

pub struct ConvGrads<T> {
    pub input: Option<Grid<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Scalar>(x: &Grid<T>, weight: &[T], gy: &Grid<T>, g: ConvGeom, need_input: bool) -> ConvGrads<T> {
    let cout = gy.channels;
    let out = gy.dims;
    let n_out = gy.voxels();
    let kdim = x.channels * g.kernel.pow(3);
    let bias: Vec<T> = (0..cout).map(|oc| gy.channel(oc).iter().copied().sum()).collect();
    let mut gw = vec![T::zero(); cout * kdim];
    let input = if g.is_pointwise() {
        matmul(&gy.data, false, &x.data, true, &mut gw, cout, n_out, kdim, false);
        need_input.then(|| {
            let mut gx = Grid::zeros(x.channels, x.dims);
            matmul(weight, true, &gy.data, false, &mut gx.data, kdim, cout, n_out, false);
            gx
        })
    } else {
        let cols = im2col(x, g, out);
        matmul(&gy.data, false, &cols, true, &mut gw, cout, n_out, kdim, false);
        drop(cols);
        need_input.then(|| {
            let mut gcols = vec![T::zero(); kdim * n_out];
            matmul(weight, true, &gy.data, false, &mut gcols, kdim, cout, n_out, false);
            let mut gx = Grid::zeros(x.channels, x.dims);
            col2im(&gcols, g, out, &mut gx);
            gx
        })
    };
    ConvGrads { input, weight: gw, bias }
}

/// Layer norm over all of `(C, D, H, W)` for one sample, per-channel affine.
pub struct ChannelNormCache<T> {
    pub xhat: Grid<T>,
    pub inv_std: T,
}

pub fn channel_norm<T: Scalar>(x: &Grid<T>, gamma: &[T], beta: &[T]) -> (Grid<T>, ChannelNormCache<T>) {
    let count = T::lit(x.data.len() as f64);
    let mean = x.data.iter().copied().sum::<T>() / count;
    let var = x.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
    let inv_std = T::one() / (var + T::lit(NORM_EPS)).sqrt();
    let mut xhat = x.clone();
    xhat.data.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
    let mut y = xhat.clone();
    for c in 0..x.channels {
        let (g, b) = (gamma[c], beta[c]);
        y.channel_mut(c).iter_mut().for_each(|v| *v = g * *v + b);
    }
    (y, ChannelNormCache { xhat, inv_std })
}

pub fn channel_norm_backward<T: Scalar>(cache: &ChannelNormCache<T>, gamma: &[T], gy: &Grid<T>) -> (Grid<T>, Vec<T>, Vec<T>) {
    let c = gy.channels;
    let count = T::lit(gy.data.len() as f64);
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let mut m1 = T::zero();
    let mut m2 = T::zero();
    for ch in 0..c {
        for (&g, &xh) in gy.channel(ch).iter().zip(cache.xhat.channel(ch)) {
            ggamma[ch] += g * xh;
            gbeta[ch] += g;
            let d = g * gamma[ch];
            m1 += d;
            m2 += d * xh;
        }
    }
    m1 /= count;
    m2 /= count;
    let mut gx = Grid::zeros(c, gy.dims);
    for ch in 0..c {
        let out = gx.channel_mut(ch);
        for ((o, &g), &xh) in out.iter_mut().zip(gy.channel(ch)).zip(cache.xhat.channel(ch)) {
            *o = cache.inv_std * (g * gamma[ch] - m1 - xh * m2);
        }
    }
    (gx, ggamma, gbeta)
}

/// Layer norm over the last axis of a row-major `(rows, cols)` matrix.
pub struct RowNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn row_norm<T: Scalar>(x: &[T], cols: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, RowNormCache<T>) {
    let rows = x.len() / cols;
    let cf = T::lit(cols as f64);
    let eps = T::lit(NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let xh = (row[j] - mean) * is;
            xhat[r * cols + j] = xh;
            y[r * cols + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, RowNormCache { xhat, inv_std })
}

pub fn row_norm_backward<T: Scalar>(cache: &RowNormCache<T>, cols: usize, gamma: &[T], gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = gy.len() / cols;
    let cf = T::lit(cols as f64);
    let mut gx = vec![T::zero(); gy.len()];
    let mut ggamma = vec![T::zero(); cols];
    let mut gbeta = vec![T::zero(); cols];
    for r in 0..rows {
        let g = &gy[r * cols..(r + 1) * cols];
        let xh = &cache.xhat[r * cols..(r + 1) * cols];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..cols {
            ggamma[j] += g[j] * xh[j];
            gbeta[j] += g[j];
            let dxh = g[j] * gamma[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= cf;
        m2 /= cf;
        for j in 0..cols {
            gx[r * cols + j] = cache.inv_std[r] * (g[j] * gamma[j] - m1 - xh[j] * m2);
        }
    }
    (gx, ggamma, gbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn upsample2<T: Scalar>(x: &Grid<T>) -> Grid<T> {
    let [d, h, w] = x.dims;
    let od = [2 * d, 2 * h, 2 * w];
    let mut y = Grid::zeros(x.channels, od);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for z in 0..od[0] {
            for yy in 0..od[1] {
                let srow = &src[((z / 2) * h + yy / 2) * w..][..w];
                let drow = &mut dst[(z * od[1] + yy) * od[2]..][..od[2]];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = srow[xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(gy: &Grid<T>) -> Grid<T> {
    let od = gy.dims;
    let [d, h, w] = od.map(|v| v / 2);
    let mut gx = Grid::zeros(gy.channels, [d, h, w]);
    for c in 0..gy.channels {
        let src = gy.channel(c);
        let dst = gx.channel_mut(c);
        for z in 0..od[0] {
            for yy in 0..od[1] {
                let srow = &src[(z * od[1] + yy) * od[2]..][..od[2]];
                let drow = &mut dst[((z / 2) * h + yy / 2) * w..][..w];
                for (xx, &v) in srow.iter().enumerate() {
                    drow[xx / 2] += v;
                }
            }
        }
    }
    gx
}

/// Transpose a row-major `(rows, cols)` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(n: usize, fan_in: usize, rng: &mut Rng) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
}

/// Semi-orthogonal `(rows, cols)` matrix from Gram–Schmidt on Gaussian
/// vectors: orthonormal rows when `rows <= cols`, orthonormal columns
/// otherwise.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f32> {
    let (n, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { basis[r][c] } else { basis[c][r] } as f32;
        }
    }
    out
}
