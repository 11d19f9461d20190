//! UNet forward and backward passes.

use rayon::prelude::*;

use crate::tensor::{Grid, Scalar};
use crate::volio::Volume3D;
use crate::{Error, Result};

use super::layers::{
    channel_norm, channel_norm_backward, conv3d, conv3d_backward, gelu, gelu_grad, upsample2, upsample2_backward,
    ChannelNormCache, ConvGeom,
};
use super::vil::{vil_block, vil_block_backward, VilCache};
use super::{ModelParams, ParamSet};

/// Per-stage feature grids; the last one is the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Grid<T>>,
}

impl<T> FeaturePyramid<T> {
    pub fn bottleneck(&self) -> &Grid<T> {
        self.levels.last().expect("pyramid has at least two levels")
    }
}

struct ConvBlockCache<T> {
    conv: String,
    norm_name: String,
    geom: ConvGeom,
    input: Grid<T>,
    norm: ChannelNormCache<T>,
    pre: Grid<T>,
}

/// conv → channel norm → GELU
fn conv_block<T: Scalar>(p: &ParamSet<T>, conv: &str, norm: &str, x: Grid<T>, geom: ConvGeom) -> (Grid<T>, ConvBlockCache<T>) {
    let bias = p.w(&format!("{conv}.b"));
    let y = conv3d(&x, p.w(&format!("{conv}.w")), bias, bias.len(), geom);
    let (pre, nc) = channel_norm(&y, p.w(&format!("{norm}.g")), p.w(&format!("{norm}.b")));
    let mut out = pre.clone();
    out.data.iter_mut().for_each(|v| *v = gelu(*v));
    let cache = ConvBlockCache { conv: conv.into(), norm_name: norm.into(), geom, input: x, norm: nc, pre };
    (out, cache)
}

fn conv_block_backward<T: Scalar>(
    p: &ParamSet<T>,
    cache: &ConvBlockCache<T>,
    gy: &Grid<T>,
    grads: &mut ParamSet<T>,
    need_input: bool,
) -> Option<Grid<T>> {
    let mut gpre = gy.clone();
    gpre.data.iter_mut().zip(&cache.pre.data).for_each(|(g, &x)| *g *= gelu_grad(x));
    let gname = format!("{}.g", cache.norm_name);
    let (gconv, gg, gb) = channel_norm_backward(&cache.norm, p.w(&gname), &gpre);
    grads.accumulate(&gname, &gg);
    grads.accumulate(&format!("{}.b", cache.norm_name), &gb);
    let wname = format!("{}.w", cache.conv);
    let cg = conv3d_backward(&cache.input, p.w(&wname), &gconv, cache.geom, need_input);
    grads.accumulate(&wname, &cg.weight);
    grads.accumulate(&format!("{}.b", cache.conv), &cg.bias);
    cg.input
}

struct StageCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
    vils: Vec<VilCache<T>>,
}

pub struct EncoderCache<T> {
    stages: Vec<StageCache<T>>,
}

fn check_input<T: Scalar>(m: &ModelParams<T>, x: &Grid<T>) -> Result<()> {
    if x.channels != m.cfg.in_channels {
        return Err(Error::Shape(format!("input has {} channels, model expects {}", x.channels, m.cfg.in_channels)));
    }
    m.cfg.check_dims(x.dims)
}

/// Encoder pass for one sample.
pub fn encode<T: Scalar>(m: &ModelParams<T>, x: &Grid<T>) -> Result<(FeaturePyramid<T>, EncoderCache<T>)> {
    check_input(m, x)?;
    let cfg = &m.cfg;
    let p = &m.params;
    let mut levels = Vec::with_capacity(cfg.num_stages());
    let mut stages = Vec::with_capacity(cfg.num_stages());
    let mut block_index = 0usize;
    let mut cur = x.clone();
    for s in 0..cfg.num_stages() {
        let pre = cfg.stage_prefix(s);
        let mut blocks = Vec::new();
        if s > 0 {
            let (h, c) = conv_block(p, &format!("{pre}.down"), &format!("{pre}.down_norm"), cur, ConvGeom::DOWN2);
            blocks.push(c);
            cur = h;
        }
        let (h, c) = conv_block(p, &format!("{pre}.conv"), &format!("{pre}.norm"), cur, ConvGeom::SAME3);
        blocks.push(c);
        cur = h;
        let heads = cfg.stage_channels[s] / cfg.vil_head_dim;
        let mut vils = Vec::new();
        for j in 0..cfg.vil_blocks_per_stage[s] {
            let (h, c) = vil_block(p, &format!("{pre}.vil.{j}"), heads, block_index % 2 == 1, &cur)?;
            block_index += 1;
            vils.push(c);
            cur = h;
        }
        levels.push(cur.clone());
        stages.push(StageCache { blocks, vils });
    }
    Ok((FeaturePyramid { levels }, EncoderCache { stages }))
}

fn encoder_backward<T: Scalar>(
    m: &ModelParams<T>,
    cache: &EncoderCache<T>,
    mut level_grads: Vec<Option<Grid<T>>>,
    grads: &mut ParamSet<T>,
) {
    let p = &m.params;
    let mut carry: Option<Grid<T>> = None;
    for s in (0..cache.stages.len()).rev() {
        let mut g = match (level_grads[s].take(), carry.take()) {
            (Some(mut a), Some(b)) => {
                a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => continue,
        };
        let st = &cache.stages[s];
        for vc in st.vils.iter().rev() {
            g = vil_block_backward(p, vc, &g, grads);
        }
        for (i, bc) in st.blocks.iter().enumerate().rev() {
            if let Some(gx) = conv_block_backward(p, bc, &g, grads, s > 0 || i > 0) {
                g = gx;
            }
        }
        if s > 0 {
            carry = Some(g);
        }
    }
}

/// Gradients of all encoder parameters given `∂L/∂bottleneck`.
pub fn encode_backward<T: Scalar>(m: &ModelParams<T>, cache: &EncoderCache<T>, g_bottleneck: &Grid<T>) -> ParamSet<T> {
    let mut grads = m.params.zeros_like();
    let mut level_grads: Vec<Option<Grid<T>>> = (0..cache.stages.len()).map(|_| None).collect();
    *level_grads.last_mut().expect("stages") = Some(g_bottleneck.clone());
    encoder_backward(m, cache, level_grads, &mut grads);
    grads
}

struct DecCache<T> {
    level: usize,
    up_input: Grid<T>,
    block: ConvBlockCache<T>,
}

pub struct SegmentCache<T> {
    enc: EncoderCache<T>,
    dec: Vec<DecCache<T>>,
    head_input: Grid<T>,
}

/// Full segmentation pass for one sample: logits `(num_classes, D, H, W)`.
pub fn segment<T: Scalar>(m: &ModelParams<T>, x: &Grid<T>) -> Result<(Grid<T>, SegmentCache<T>)> {
    let (pyr, enc) = encode(m, x)?;
    let p = &m.params;
    let ch = &m.cfg.stage_channels;
    let mut levels = pyr.levels;
    let mut u = levels.pop().expect("bottleneck");
    let mut dec = Vec::new();
    for s in (0..ch.len() - 1).rev() {
        let up = conv3d(&u, p.w(&format!("dec.{s}.up.w")), p.w(&format!("dec.{s}.up.b")), ch[s], ConvGeom::POINT);
        let cat = Grid::concat(&upsample2(&up), &levels[s]);
        let (out, block) = conv_block(p, &format!("dec.{s}.conv"), &format!("dec.{s}.norm"), cat, ConvGeom::SAME3);
        dec.push(DecCache { level: s, up_input: u, block });
        u = out;
    }
    let logits = conv3d(&u, p.w("head.w"), p.w("head.b"), m.cfg.num_classes, ConvGeom::POINT);
    Ok((logits, SegmentCache { enc, dec, head_input: u }))
}

/// Parameter gradients from `∂L/∂logits`. With `train_encoder = false`
/// the encoder and bottleneck entries stay zero and their backward is skipped.
pub fn segment_backward<T: Scalar>(m: &ModelParams<T>, cache: &SegmentCache<T>, g_logits: &Grid<T>, train_encoder: bool) -> ParamSet<T> {
    let p = &m.params;
    let mut grads = p.zeros_like();
    let hg = conv3d_backward(&cache.head_input, p.w("head.w"), g_logits, ConvGeom::POINT, true);
    grads.accumulate("head.w", &hg.weight);
    grads.accumulate("head.b", &hg.bias);
    let mut gu = hg.input.expect("requested");
    let stages = m.cfg.num_stages();
    let mut level_grads: Vec<Option<Grid<T>>> = (0..stages).map(|_| None).collect();
    for dc in cache.dec.iter().rev() {
        let s = dc.level;
        let gcat = conv_block_backward(p, &dc.block, &gu, &mut grads, true).expect("requested");
        let (gup, gskip) = gcat.split_channels(m.cfg.stage_channels[s]);
        level_grads[s] = Some(gskip);
        let g1 = upsample2_backward(&gup);
        let wname = format!("dec.{s}.up.w");
        let cg = conv3d_backward(&dc.up_input, p.w(&wname), &g1, ConvGeom::POINT, true);
        grads.accumulate(&wname, &cg.weight);
        grads.accumulate(&format!("dec.{s}.up.b"), &cg.bias);
        gu = cg.input.expect("requested");
    }
    level_grads[stages - 1] = Some(gu);
    if train_encoder {
        encoder_backward(m, &cache.enc, level_grads, &mut grads);
    }
    grads
}

/// Single-channel grid view of a volume.
pub fn volume_grid(v: &Volume3D) -> Grid<f32> {
    Grid::from_vec(1, v.dims, v.voxels.clone())
}

/// Encoder pass over a batch; samples are independent.
pub fn forward_encoder(m: &ModelParams, batch: &[Volume3D]) -> Result<Vec<FeaturePyramid<f32>>> {
    batch.par_iter().map(|v| encode(m, &volume_grid(v)).map(|(p, _)| p)).collect()
}

/// Segmentation logits for each volume in the batch.
pub fn forward_segment(m: &ModelParams, batch: &[Volume3D]) -> Result<Vec<Grid<f32>>> {
    batch.par_iter().map(|v| segment(m, &volume_grid(v)).map(|(l, _)| l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureConfig, Partition};
    use crate::rng::rng_from_seed;
    use crate::volio::Modality;
    use rand::Rng as _;

    fn model64(seed: u64) -> ModelParams<f64> {
        build_model(&ArchitectureConfig::default(), &mut rng_from_seed(seed)).unwrap().cast()
    }

    fn rand_grid(c: usize, dims: [usize; 3], seed: u64) -> Grid<f64> {
        let mut rng = rng_from_seed(seed);
        let n = c * dims.iter().product::<usize>();
        Grid::from_vec(c, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn check_fd(name: &str, idx: usize, fd: f64, an: f64) {
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        assert!(rel < 1e-3 || (fd - an).abs() < 1e-9, "{name}[{idx}] fd {fd} an {an}");
    }

    #[test]
    fn shapes_through_the_net() {
        let m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(0)).unwrap();
        let v = Volume3D::filled(0.1, [32; 3], [1.0; 3], Modality::CT);
        let pyr = forward_encoder(&m, std::slice::from_ref(&v)).unwrap();
        assert_eq!(pyr[0].bottleneck().dims, [4, 4, 4]);
        assert_eq!(pyr[0].bottleneck().channels, 64);
        for (s, l) in pyr[0].levels.iter().enumerate() {
            assert_eq!(l.dims, [32 >> s; 3]);
        }
        let logits = forward_segment(&m, &[v]).unwrap();
        assert_eq!((logits[0].channels, logits[0].dims), (7, [32, 32, 32]));
    }

    #[test]
    fn bad_dims_are_shape_errors() {
        let m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(0)).unwrap();
        let v = Volume3D::filled(0.0, [12, 16, 16], [1.0; 3], Modality::CT);
        assert!(matches!(forward_encoder(&m, &[v]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_decoder_and_head_give_zero_logits() {
        let mut m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(0)).unwrap();
        for (_, p) in m.params.iter_mut() {
            if p.tag == Partition::Head {
                p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let v = Volume3D::filled(0.7, [8; 3], [1.0; 3], Modality::CT);
        let l = forward_segment(&m, &[v]).unwrap();
        assert!(l[0].data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_has_no_cross_sample_mixing() {
        let m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(2)).unwrap();
        let a = Volume3D::new(rand_grid(1, [16; 3], 1).cast::<f32>().data, [16; 3], [1.0; 3], Modality::CT, "x").unwrap();
        let b = Volume3D::new(rand_grid(1, [16; 3], 2).cast::<f32>().data, [16; 3], [1.0; 3], Modality::CT, "x").unwrap();
        let both = forward_encoder(&m, &[a.clone(), b.clone()]).unwrap();
        let ea = forward_encoder(&m, &[a]).unwrap();
        let eb = forward_encoder(&m, &[b]).unwrap();
        for (x, y) in both[0].bottleneck().data.iter().zip(&ea[0].bottleneck().data) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in both[1].bottleneck().data.iter().zip(&eb[0].bottleneck().data) {
            assert!((x - y).abs() < 1e-5);
        }
        let doubled: Vec<f32> = both[0].bottleneck().data.clone();
        assert_ne!(doubled, both[1].bottleneck().data);
    }

    #[test]
    fn stage0_convolution_translates_with_input() {
        let m = model64(3);
        let x = rand_grid(1, [8; 3], 4);
        // shift by one voxel along x, zero fill
        let mut shifted = Grid::zeros(1, [8; 3]);
        for z in 0..8 {
            for y in 0..8 {
                for xx in 1..8 {
                    shifted.data[(z * 8 + y) * 8 + xx] = x.data[(z * 8 + y) * 8 + xx - 1];
                }
            }
        }
        let conv = |g: &Grid<f64>| conv3d(g, m.w("enc.0.conv.w"), m.w("enc.0.conv.b"), 8, ConvGeom::SAME3);
        let (fa, fb) = (&conv(&x), &conv(&shifted));
        for c in 0..fa.channels {
            for z in 1..7 {
                for y in 1..7 {
                    for xx in 2..7 {
                        let u = fa.channel(c)[(z * 8 + y) * 8 + xx - 1];
                        let v = fb.channel(c)[(z * 8 + y) * 8 + xx];
                        assert!((u - v).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let m = model64(5);
        let x = rand_grid(1, [8; 3], 6);
        let (pyr, cache) = encode(&m, &x).unwrap();
        let r = rand_grid(pyr.bottleneck().channels, pyr.bottleneck().dims, 7);
        let grads = encode_backward(&m, &cache, &r);
        let loss = |m: &ModelParams<f64>| -> f64 {
            let (p, _) = encode(m, &x).unwrap();
            p.bottleneck().data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let mut rng = rng_from_seed(8);
        let eps = 1e-5;
        for name in m.params.names().filter(|n| n.starts_with("enc.") || n.starts_with("bot.")).cloned().collect::<Vec<_>>() {
            let len = m.w(&name).len();
            for _ in 0..2 {
                let idx = rng.gen_range(0..len);
                let mut a = m.clone();
                a.params.w_mut(&name)[idx] += eps;
                let mut b = m.clone();
                b.params.w_mut(&name)[idx] -= eps;
                check_fd(&name, idx, (loss(&a) - loss(&b)) / (2.0 * eps), grads.w(&name)[idx]);
            }
        }
    }

    #[test]
    fn segment_gradient_matches_finite_differences() {
        let m = model64(9);
        let x = rand_grid(1, [8; 3], 10);
        let (logits, cache) = segment(&m, &x).unwrap();
        let n = logits.data.len() as f64;
        let g = Grid::from_vec(logits.channels, logits.dims, vec![1.0 / n; logits.data.len()]);
        let grads = segment_backward(&m, &cache, &g, true);
        let frozen = segment_backward(&m, &cache, &g, false);
        let loss = |m: &ModelParams<f64>| -> f64 {
            let (l, _) = segment(m, &x).unwrap();
            l.data.iter().sum::<f64>() / n
        };
        let mut rng = rng_from_seed(11);
        let eps = 1e-5;
        for name in m.params.names().cloned().collect::<Vec<_>>() {
            let len = m.w(&name).len();
            let tag = m.params.param(&name).unwrap().tag;
            for _ in 0..2 {
                let idx = rng.gen_range(0..len);
                let mut a = m.clone();
                a.params.w_mut(&name)[idx] += eps;
                let mut b = m.clone();
                b.params.w_mut(&name)[idx] -= eps;
                check_fd(&name, idx, (loss(&a) - loss(&b)) / (2.0 * eps), grads.w(&name)[idx]);
                if tag.is_encoder() {
                    assert_eq!(frozen.w(&name)[idx], 0.0);
                } else {
                    assert_eq!(frozen.w(&name)[idx], grads.w(&name)[idx]);
                }
            }
        }
    }
}
