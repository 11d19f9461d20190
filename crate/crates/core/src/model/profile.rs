//! Parameter, FLOP and activation-memory accounting.
//!
//! Conventions:
//! - convolution FLOPs = 2·k³·Cin·Cout per output voxel (bias adds ignored);
//! - projection FLOPs = 2·in·out per token;
//! - mLSTM cell FLOPs = 5d² + 6d per head per token (memory update 3d²,
//!   readout 2d², normalizer 3d, dot 2d, division d);
//! - norms, GELU, gates and elementwise ops are not counted as FLOPs;
//! - activation memory counts every stored layer output at 4 bytes, plus
//!   the per-token recurrent state H·(d² + d + 1) of each ViL block.

use crate::tensor::Scalar;
use crate::Result;

use super::layers::ConvGeom;
use super::{ArchitectureConfig, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    fn geom(&self) -> ConvGeom {
        ConvGeom { kernel: self.kernel, stride: self.stride, pad: self.pad }
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        self.geom().out_dims(dims)
    }

    pub fn params(&self) -> u64 {
        (self.cout * self.cin * self.kernel.pow(3) + self.cout) as u64
    }

    pub fn flops(&self, dims: [usize; 3]) -> u64 {
        let vox: usize = self.out_dims(dims).iter().product();
        2 * (self.kernel.pow(3) * self.cin * self.cout * vox) as u64
    }

    pub fn activations(&self, dims: [usize; 3]) -> u64 {
        (self.cout * self.out_dims(dims).iter().product::<usize>()) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// Stored f32 elements.
    pub activations: u64,
}

fn conv_block(out: &mut Vec<LayerCost>, name: &str, spec: ConvSpec, dims: [usize; 3]) -> [usize; 3] {
    let od = spec.out_dims(dims);
    let act = spec.activations(dims);
    out.push(LayerCost { name: format!("{name}.conv"), params: spec.params(), flops: spec.flops(dims), activations: act });
    out.push(LayerCost { name: format!("{name}.norm"), params: 2 * spec.cout as u64, flops: 0, activations: act });
    out.push(LayerCost { name: format!("{name}.gelu"), params: 0, flops: 0, activations: act });
    od
}

fn vil_block(out: &mut Vec<LayerCost>, name: &str, c: usize, head_dim: usize, dims: [usize; 3]) {
    let n = dims.iter().product::<usize>() as u64;
    let c64 = c as u64;
    let h = (c / head_dim) as u64;
    let d = head_dim as u64;
    let mut push = |suffix: &str, params: u64, flops: u64, activations: u64| {
        out.push(LayerCost { name: format!("{name}.{suffix}"), params, flops, activations });
    };
    push("norm", 2 * c64, 0, n * c64);
    push("qkvo", 4 * (c64 * c64 + c64), 4 * 2 * c64 * c64 * n, 4 * n * c64);
    push("gates", 2 * (h * c64 + h), 2 * 2 * h * c64 * n, 2 * n * h);
    push("mlstm", 0, n * h * (5 * d * d + 6 * d), n * c64 + n * h * (d * d + d + 1));
    push("outgate", 0, 0, n * c64);
    push("out", c64 * c64 + c64, 2 * c64 * c64 * n, n * c64);
}

/// Per-layer costs of the network for one input of spatial size `dims`.
pub fn layer_costs(cfg: &ArchitectureConfig, dims: [usize; 3]) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    cfg.check_dims(dims)?;
    let ch = &cfg.stage_channels;
    let mut out = Vec::new();
    let mut cur = dims;
    let mut stage_dims = Vec::new();
    for s in 0..cfg.num_stages() {
        let pre = cfg.stage_prefix(s);
        if s == 0 {
            let spec = ConvSpec { cin: cfg.in_channels, cout: ch[0], kernel: 3, stride: 1, pad: 1 };
            cur = conv_block(&mut out, &pre, spec, cur);
        } else {
            let down = ConvSpec { cin: ch[s - 1], cout: ch[s], kernel: 2, stride: 2, pad: 0 };
            cur = conv_block(&mut out, &format!("{pre}.down"), down, cur);
            let same = ConvSpec { cin: ch[s], cout: ch[s], kernel: 3, stride: 1, pad: 1 };
            cur = conv_block(&mut out, &pre, same, cur);
            for j in 0..cfg.vil_blocks_per_stage[s] {
                vil_block(&mut out, &format!("{pre}.vil.{j}"), ch[s], cfg.vil_head_dim, cur);
            }
        }
        stage_dims.push(cur);
    }
    for s in (0..cfg.num_stages() - 1).rev() {
        let up = ConvSpec { cin: ch[s + 1], cout: ch[s], kernel: 1, stride: 1, pad: 0 };
        let low = stage_dims[s + 1];
        out.push(LayerCost { name: format!("dec.{s}.up"), params: up.params(), flops: up.flops(low), activations: up.activations(low) });
        let hi = stage_dims[s];
        let vox = hi.iter().product::<usize>() as u64;
        out.push(LayerCost { name: format!("dec.{s}.upsample"), params: 0, flops: 0, activations: ch[s] as u64 * vox });
        out.push(LayerCost { name: format!("dec.{s}.concat"), params: 0, flops: 0, activations: 2 * ch[s] as u64 * vox });
        let spec = ConvSpec { cin: 2 * ch[s], cout: ch[s], kernel: 3, stride: 1, pad: 1 };
        conv_block(&mut out, &format!("dec.{s}"), spec, hi);
    }
    let head = ConvSpec { cin: ch[0], cout: cfg.num_classes, kernel: 1, stride: 1, pad: 0 };
    out.push(LayerCost { name: "head".into(), params: head.params(), flops: head.flops(dims), activations: head.activations(dims) });
    Ok(out)
}

/// Exact number of parameter elements.
pub fn count_params<T: Scalar>(m: &ModelParams<T>) -> u64 {
    m.params.numel() as u64
}

pub fn estimate_flops(cfg: &ArchitectureConfig, dims: [usize; 3]) -> Result<u64> {
    Ok(layer_costs(cfg, dims)?.iter().map(|l| l.flops).sum())
}

/// Bytes of stored forward activations at f32.
pub fn activation_memory(cfg: &ArchitectureConfig, dims: [usize; 3]) -> Result<u64> {
    Ok(4 * layer_costs(cfg, dims)?.iter().map(|l| l.activations).sum::<u64>())
}
