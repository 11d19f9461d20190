//! The xLSTM-UNet: a 3D convolutional UNet whose downsampled encoder
//! stages interleave Vision-LSTM blocks built on a stabilized mLSTM cell.

pub mod checkpoint;
pub mod layers;
pub mod mlstm;
mod net;
pub mod profile;
pub mod vil;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint, CheckpointMeta, StoredTensor};
pub use net::{
    encode, encode_backward, forward_encoder, forward_segment, segment, segment_backward, volume_grid, EncoderCache,
    FeaturePyramid, SegmentCache,
};
pub use profile::{activation_memory, count_params, estimate_flops, layer_costs, ConvSpec, LayerCost};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub vil_blocks_per_stage: Vec<usize>,
    pub vil_head_dim: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            in_channels: 1,
            num_classes: crate::volio::NUM_CLASSES,
            stage_channels: vec![8, 16, 32, 64],
            vil_blocks_per_stage: vec![0, 1, 1, 2],
            vil_head_dim: 8,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("architecture: {m}")));
        if self.stage_channels.len() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.stage_channels.len()));
        }
        if self.stage_channels.len() != self.vil_blocks_per_stage.len() {
            return bad(format!(
                "stage_channels has {} entries but vil_blocks_per_stage has {}",
                self.stage_channels.len(),
                self.vil_blocks_per_stage.len()
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return bad("stage channel counts must be positive".into());
        }
        if self.vil_blocks_per_stage[0] != 0 {
            return bad("full-resolution stage 0 cannot hold ViL blocks".into());
        }
        if self.vil_head_dim == 0 {
            return bad("vil_head_dim must be positive".into());
        }
        for (s, (&c, &b)) in self.stage_channels.iter().zip(&self.vil_blocks_per_stage).enumerate() {
            if b > 0 && c % self.vil_head_dim != 0 {
                return bad(format!("stage {s}: {c} channels not divisible by head dim {}", self.vil_head_dim));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn min_divisor(&self) -> usize {
        1 << (self.num_stages() - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let q = self.min_divisor();
        if dims.iter().any(|&d| d == 0 || d % q != 0) {
            return Err(Error::Shape(format!("input dims {dims:?} must be positive multiples of {q}")));
        }
        Ok(())
    }

    pub(crate) fn stage_prefix(&self, s: usize) -> String {
        if s + 1 == self.num_stages() {
            "bot".to_string()
        } else {
            format!("enc.{s}")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Encoder,
    Bottleneck,
    Decoder,
    Head,
    Projector,
}

impl Partition {
    /// Encoder-side parameters (the SSL-trained part of the network).
    pub fn is_encoder(self) -> bool {
        matches!(self, Partition::Encoder | Partition::Bottleneck)
    }

    pub fn of_name(name: &str) -> Option<Partition> {
        let head = name.split('.').next()?;
        Some(match head {
            "enc" => Partition::Encoder,
            "bot" => Partition::Bottleneck,
            "dec" => Partition::Decoder,
            "head" => Partition::Head,
            "proj" => Partition::Projector,
            _ => return None,
        })
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Partition::Encoder => "encoder",
            Partition::Bottleneck => "bottleneck",
            Partition::Decoder => "decoder",
            Partition::Head => "head",
            Partition::Projector => "projector",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub tag: Partition,
}

/// Named tensors in name order. Also used for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: Partition, tensor: Tensor<T>) {
        self.entries.insert(name.into(), Param { tensor, tag });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    /// Raw data of a parameter known to exist.
    pub fn w(&self, name: &str) -> &[T] {
        match self.entries.get(name) {
            Some(p) => &p.tensor.data,
            None => panic!("missing parameter {name}"),
        }
    }

    pub fn w_mut(&mut self, name: &str) -> &mut [T] {
        match self.entries.get_mut(name) {
            Some(p) => &mut p.tensor.data,
            None => panic!("missing parameter {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { tensor: Tensor::zeros(&p.tensor.shape), tag: p.tag }))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { tensor: p.tensor.cast(), tag: p.tag }))
                .collect(),
        }
    }

    /// `self[name] += g` elementwise.
    pub fn accumulate(&mut self, name: &str, g: &[T]) {
        let dst = self.w_mut(name);
        assert_eq!(dst.len(), g.len(), "gradient size for {name}");
        dst.iter_mut().zip(g).for_each(|(d, v)| *d += *v);
    }

    /// `self += other` over all shared names.
    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (k, p) in other.iter() {
            self.accumulate(k, &p.tensor.data);
        }
    }

    pub fn scale(&mut self, s: T) {
        for p in self.entries.values_mut() {
            p.tensor.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, pa), (b, pb))| a == b && pa.tensor.shape == pb.tensor.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.data.iter().all(|v| v.is_finite()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.tensor.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

/// The network: its configuration plus the parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub cfg: ArchitectureConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    pub fn w(&self, name: &str) -> &[T] {
        self.params.w(name)
    }

    /// Check names, shapes and tags against the layout implied by `cfg`.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let specs = layout(&self.cfg);
        if specs.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for spec in &specs {
            let p = self
                .params
                .param(&spec.name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {}", spec.name)))?;
            if p.tensor.shape != spec.shape || p.tag != spec.tag {
                return Err(Error::Shape(format!(
                    "parameter {}: shape {:?}/{} expected {:?}/{}",
                    spec.name, p.tensor.shape, p.tag, spec.shape, spec.tag
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    HeUniform { fan_in: usize },
    Orthogonal,
    Const(f32),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: Partition,
    pub init: Init,
}

/// Every parameter implied by `cfg`, in construction order.
pub(crate) fn layout(cfg: &ArchitectureConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        let tag = Partition::of_name(&name).expect("known prefix");
        out.push(ParamSpec { name, shape, tag, init });
    };
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, cin: usize, cout: usize, k: usize| {
        push(format!("{name}.w"), vec![cout, cin, k, k, k], Init::HeUniform { fan_in: cin * k * k * k });
        push(format!("{name}.b"), vec![cout], Init::Const(0.0));
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, c: usize| {
        push(format!("{name}.g"), vec![c], Init::Const(1.0));
        push(format!("{name}.b"), vec![c], Init::Const(0.0));
    };
    let ch = &cfg.stage_channels;
    for s in 0..cfg.num_stages() {
        let p = cfg.stage_prefix(s);
        if s == 0 {
            conv(&mut push, &format!("{p}.conv"), cfg.in_channels, ch[0], 3);
            norm(&mut push, &format!("{p}.norm"), ch[0]);
            continue;
        }
        conv(&mut push, &format!("{p}.down"), ch[s - 1], ch[s], 2);
        norm(&mut push, &format!("{p}.down_norm"), ch[s]);
        conv(&mut push, &format!("{p}.conv"), ch[s], ch[s], 3);
        norm(&mut push, &format!("{p}.norm"), ch[s]);
        let c = ch[s];
        let heads = c / cfg.vil_head_dim.max(1);
        for j in 0..cfg.vil_blocks_per_stage[s] {
            let b = format!("{p}.vil.{j}");
            norm(&mut push, &format!("{b}.norm"), c);
            for proj in ["wq", "wk", "wv", "wo"] {
                push(format!("{b}.{proj}"), vec![c, c], Init::Orthogonal);
                push(format!("{b}.b{}", &proj[1..]), vec![c], Init::Const(0.0));
            }
            push(format!("{b}.wi"), vec![heads, c], Init::Orthogonal);
            push(format!("{b}.bi"), vec![heads], Init::Const(0.0));
            push(format!("{b}.wf"), vec![heads, c], Init::Orthogonal);
            push(format!("{b}.bf"), vec![heads], Init::Const(1.0));
            push(format!("{b}.wout"), vec![c, c], Init::Orthogonal);
            push(format!("{b}.bout"), vec![c], Init::Const(0.0));
        }
    }
    for s in (0..cfg.num_stages() - 1).rev() {
        conv(&mut push, &format!("dec.{s}.up"), ch[s + 1], ch[s], 1);
        conv(&mut push, &format!("dec.{s}.conv"), 2 * ch[s], ch[s], 3);
        norm(&mut push, &format!("dec.{s}.norm"), ch[s]);
    }
    conv(&mut push, "head", ch[0], cfg.num_classes, 1);
    out
}

/// Initialize a network: He-uniform convolutions, orthogonal ViL
/// projections, forget-gate bias +1, unit norm scales, zero biases.
pub fn build_model(cfg: &ArchitectureConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for spec in layout(cfg) {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::HeUniform { fan_in } => layers::he_uniform(n, fan_in, rng),
            Init::Orthogonal => layers::orthogonal(spec.shape[0], spec.shape[1], rng),
            Init::Const(v) => vec![v; n],
        };
        params.insert(spec.name, spec.tag, Tensor::from_vec(&spec.shape, data));
    }
    Ok(ModelParams { cfg: cfg.clone(), params })
}
