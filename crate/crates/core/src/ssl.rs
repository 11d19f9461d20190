//! Student–teacher self-supervised pretraining of the encoder, plus the
//! refinement continuation on a new unlabeled pool.
//!
//! Per step: two augmented views per volume; the student encodes both,
//! pools the bottleneck and projects to K logits; the teacher does the same
//! without gradients and its logits are centered, sharpened and
//! softmaxed. The loss pairs each student view with the other view's
//! teacher target. The student takes an Adam step and the teacher follows
//! by momentum.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugPolicy};
use crate::manifest::Manifest;
use crate::model::checkpoint::{stash, unstash};
use crate::model::layers::{gelu, gelu_grad, he_uniform};
use crate::model::mlstm::{linear, linear_backward};
use crate::model::{
    build_model, encode, encode_backward, read_checkpoint, volume_grid, write_checkpoint, ArchitectureConfig,
    CheckpointMeta, ModelParams, ParamSet, Partition, StoredTensor,
};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::rng::{rng_from_seed, split, Rng};
use crate::tensor::{Grid, Scalar, Tensor};
use crate::volio::{extract_patch, Volume3D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CenterMode {
    /// Subtract each vector's own mean.
    #[default]
    Paper,
    /// Subtract a running mean of teacher logits.
    Ema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SslLossKind {
    #[default]
    Ce,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub momentum: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps in the current stage.
    pub max_steps: Option<u64>,
    pub center_mode: CenterMode,
    pub center_momentum: f64,
    pub loss: SslLossKind,
    /// Random crop size; whole volumes when absent.
    pub patch: Option<[usize; 3]>,
    pub adam: AdamConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            momentum: 0.996,
            teacher_temp: 0.05,
            student_temp: 1.0,
            out_dim: 256,
            hidden_dim: 512,
            lr: 1e-5,
            epochs: 1000,
            batch_size: 4,
            max_steps: None,
            center_mode: CenterMode::Paper,
            center_momentum: 0.9,
            loss: SslLossKind::Ce,
            patch: None,
            adam: AdamConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ssl: {m}")));
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]");
        }
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0) {
            return bad("temperatures must be > 0");
        }
        if self.out_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            return bad("out_dim, hidden_dim and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return bad("center_momentum must lie in [0, 1]");
        }
        self.adam.validate()
    }
}

/// Projection MLP: `in → hidden → hidden → K` with GELU between layers.
pub fn build_projector(input: usize, hidden: usize, out: usize, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, (a, b)) in [(input, hidden), (hidden, hidden), (hidden, out)].into_iter().enumerate() {
        p.insert(format!("proj.{i}.w"), Partition::Projector, Tensor::from_vec(&[b, a], he_uniform(a * b, a, rng)));
        p.insert(format!("proj.{i}.b"), Partition::Projector, Tensor::zeros(&[b]));
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslState {
    pub cfg: SslConfig,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub proj_s: ParamSet,
    pub proj_t: ParamSet,
    pub center: Vec<f32>,
    pub step: u64,
    pub adam: Adam,
}

impl SslState {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn new(arch: &ArchitectureConfig, cfg: &SslConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let student = build_model(arch, rng)?;
        let proj_s = build_projector(arch.bottleneck_channels(), cfg.hidden_dim, cfg.out_dim, rng);
        Ok(SslState {
            cfg: cfg.clone(),
            teacher: student.clone(),
            proj_t: proj_s.clone(),
            student,
            proj_s,
            center: vec![0.0; cfg.out_dim],
            step: 0,
            adam: Adam::new(cfg.adam),
        })
    }
}

/// θt ← m·θt + (1−m)·θs over the encoder-side tensors of `teacher`.
pub fn momentum_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student parameter layouts differ".into()));
    }
    let mt = T::lit(m);
    let ms = T::lit(1.0 - m);
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        if !(t.tag.is_encoder() || t.tag == Partition::Projector) {
            continue;
        }
        for (a, &b) in t.tensor.data.iter_mut().zip(&s.tensor.data) {
            *a = if m == 1.0 {
                *a
            } else if m == 0.0 {
                b
            } else {
                mt * *a + ms * b
            };
        }
    }
    Ok(())
}

pub struct ProjectCache<T> {
    n: usize,
    v: Vec<T>,
    a1: Vec<T>,
    h1: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
}

/// Global average pooling per channel.
pub fn global_average_pool<T: Scalar>(h: &Grid<T>) -> Vec<T> {
    let n = T::lit(h.voxels() as f64);
    (0..h.channels).map(|c| h.channel(c).iter().copied().sum::<T>() / n).collect()
}

/// z = MLP(GAP(h)).
pub fn project<T: Scalar>(h: &Grid<T>, proj: &ParamSet<T>) -> (Vec<T>, ProjectCache<T>) {
    let v = global_average_pool(h);
    let a1 = linear(&v, 1, proj.w("proj.0.w"), proj.w("proj.0.b"));
    let h1: Vec<T> = a1.iter().map(|&x| gelu(x)).collect();
    let a2 = linear(&h1, 1, proj.w("proj.1.w"), proj.w("proj.1.b"));
    let h2: Vec<T> = a2.iter().map(|&x| gelu(x)).collect();
    let z = linear(&h2, 1, proj.w("proj.2.w"), proj.w("proj.2.b"));
    (z, ProjectCache { n: h.voxels(), v, a1, h1, a2, h2 })
}

/// Backward of [`project`]: accumulates projector gradients, returns ∂L/∂h.
pub fn project_backward<T: Scalar>(
    proj: &ParamSet<T>,
    cache: &ProjectCache<T>,
    dims: [usize; 3],
    gz: &[T],
    grads: &mut ParamSet<T>,
) -> Grid<T> {
    let mut gh2 = vec![T::zero(); cache.h2.len()];
    let (gw, gb) = linear_backward(&cache.h2, 1, proj.w("proj.2.w"), gz, Some(&mut gh2));
    grads.accumulate("proj.2.w", &gw);
    grads.accumulate("proj.2.b", &gb);
    let ga2: Vec<T> = gh2.iter().zip(&cache.a2).map(|(g, &a)| *g * gelu_grad(a)).collect();
    let mut gh1 = vec![T::zero(); cache.h1.len()];
    let (gw, gb) = linear_backward(&cache.h1, 1, proj.w("proj.1.w"), &ga2, Some(&mut gh1));
    grads.accumulate("proj.1.w", &gw);
    grads.accumulate("proj.1.b", &gb);
    let ga1: Vec<T> = gh1.iter().zip(&cache.a1).map(|(g, &a)| *g * gelu_grad(a)).collect();
    let mut gv = vec![T::zero(); cache.v.len()];
    let (gw, gb) = linear_backward(&cache.v, 1, proj.w("proj.0.w"), &ga1, Some(&mut gv));
    grads.accumulate("proj.0.w", &gw);
    grads.accumulate("proj.0.b", &gb);
    let inv = T::one() / T::lit(cache.n as f64);
    let mut g = Grid::zeros(gv.len(), dims);
    for (c, &gc) in gv.iter().enumerate() {
        g.channel_mut(c).iter_mut().for_each(|x| *x = gc * inv);
    }
    g
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&x| (x - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
    z.iter().map(|&x| x - lse).collect()
}

/// Centered logits: per-vector mean in paper mode, `z − c` in EMA mode.
pub fn center_logits(z: &[f64], center: &[f64], mode: CenterMode) -> Vec<f64> {
    match mode {
        CenterMode::Paper => {
            let m = z.iter().sum::<f64>() / z.len() as f64;
            z.iter().map(|x| x - m).collect()
        }
        CenterMode::Ema => z.iter().zip(center).map(|(a, b)| a - b).collect(),
    }
}

/// q′ = softmax(Center(z′)/τ).
pub fn teacher_targets(z: &[f64], center: &[f64], mode: CenterMode, tau: f64) -> Vec<f64> {
    let c: Vec<f64> = center_logits(z, center, mode).into_iter().map(|x| x / tau).collect();
    softmax(&c)
}

pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn check_distribution(q: &[f64]) -> Result<()> {
    let s: f64 = q.iter().sum();
    if q.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("teacher target is not a distribution (sum {s})")));
    }
    Ok(())
}

/// −Σ q′ log softmax(z/τs).
pub fn cross_entropy(z: &[f64], q: &[f64], tau_s: f64) -> Result<f64> {
    check_distribution(q)?;
    if z.len() != q.len() {
        return Err(Error::Shape(format!("logits {} vs target {}", z.len(), q.len())));
    }
    let zs: Vec<f64> = z.iter().map(|x| x / tau_s).collect();
    Ok(-log_softmax(&zs).iter().zip(q).map(|(l, p)| l * p).sum::<f64>())
}

/// ½(CE(z₁, q′₂) + CE(z₂, q′₁)).
pub fn ssl_loss(z1: &[f64], z2: &[f64], q1: &[f64], q2: &[f64], tau_s: f64) -> Result<f64> {
    Ok(0.5 * (cross_entropy(z1, q2, tau_s)? + cross_entropy(z2, q1, tau_s)?))
}

/// Loss of one student view against one teacher target, and ∂/∂z.
/// `target` is q′ for cross-entropy and the teacher logits Center(z′)/τ for MSE.
fn view_loss<T: Scalar>(kind: SslLossKind, z: &[T], target: &[T], tau_s: T) -> (T, Vec<T>) {
    let zs: Vec<T> = z.iter().map(|&x| x / tau_s).collect();
    match kind {
        SslLossKind::Ce => {
            let ls = log_softmax(&zs);
            let loss = -ls.iter().zip(target).map(|(&l, &p)| l * p).sum::<T>();
            let qsum: T = target.iter().copied().sum();
            let g = ls.iter().zip(target).map(|(&l, &p)| (l.exp() * qsum - p) / tau_s).collect();
            (loss, g)
        }
        SslLossKind::Mse => {
            let k = T::lit(z.len() as f64);
            let loss = zs.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / k;
            let two = T::lit(2.0);
            let g = zs.iter().zip(target).map(|(&a, &b)| two * (a - b) / (k * tau_s)).collect();
            (loss, g)
        }
    }
}

/// Teacher-side signal for one view.
fn teacher_signal(kind: SslLossKind, z: &[f64], center: &[f64], mode: CenterMode, tau: f64) -> Vec<f64> {
    match kind {
        SslLossKind::Ce => teacher_targets(z, center, mode, tau),
        SslLossKind::Mse => center_logits(z, center, mode).into_iter().map(|x| x / tau).collect(),
    }
}

pub struct StudentGrads<T> {
    pub loss: T,
    pub encoder: ParamSet<T>,
    pub projector: ParamSet<T>,
    pub z: [Vec<T>; 2],
}

/// Student loss for one sample given fixed teacher signals, with gradients
/// for the student encoder and projector.
pub fn student_loss_and_grads<T: Scalar>(
    student: &ModelParams<T>,
    proj: &ParamSet<T>,
    views: [&Grid<T>; 2],
    targets: [&[T]; 2],
    kind: SslLossKind,
    tau_s: f64,
) -> Result<StudentGrads<T>> {
    let half = T::lit(0.5);
    let tau_s = T::lit(tau_s);
    let mut enc_grads = student.params.zeros_like();
    let mut proj_grads = proj.zeros_like();
    let mut loss = T::zero();
    let mut zs: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    for (i, view) in views.iter().enumerate() {
        let (pyr, cache) = encode(student, view)?;
        let bott = pyr.bottleneck();
        let (z, pc) = project(bott, proj);
        // view i is matched with the other view's teacher signal
        let (l, mut gz) = view_loss(kind, &z, targets[1 - i], tau_s);
        loss += half * l;
        gz.iter_mut().for_each(|g| *g *= half);
        let gh = project_backward(proj, &pc, bott.dims, &gz, &mut proj_grads);
        enc_grads.add_assign(&encode_backward(student, &cache, &gh));
        zs[i] = z;
    }
    Ok(StudentGrads { loss, encoder: enc_grads, projector: proj_grads, z: zs })
}

/// Teacher logits for one view (no gradient).
pub fn teacher_logits(teacher: &ModelParams, proj: &ParamSet, view: &Grid<f32>) -> Result<Vec<f64>> {
    let (pyr, _) = encode(teacher, view)?;
    let (z, _) = project(pyr.bottleneck(), proj);
    Ok(z.iter().map(|&x| x as f64).collect())
}

fn random_crop(v: &Volume3D, patch: Option<[usize; 3]>, rng: &mut Rng) -> Result<Volume3D> {
    use rand::Rng as _;
    match patch {
        None => Ok(v.clone()),
        Some(size) => {
            if (0..3).any(|a| size[a] > v.dims[a]) {
                return Err(Error::Shape(format!("patch {size:?} larger than volume {:?}", v.dims)));
            }
            let origin = [0, 1, 2].map(|a| rng.gen_range(0..=v.dims[a] - size[a]));
            extract_patch(v, origin, size)
        }
    }
}

struct SampleOut {
    loss: f64,
    enc: ParamSet<f32>,
    proj: ParamSet<f32>,
    teacher_z: [Vec<f64>; 2],
}

/// One optimization step. On a non-finite loss or gradient the state is
/// left untouched and a `Numerics` error is returned.
pub fn ssl_step(state: &mut SslState, batch: &[Volume3D], policy: &AugPolicy, step_seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty SSL batch".into()));
    }
    policy.validate()?;
    let cfg = &state.cfg;
    let center: Vec<f64> = state.center.iter().map(|&c| c as f64).collect();
    let outs: Vec<SampleOut> = batch
        .par_iter()
        .enumerate()
        .map(|(i, vol)| -> Result<SampleOut> {
            let mut rng = rng_from_seed(split(split(step_seed, i), policy.rng_seed));
            let vol = random_crop(vol, cfg.patch, &mut rng)?;
            let (a, b) = make_views(&vol, policy, &mut rng)?;
            let views = [volume_grid(&a), volume_grid(&b)];
            let tz = [
                teacher_logits(&state.teacher, &state.proj_t, &views[0])?,
                teacher_logits(&state.teacher, &state.proj_t, &views[1])?,
            ];
            let sig: Vec<Vec<f32>> = tz
                .iter()
                .map(|z| {
                    teacher_signal(cfg.loss, z, &center, cfg.center_mode, cfg.teacher_temp)
                        .into_iter()
                        .map(|x| x as f32)
                        .collect()
                })
                .collect();
            let g = student_loss_and_grads(
                &state.student,
                &state.proj_s,
                [&views[0], &views[1]],
                [&sig[0], &sig[1]],
                cfg.loss,
                cfg.student_temp,
            )?;
            Ok(SampleOut { loss: g.loss as f64, enc: g.encoder, proj: g.projector, teacher_z: tz })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = outs.len() as f32;
    let loss = outs.iter().map(|o| o.loss).sum::<f64>() / outs.len() as f64;
    let mut enc = outs[0].enc.clone();
    let mut proj = outs[0].proj.clone();
    for o in &outs[1..] {
        enc.add_assign(&o.enc);
        proj.add_assign(&o.proj);
    }
    enc.scale(1.0 / n);
    proj.scale(1.0 / n);
    if !loss.is_finite() || !enc.all_finite() || !proj.all_finite() {
        return Err(Error::Numerics(format!("non-finite SSL loss/gradient at step {}", state.step)));
    }

    let lr = cfg.lr;
    state.adam.tick();
    for (name, p) in state.student.params.iter_mut() {
        if p.tag.is_encoder() {
            state.adam.update(&format!("student/{name}"), lr, &mut p.tensor.data, enc.w(name));
        }
    }
    for (name, p) in state.proj_s.iter_mut() {
        state.adam.update(&format!("proj/{name}"), lr, &mut p.tensor.data, proj.w(name));
    }
    momentum_update(&mut state.teacher.params, &state.student.params, cfg.momentum)?;
    momentum_update(&mut state.proj_t, &state.proj_s, cfg.momentum)?;
    if cfg.center_mode == CenterMode::Ema {
        let k = state.center.len();
        let mut mean = vec![0.0f64; k];
        let views = (2 * outs.len()) as f64;
        for o in &outs {
            for z in &o.teacher_z {
                mean.iter_mut().zip(z).for_each(|(m, v)| *m += v / views);
            }
        }
        let cm = cfg.center_momentum;
        for (c, m) in state.center.iter_mut().zip(mean) {
            *c = (cm * *c as f64 + (1.0 - cm) * m) as f32;
        }
    }
    state.step += 1;
    Ok(loss)
}

/// Where an interrupted stage resumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StageProgress {
    pub stage: String,
    pub epoch: usize,
    pub batch: usize,
    pub stage_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct SslExtra {
    ssl: SslConfig,
    progress: StageProgress,
    adam_t: u64,
}

pub const SSL_KIND: &str = "ssl";

pub fn save_ssl_checkpoint(path: &Path, state: &SslState, progress: &StageProgress) -> Result<()> {
    let mut t = BTreeMap::new();
    stash(&mut t, "student/", &state.student.params);
    stash(&mut t, "teacher/", &state.teacher.params);
    stash(&mut t, "proj_s/", &state.proj_s);
    stash(&mut t, "proj_t/", &state.proj_t);
    t.insert("center".into(), StoredTensor::F32(Tensor::from_vec(&[state.center.len()], state.center.clone())));
    for (k, mo) in &state.adam.moments {
        t.insert(format!("adam.m/{k}"), StoredTensor::F32(Tensor::from_vec(&[mo.m.len()], mo.m.clone())));
        t.insert(format!("adam.v/{k}"), StoredTensor::F32(Tensor::from_vec(&[mo.v.len()], mo.v.clone())));
    }
    let mut meta = CheckpointMeta::new(SSL_KIND, &state.student.cfg);
    meta.step = state.step;
    meta.epoch = progress.epoch as u64;
    meta.extra = serde_json::to_value(SslExtra { ssl: state.cfg.clone(), progress: progress.clone(), adam_t: state.adam.t })?;
    write_checkpoint(path, &meta, &t)
}

pub fn load_ssl_checkpoint(path: &Path) -> Result<(SslState, StageProgress)> {
    let (meta, t) = read_checkpoint(path)?;
    if meta.kind != SSL_KIND {
        return Err(Error::Format(format!("{}: expected an SSL checkpoint, found {:?}", path.display(), meta.kind)));
    }
    let extra: SslExtra =
        serde_json::from_value(meta.extra.clone()).map_err(|e| Error::Format(format!("SSL checkpoint metadata: {e}")))?;
    let student = ModelParams { cfg: meta.arch.clone(), params: unstash(&t, "student/")? };
    let teacher = ModelParams { cfg: meta.arch.clone(), params: unstash(&t, "teacher/")? };
    student.validate()?;
    teacher.validate()?;
    let center = t
        .get("center")
        .ok_or_else(|| Error::Format("SSL checkpoint lacks center".into()))?
        .clone()
        .into_f32()?
        .data;
    let mut adam = Adam::new(extra.ssl.adam);
    adam.t = extra.adam_t;
    for (k, v) in t.range("adam.m/".to_string()..) {
        let Some(key) = k.strip_prefix("adam.m/") else { break };
        let m = v.clone().into_f32()?.data;
        let vv = t
            .get(&format!("adam.v/{key}"))
            .ok_or_else(|| Error::Format(format!("missing second moment for {key}")))?
            .clone()
            .into_f32()?
            .data;
        adam.moments.insert(key.to_string(), Moments { m, v: vv });
    }
    let state = SslState {
        cfg: extra.ssl,
        student,
        teacher,
        proj_s: unstash(&t, "proj_s/")?,
        proj_t: unstash(&t, "proj_t/")?,
        center,
        step: meta.step,
        adam,
    };
    Ok((state, extra.progress))
}

/// Inputs of one SSL stage.
#[derive(Clone, Debug)]
pub struct SslRun<'a> {
    /// Stage label; also salts the stage seed ("ssl", "ressl").
    pub stage: &'a str,
    pub arch: &'a ArchitectureConfig,
    pub cfg: &'a SslConfig,
    pub policy: &'a AugPolicy,
    pub seed: u64,
    pub out_dir: &'a Path,
    /// Prior checkpoint. Same stage label: continue where it stopped;
    /// different label: keep weights, optimizer, center and step counter
    /// but start the new stage from its first epoch.
    pub resume: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub losses: Vec<f64>,
    pub final_step: u64,
}

pub const SSL_LOSS_HEADER: &str = "step,loss,lr,m,tau";

fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}

pub fn run_ssl(run: &SslRun<'_>, manifest: &Manifest) -> Result<SslOutcome> {
    if manifest.is_empty() {
        return Err(Error::Data("SSL manifest is empty".into()));
    }
    run.cfg.validate()?;
    run.arch.validate()?;
    let volumes = manifest.load_all_images()?;
    let stage_seed = split(run.seed, run.stage);
    let (mut state, mut progress) = match run.resume {
        Some(path) => {
            let (mut st, prog) = load_ssl_checkpoint(path)?;
            if st.student.cfg != *run.arch {
                return Err(Error::Config("resume checkpoint architecture differs from config".into()));
            }
            if st.cfg.out_dim != run.cfg.out_dim || st.cfg.hidden_dim != run.cfg.hidden_dim {
                return Err(Error::Config("resume checkpoint projector shape differs from config".into()));
            }
            st.cfg = run.cfg.clone();
            st.adam.cfg = run.cfg.adam;
            let prog = if prog.stage == run.stage {
                prog
            } else {
                StageProgress { stage: run.stage.to_string(), ..Default::default() }
            };
            (st, prog)
        }
        None => {
            let mut rng = rng_from_seed(split(stage_seed, "init"));
            (SslState::new(run.arch, run.cfg, &mut rng)?, StageProgress { stage: run.stage.to_string(), ..Default::default() })
        }
    };

    fs::create_dir_all(run.out_dir).map_err(|e| Error::io(run.out_dir, e))?;
    let log_path = run.out_dir.join(format!("{}_loss.csv", run.stage));
    let fresh = progress.stage_steps == 0 || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "{SSL_LOSS_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let last = run.out_dir.join(format!("{}_last.hsck", run.stage));
    let step_root = split(stage_seed, "step");
    let bs = run.cfg.batch_size;
    let n_batches = volumes.len().div_ceil(bs);
    let mut losses = Vec::new();
    let done = |p: &StageProgress| run.cfg.max_steps.is_some_and(|m| p.stage_steps >= m);
    'outer: while progress.epoch < run.cfg.epochs {
        let order = epoch_order(volumes.len(), split(stage_seed, progress.epoch));
        while progress.batch < n_batches {
            if done(&progress) {
                break 'outer;
            }
            let idx = &order[progress.batch * bs..((progress.batch + 1) * bs).min(order.len())];
            let batch: Vec<Volume3D> = idx.iter().map(|&i| volumes[i].clone()).collect();
            let step_seed = split(step_root, state.step);
            let loss = ssl_step(&mut state, &batch, run.policy, step_seed)?;
            writeln!(log, "{},{},{},{},{}", state.step, loss, run.cfg.lr, run.cfg.momentum, run.cfg.teacher_temp)
                .map_err(|e| Error::io(&log_path, e))?;
            losses.push(loss);
            progress.batch += 1;
            progress.stage_steps += 1;
        }
        progress.batch = 0;
        progress.epoch += 1;
        save_ssl_checkpoint(&run.out_dir.join(format!("{}_epoch{:04}.hsck", run.stage, progress.epoch)), &state, &progress)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_ssl_checkpoint(&last, &state, &progress)?;
    Ok(SslOutcome { checkpoint: last, loss_log: log_path, losses, final_step: state.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, DatasetOptions, ModalityMix, PhantomSpec};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn tiny_cfg() -> SslConfig {
        SslConfig { out_dim: 4, hidden_dim: 16, lr: 1e-3, batch_size: 2, epochs: 1, ..Default::default() }
    }

    fn scalar_set(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("enc.0.x", Partition::Encoder, Tensor::from_vec(&[1], vec![v]));
        p
    }

    #[test]
    fn momentum_fixed_points_and_example() {
        let s = scalar_set(0.0);
        let mut t = scalar_set(1.0);
        momentum_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.w("enc.0.x"), &[1.0]);
        momentum_update(&mut t, &s, 0.99).unwrap();
        assert!((t.w("enc.0.x")[0] - 0.99).abs() < 1e-7);
        momentum_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.w("enc.0.x"), &[0.0]);
    }

    #[test]
    fn momentum_rejects_layout_mismatch() {
        let mut t = scalar_set(1.0);
        let mut s = ParamSet::new();
        s.insert("enc.0.x", Partition::Encoder, Tensor::from_vec(&[2], vec![0.0, 0.0]));
        assert!(matches!(momentum_update(&mut t, &s, 0.5), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn momentum_stays_between(t0 in -5.0f32..5.0, s0 in -5.0f32..5.0, m in 0.0f64..=1.0) {
            let mut t = scalar_set(t0);
            momentum_update(&mut t, &scalar_set(s0), m).unwrap();
            let v = t.w("enc.0.x")[0];
            prop_assert!(v >= t0.min(s0) && v <= t0.max(s0));
        }

        #[test]
        fn loss_exceeds_target_entropy(z in prop::collection::vec(-4.0f64..4.0, 5), y in prop::collection::vec(-4.0f64..4.0, 5), tau in 0.05f64..2.0) {
            let q = teacher_targets(&y, &[0.0; 5], CenterMode::Paper, tau);
            let kl = cross_entropy(&z, &q, 1.0).unwrap() - entropy(&q);
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn targets_are_positive_distributions(y in prop::collection::vec(-3.0f64..3.0, 6), tau in 0.05f64..3.0) {
            let q = teacher_targets(&y, &[0.0; 6], CenterMode::Paper, tau);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(q.iter().all(|&p| p > 0.0));
            let am = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(am(&q), am(&y));
            let raw = softmax(&y.iter().map(|x| x / tau).collect::<Vec<_>>());
            for (a, b) in q.iter().zip(&raw) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gap_examples() {
        let g = Grid::from_vec(1, [2, 2, 2], (1..=8).map(|x| x as f64).collect());
        assert_eq!(global_average_pool(&g), vec![4.5]);
        let c = Grid::from_vec(2, [2, 1, 1], vec![3.0, 3.0, -1.0, -1.0]);
        assert_eq!(global_average_pool(&c), vec![3.0, -1.0]);
    }

    #[test]
    fn zero_projector_weights_output_bias() {
        let mut p = build_projector(3, 5, 4, &mut rng_from_seed(0));
        for (k, t) in p.iter_mut() {
            let fill = if k == "proj.2.b" { 0.25 } else { 0.0 };
            t.tensor.data.iter_mut().for_each(|v| *v = fill);
        }
        let g = Grid::from_vec(3, [1, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(project(&g, &p).0, vec![0.25; 4]);
    }

    #[test]
    fn target_examples() {
        let q = teacher_targets(&[2.0, 2.0, 2.0], &[0.0; 3], CenterMode::Paper, 0.3);
        assert!(q.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        let q = teacher_targets(&[0.0, 3f64.ln()], &[0.0; 2], CenterMode::Paper, 1.0);
        assert!((q[0] - 0.25).abs() < 1e-12 && (q[1] - 0.75).abs() < 1e-12);
        let q = teacher_targets(&[0.0, 1.0], &[0.0; 2], CenterMode::Paper, 0.01);
        assert!(q[1] > 1.0 - 1e-12);
    }

    #[test]
    fn ema_center_shifts_the_target() {
        let z = [1.0, 0.0];
        let a = teacher_targets(&z, &[0.0, 0.0], CenterMode::Ema, 1.0);
        let b = teacher_targets(&z, &[1.0, 0.0], CenterMode::Ema, 1.0);
        assert!((b[0] - 0.5).abs() < 1e-12);
        assert!(a[0] > 0.7);
    }

    #[test]
    fn loss_examples() {
        assert!((cross_entropy(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let z1 = [0.3, -1.0, 2.0];
        let z2 = [1.0, 0.5, -0.5];
        let q1 = softmax(&z2);
        let q2 = softmax(&z1);
        let l = ssl_loss(&z1, &z2, &q1, &q2, 1.0).unwrap();
        assert!((l - 0.5 * (entropy(&q2) + entropy(&q1))).abs() < 1e-12);
        let qa = [0.2, 0.3, 0.5];
        let qb = [0.6, 0.1, 0.3];
        let l1 = ssl_loss(&z1, &z2, &qa, &qb, 1.0).unwrap();
        let l2 = ssl_loss(&z2, &z1, &qb, &qa, 1.0).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn non_distribution_target_is_contract_error() {
        let e = cross_entropy(&[0.0, 0.0], &[0.7, 0.7], 1.0).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
        assert!(matches!(cross_entropy(&[0.0, 0.0], &[1.5, -0.5], 1.0), Err(Error::Contract(_))));
    }

    fn volumes(n: usize, seed: u64) -> Vec<Volume3D> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let data = (0..512).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                Volume3D::new(data, [8; 3], [2.0; 3], Default::default(), format!("v{i}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn matched_views_give_entropy_at_step_zero() {
        let cfg = SslConfig { teacher_temp: 1.0, momentum: 1.0, ..tiny_cfg() };
        let mut st = SslState::new(&ArchitectureConfig::default(), &cfg, &mut rng_from_seed(1)).unwrap();
        let vols = volumes(1, 2);
        let g = volume_grid(&vols[0]);
        let zs = teacher_logits(&st.student, &st.proj_s, &g).unwrap();
        let zt = teacher_logits(&st.teacher, &st.proj_t, &g).unwrap();
        assert_eq!(zs, zt);
        let q = teacher_targets(&zt, &[0.0; 4], CenterMode::Paper, 1.0);
        let teacher_before = st.teacher.clone();
        let l = ssl_step(&mut st, &vols, &AugPolicy::identity(), 7).unwrap();
        assert!((l - entropy(&q)).abs() < 1e-5, "{l} vs {}", entropy(&q));
        // stop-gradient: with m = 1 the teacher never moves
        assert_eq!(st.teacher, teacher_before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let mut st = SslState::new(&ArchitectureConfig::default(), &cfg, &mut rng_from_seed(3)).unwrap();
            let v = volumes(2, 4);
            (0..3).map(|s| ssl_step(&mut st, &v, &AugPolicy::ssl_default(), s).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_input_preserves_state() {
        let mut st = SslState::new(&ArchitectureConfig::default(), &tiny_cfg(), &mut rng_from_seed(3)).unwrap();
        let mut v = volumes(1, 5);
        v[0].voxels[10] = f32::NAN;
        let before = st.clone();
        assert!(matches!(ssl_step(&mut st, &v, &AugPolicy::identity(), 0), Err(Error::Numerics(_))));
        assert_eq!(st, before);
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        let arch = ArchitectureConfig::default();
        let mut rng = rng_from_seed(21);
        let student: ModelParams<f64> = build_model(&arch, &mut rng).unwrap().cast();
        let proj: ParamSet<f64> = build_projector(64, 16, 4, &mut rng).cast();
        let v = volumes(2, 22);
        let g1 = volume_grid(&v[0]).cast::<f64>();
        let g2 = volume_grid(&v[1]).cast::<f64>();
        let q1 = [0.1, 0.2, 0.3, 0.4];
        let q2 = [0.7, 0.1, 0.1, 0.1];
        let eval = |s: &ModelParams<f64>, p: &ParamSet<f64>| {
            student_loss_and_grads(s, p, [&g1, &g2], [&q1, &q2], SslLossKind::Ce, 1.0).unwrap()
        };
        let base = eval(&student, &proj);
        let eps = 1e-5;
        let mut checked = 0;
        for name in student.params.names().filter(|n| n.starts_with("enc") || n.starts_with("bot")).cloned().collect::<Vec<_>>() {
            let idx = rng.gen_range(0..student.w(&name).len());
            let mut a = student.clone();
            a.params.w_mut(&name)[idx] += eps;
            let mut b = student.clone();
            b.params.w_mut(&name)[idx] -= eps;
            let fd = (eval(&a, &proj).loss - eval(&b, &proj).loss) / (2.0 * eps);
            let an = base.encoder.w(&name)[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-9, "{name}[{idx}] fd {fd} an {an}");
            checked += 1;
        }
        for name in proj.names().cloned().collect::<Vec<_>>() {
            let idx = rng.gen_range(0..proj.w(&name).len());
            let mut a = proj.clone();
            a.w_mut(&name)[idx] += eps;
            let mut b = proj.clone();
            b.w_mut(&name)[idx] -= eps;
            let fd = (eval(&student, &a).loss - eval(&student, &b).loss) / (2.0 * eps);
            let an = base.projector.w(&name)[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-9, "{name}[{idx}] fd {fd} an {an}");
            checked += 1;
        }
        assert!(checked >= 20);
    }

    fn phantom_manifest(dir: &Path, n: usize, mix: ModalityMix, split: &str) -> Manifest {
        let spec = PhantomSpec { dims: [16; 3], spacing: [4.0; 3], ..Default::default() };
        let opts = DatasetOptions { split: split.into(), modality: mix, with_masks: false };
        generate_dataset(n, &spec, &opts, dir).unwrap()
    }

    fn run_cfg<'a>(
        arch: &'a ArchitectureConfig,
        cfg: &'a SslConfig,
        policy: &'a AugPolicy,
        out: &'a Path,
        stage: &'a str,
        resume: Option<&'a Path>,
    ) -> SslRun<'a> {
        SslRun { stage, arch, cfg, policy, seed: 99, out_dir: out, resume }
    }

    #[test]
    fn one_epoch_logs_expected_steps_and_ressl_continues() {
        let dir = tempfile::tempdir().unwrap();
        let man = phantom_manifest(&dir.path().join("data"), 4, ModalityMix::Template, "unlabeled");
        let arch = ArchitectureConfig::default();
        let cfg = tiny_cfg();
        let policy = AugPolicy::ssl_default();
        let out = dir.path().join("ssl");
        let r = run_ssl(&run_cfg(&arch, &cfg, &policy, &out, "ssl", None), &man).unwrap();
        assert_eq!(r.losses.len(), 2);
        let log = fs::read_to_string(&r.loss_log).unwrap();
        assert_eq!(log.lines().next(), Some(SSL_LOSS_HEADER));
        assert_eq!(log.lines().count(), 3);
        assert!(out.join("ssl_epoch0001.hsck").exists());

        let mixed = phantom_manifest(&dir.path().join("mixed"), 4, ModalityMix::Alternate, "pool");
        let out2 = dir.path().join("ressl");
        let r2 = run_ssl(&run_cfg(&arch, &cfg, &policy, &out2, "ressl", Some(&r.checkpoint)), &mixed).unwrap();
        assert_eq!(r2.final_step, 4);
        assert!(r2.losses.iter().all(|l| l.is_finite()));
        let first = fs::read_to_string(&r2.loss_log).unwrap();
        assert!(first.lines().nth(1).unwrap().starts_with("3,"));
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let man = phantom_manifest(&dir.path().join("data"), 4, ModalityMix::Template, "unlabeled");
        let arch = ArchitectureConfig::default();
        let policy = AugPolicy::ssl_default();
        let full_cfg = SslConfig { epochs: 2, ..tiny_cfg() };
        let a = dir.path().join("a");
        let full = run_ssl(&run_cfg(&arch, &full_cfg, &policy, &a, "ssl", None), &man).unwrap();

        let part_cfg = SslConfig { max_steps: Some(3), ..full_cfg.clone() };
        let b = dir.path().join("b");
        let part = run_ssl(&run_cfg(&arch, &part_cfg, &policy, &b, "ssl", None), &man).unwrap();
        assert_eq!(part.final_step, 3);
        let rest = run_ssl(&run_cfg(&arch, &full_cfg, &policy, &b, "ssl", Some(&part.checkpoint)), &man).unwrap();
        assert_eq!(rest.final_step, 4);
        let (sa, _) = load_ssl_checkpoint(&full.checkpoint).unwrap();
        let (sb, _) = load_ssl_checkpoint(&rest.checkpoint).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(fs::read(&full.loss_log).unwrap(), fs::read(&rest.loss_log).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SslConfig { center_mode: CenterMode::Ema, ..tiny_cfg() };
        let mut st = SslState::new(&ArchitectureConfig::default(), &cfg, &mut rng_from_seed(8)).unwrap();
        ssl_step(&mut st, &volumes(2, 9), &AugPolicy::ssl_default(), 1).unwrap();
        assert!(st.center.iter().any(|&c| c != 0.0));
        let prog = StageProgress { stage: "ssl".into(), epoch: 0, batch: 1, stage_steps: 1 };
        let p = dir.path().join("s.hsck");
        save_ssl_checkpoint(&p, &st, &prog).unwrap();
        let (back, prog2) = load_ssl_checkpoint(&p).unwrap();
        assert_eq!(back, st);
        assert_eq!(prog2, prog);
    }
}
