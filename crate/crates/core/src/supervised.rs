//! Fine-tuning: SSL encoder weights transferred into a freshly initialized
//! segmentation network, trained with weighted cross-entropy + soft Dice.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{supervised_augment, AugPolicy};
use crate::manifest::Manifest;
use crate::model::{
    build_model, load_model, save_model, segment, segment_backward, volume_grid, ArchitectureConfig, CheckpointMeta,
    ModelParams, ParamSet, Partition,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{rng_from_seed, split, Rng};
use crate::tensor::{Grid, Scalar};
use crate::volio::{extract_mask_patch, extract_patch, SegmentationMask, Volume3D};
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FreezePolicy {
    /// Encoder and bottleneck frozen, decoder and head trained.
    #[default]
    Encoder,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub w_ce: f64,
    pub w_dice: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<u64>,
    pub freeze: FreezePolicy,
    pub patch: Option<[usize; 3]>,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-5,
            w_ce: 1.0,
            w_dice: 1.0,
            epochs: 1000,
            batch_size: 2,
            max_steps: None,
            freeze: FreezePolicy::Encoder,
            patch: None,
            adam: AdamConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("finetune: {m}")));
        if !(self.w_ce >= 0.0 && self.w_dice >= 0.0) || self.w_ce + self.w_dice == 0.0 {
            return bad("loss weights must be >= 0 and not both 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        self.adam.validate()
    }
}

fn check_pair<T: Scalar>(logits: &Grid<T>, mask: &SegmentationMask) -> Result<()> {
    if logits.dims != mask.dims {
        return Err(Error::Shape(format!("logits {:?} vs mask {:?}", logits.dims, mask.dims)));
    }
    if let Some(&l) = mask.labels.iter().find(|&&l| l as usize >= logits.channels) {
        return Err(Error::Shape(format!("label {l} but only {} logit channels", logits.channels)));
    }
    Ok(())
}

/// Per-voxel class probabilities, same layout as the logits.
pub fn softmax_channels<T: Scalar>(logits: &Grid<T>) -> Grid<T> {
    let c = logits.channels;
    let n = logits.voxels();
    let mut p = logits.clone();
    for v in 0..n {
        let mut mx = T::neg_infinity();
        for k in 0..c {
            mx = mx.max(logits.data[k * n + v]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (logits.data[k * n + v] - mx).exp();
            p.data[k * n + v] = e;
            s += e;
        }
        for k in 0..c {
            p.data[k * n + v] /= s;
        }
    }
    p
}

#[derive(Clone, Debug)]
pub struct SegLoss<T> {
    pub ce: T,
    pub dice: T,
    pub total: T,
    pub grad: Grid<T>,
}

/// Mean voxel cross-entropy, soft Dice over classes 1.., their weighted
/// sum, and ∂total/∂logits.
pub fn seg_loss_and_grad<T: Scalar>(logits: &Grid<T>, mask: &SegmentationMask, w_ce: f64, w_dice: f64) -> Result<SegLoss<T>> {
    check_pair(logits, mask)?;
    let c = logits.channels;
    let n = logits.voxels();
    let p = softmax_channels(logits);
    let nf = T::lit(n as f64);
    let mut ce = T::zero();
    for (v, &l) in mask.labels.iter().enumerate() {
        let l = l as usize;
        let mut mx = T::neg_infinity();
        for k in 0..c {
            mx = mx.max(logits.data[k * n + v]);
        }
        let lse = (0..c).map(|k| (logits.data[k * n + v] - mx).exp()).sum::<T>().ln() + mx;
        ce += lse - logits.data[l * n + v];
    }
    ce /= nf;

    // soft Dice, foreground classes only
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let fg = c.saturating_sub(1).max(1);
    let fgf = T::lit(fg as f64);
    let mut gp = Grid::zeros(c, logits.dims);
    let mut dice_sum = T::zero();
    for k in 1..c {
        let pk = p.channel(k);
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for (v, &l) in mask.labels.iter().enumerate() {
            psum += pk[v];
            if l as usize == k {
                inter += pk[v];
                gsum += T::one();
            }
        }
        let den = psum + gsum + eps;
        let num = two * inter + eps;
        dice_sum += num / den;
        let gk = gp.channel_mut(k);
        for (v, &l) in mask.labels.iter().enumerate() {
            let g = if l as usize == k { T::one() } else { T::zero() };
            // ∂(1 − mean d)/∂p
            gk[v] = -(two * g * den - num) / (den * den) / fgf;
        }
    }
    let dice = T::one() - dice_sum / fgf;
    let (wc, wd) = (T::lit(w_ce), T::lit(w_dice));

    let mut grad = Grid::zeros(c, logits.dims);
    for v in 0..n {
        let dot: T = (0..c).map(|k| p.data[k * n + v] * gp.data[k * n + v]).sum();
        let l = mask.labels[v] as usize;
        for k in 0..c {
            let pk = p.data[k * n + v];
            let dce = (pk - if k == l { T::one() } else { T::zero() }) / nf;
            let ddice = pk * (gp.data[k * n + v] - dot);
            grad.data[k * n + v] = wc * dce + wd * ddice;
        }
    }
    Ok(SegLoss { ce, dice, total: wc * ce + wd * dice, grad })
}

pub fn ce_seg_loss<T: Scalar>(logits: &Grid<T>, mask: &SegmentationMask) -> Result<T> {
    Ok(seg_loss_and_grad(logits, mask, 1.0, 0.0)?.ce)
}

pub fn dice_loss<T: Scalar>(logits: &Grid<T>, mask: &SegmentationMask) -> Result<T> {
    Ok(seg_loss_and_grad(logits, mask, 0.0, 1.0)?.dice)
}

pub fn combined_loss<T: Scalar>(logits: &Grid<T>, mask: &SegmentationMask, w_ce: f64, w_dice: f64) -> Result<T> {
    Ok(seg_loss_and_grad(logits, mask, w_ce, w_dice)?.total)
}

/// Trainable flag per parameter name.
pub fn freeze<T: Scalar>(params: &ParamSet<T>, policy: FreezePolicy) -> Result<BTreeMap<String, bool>> {
    params
        .iter()
        .map(|(k, p)| match p.tag {
            Partition::Projector => Err(Error::Config(format!("parameter {k}: projector tag in a segmentation model"))),
            tag => Ok((k.clone(), policy == FreezePolicy::None || !tag.is_encoder())),
        })
        .collect()
}

/// Copy encoder and bottleneck tensors of `src` into `dst`.
pub fn transfer_encoder(dst: &mut ModelParams, src: &ModelParams) -> Result<()> {
    if dst.cfg != src.cfg {
        return Err(Error::Config("encoder checkpoint architecture differs from config".into()));
    }
    for (k, p) in dst.params.iter_mut() {
        if p.tag.is_encoder() {
            let s = src.params.param(k).ok_or_else(|| Error::Shape(format!("checkpoint lacks {k}")))?;
            p.tensor = s.tensor.clone();
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub case_id: String,
    pub fold: usize,
}

/// Shuffle cases with `seed` and deal them round-robin into `k` folds.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<Vec<FoldAssignment>> {
    use rand::seq::SliceRandom;
    if k == 0 || manifest.len() < k {
        return Err(Error::Config(format!("{} cases cannot fill {k} folds", manifest.len())));
    }
    let mut ids: Vec<String> = manifest.rows.iter().map(|r| r.case_id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut rng_from_seed(seed));
    let mut out: Vec<FoldAssignment> =
        ids.into_iter().enumerate().map(|(i, case_id)| FoldAssignment { case_id, fold: i % k }).collect();
    out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(out)
}

pub const FOLDS_HEADER: &str = "case_id,fold";

pub fn write_folds(path: &Path, folds: &[FoldAssignment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for f in folds {
        w.serialize(f)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_folds(path: &Path) -> Result<Vec<FoldAssignment>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Case ids of fold `fold` (held out) and of the remaining folds.
pub fn fold_split(folds: &[FoldAssignment], fold: usize) -> (Vec<String>, Vec<String>) {
    let held = folds.iter().filter(|f| f.fold == fold).map(|f| f.case_id.clone()).collect();
    let train = folds.iter().filter(|f| f.fold != fold).map(|f| f.case_id.clone()).collect();
    (held, train)
}

#[derive(Clone, Debug)]
pub enum EncoderInit {
    Scratch,
    /// SSL checkpoint or any model checkpoint with the same architecture.
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug)]
pub struct FinetuneRun<'a> {
    pub stage: &'a str,
    pub arch: &'a ArchitectureConfig,
    pub cfg: &'a FinetuneConfig,
    pub policy: &'a AugPolicy,
    pub seed: u64,
    pub out_dir: &'a Path,
    pub init: EncoderInit,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub model: ModelParams,
    /// (ce, dice, total) per step.
    pub losses: Vec<[f64; 3]>,
}

pub const FINETUNE_LOSS_HEADER: &str = "epoch,step,ce,dice,total";
pub const FINETUNE_KIND: &str = "finetune";

fn crop_pair(v: &Volume3D, m: &SegmentationMask, patch: Option<[usize; 3]>, rng: &mut Rng) -> Result<(Volume3D, SegmentationMask)> {
    use rand::Rng as _;
    let Some(size) = patch else { return Ok((v.clone(), m.clone())) };
    if (0..3).any(|a| size[a] > v.dims[a]) {
        return Err(Error::Shape(format!("patch {size:?} larger than volume {:?}", v.dims)));
    }
    let origin = [0, 1, 2].map(|a| rng.gen_range(0..=v.dims[a] - size[a]));
    Ok((extract_patch(v, origin, size)?, extract_mask_patch(m, origin, size)?))
}

/// One optimizer step over a batch; returns mean (ce, dice, total).
pub fn finetune_step(
    model: &mut ModelParams,
    adam: &mut Adam,
    trainable: &BTreeMap<String, bool>,
    cfg: &FinetuneConfig,
    batch: &[(Volume3D, SegmentationMask)],
    policy: &AugPolicy,
    step_seed: u64,
) -> Result<[f64; 3]> {
    if batch.is_empty() {
        return Err(Error::Data("empty fine-tune batch".into()));
    }
    let train_encoder = cfg.freeze == FreezePolicy::None;
    let outs = batch
        .par_iter()
        .enumerate()
        .map(|(i, (v, m))| -> Result<([f64; 3], ParamSet<f32>)> {
            let mut rng = rng_from_seed(split(split(step_seed, i), policy.rng_seed));
            let (v, m) = crop_pair(v, m, cfg.patch, &mut rng)?;
            let (v, m) = supervised_augment(&v, &m, policy, &mut rng)?;
            let (logits, cache) = segment(model, &volume_grid(&v))?;
            let l = seg_loss_and_grad(&logits, &m, cfg.w_ce, cfg.w_dice)?;
            let g = segment_backward(model, &cache, &l.grad, train_encoder);
            Ok(([l.ce as f64, l.dice as f64, l.total as f64], g))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = outs.len() as f64;
    let mut mean = [0.0; 3];
    let mut grads = outs[0].1.clone();
    for (i, (l, g)) in outs.iter().enumerate() {
        for j in 0..3 {
            mean[j] += l[j] / n;
        }
        if i > 0 {
            grads.add_assign(g);
        }
    }
    grads.scale(1.0 / n as f32);
    if !mean[2].is_finite() || !grads.all_finite() {
        return Err(Error::Numerics("non-finite fine-tune loss/gradient".into()));
    }
    adam.tick();
    for (name, p) in model.params.iter_mut() {
        if trainable.get(name).copied().unwrap_or(false) {
            adam.update(name, cfg.lr, &mut p.tensor.data, grads.w(name));
        }
    }
    Ok(mean)
}

/// Initial network for fine-tuning: fresh weights, encoder optionally
/// replaced by a checkpoint's.
pub fn initial_model(arch: &ArchitectureConfig, init: &EncoderInit, seed: u64) -> Result<ModelParams> {
    let mut model = build_model(arch, &mut rng_from_seed(split(seed, "init")))?;
    if let EncoderInit::Checkpoint(path) = init {
        let (src, _) = load_model(path)?;
        transfer_encoder(&mut model, &src)?;
    }
    Ok(model)
}

pub fn run_finetune(run: &FinetuneRun<'_>, manifest: &Manifest) -> Result<FinetuneOutcome> {
    run.cfg.validate()?;
    run.arch.validate()?;
    if manifest.is_empty() {
        return Err(Error::Data("fine-tune manifest is empty".into()));
    }
    let data = manifest.load_all_labeled()?;
    let stage_seed = split(run.seed, run.stage);
    let mut model = initial_model(run.arch, &run.init, stage_seed)?;
    let trainable = freeze(&model.params, run.cfg.freeze)?;
    let mut adam = Adam::new(run.cfg.adam);

    fs::create_dir_all(run.out_dir).map_err(|e| Error::io(run.out_dir, e))?;
    let log_path = run.out_dir.join(format!("{}_loss.csv", run.stage));
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{FINETUNE_LOSS_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let step_root = split(stage_seed, "step");
    let bs = run.cfg.batch_size;
    let mut losses = Vec::new();
    let mut step = 0u64;
    'outer: for epoch in 0..run.cfg.epochs {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from_seed(split(stage_seed, epoch)));
        for chunk in order.chunks(bs) {
            if run.cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch: Vec<(Volume3D, SegmentationMask)> = chunk.iter().map(|&i| data[i].clone()).collect();
            let l = finetune_step(&mut model, &mut adam, &trainable, run.cfg, &batch, run.policy, split(step_root, step))?;
            step += 1;
            writeln!(log, "{epoch},{step},{},{},{}", l[0], l[1], l[2]).map_err(|e| Error::io(&log_path, e))?;
            losses.push(l);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = run.out_dir.join(format!("{}.hsck", run.stage));
    let mut meta = CheckpointMeta::new(FINETUNE_KIND, run.arch);
    meta.step = step;
    meta.extra = serde_json::to_value(run.cfg)?;
    save_model(&ckpt, &model, &meta)?;
    Ok(FinetuneOutcome { checkpoint: ckpt, loss_log: log_path, model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestRow;
    use crate::phantom::{generate_dataset, DatasetOptions, PhantomSpec};
    use rand::Rng as _;

    fn mask(labels: Vec<u8>, dims: [usize; 3]) -> SegmentationMask {
        SegmentationMask::new(labels, dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln7() {
        let l = Grid::<f64>::zeros(7, [2, 2, 2]);
        let m = mask(vec![0, 1, 2, 3, 4, 5, 6, 0], [2, 2, 2]);
        assert!((ce_seg_loss(&l, &m).unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_voxel_cross_entropy_by_hand() {
        // channel-major: class 0 = (1, 0), class 1 = (0, 2)
        let l = Grid::from_vec(2, [1, 1, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let m = mask(vec![0, 0], [1, 1, 2]);
        let expect = 0.5 * ((1.0 + (-1f64).exp()).ln() + (1.0 + 2f64.exp()).ln());
        assert!((ce_seg_loss(&l, &m).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ce_decreases_with_margin() {
        let m = mask(vec![1], [1, 1, 1]);
        let mut last = f64::INFINITY;
        for margin in [0.0, 1.0, 4.0, 16.0] {
            let l = Grid::from_vec(2, [1, 1, 1], vec![0.0, margin]);
            let v = ce_seg_loss(&l, &m).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn dice_half_probability_by_hand() {
        let l = Grid::<f64>::zeros(2, [1, 2, 2]);
        let m = mask(vec![1, 1, 0, 0], [1, 2, 2]);
        let d = (2.0 * 1.0 + DICE_EPS) / (2.0 + 2.0 + DICE_EPS);
        assert!((dice_loss(&l, &m).unwrap() - (1.0 - d)).abs() < 1e-6);
        let ce = ce_seg_loss(&l, &m).unwrap();
        assert!((combined_loss(&l, &m, 1.0, 1.0).unwrap() - (ce + 1.0 - d)).abs() < 1e-12);
        assert_eq!(combined_loss(&l, &m, 1.0, 0.0).unwrap(), ce);
        assert_eq!(combined_loss(&l, &m, 0.0, 1.0).unwrap(), dice_loss(&l, &m).unwrap());
    }

    #[test]
    fn dice_extremes() {
        let labels = vec![0u8, 1, 2, 3, 4, 5, 6, 1];
        let m = mask(labels.clone(), [2, 2, 2]);
        let onehot = |shift: usize| {
            let mut g = Grid::<f64>::zeros(7, [2, 2, 2]);
            for (v, &l) in labels.iter().enumerate() {
                let k = if l == 0 { 0 } else { 1 + (l as usize - 1 + shift) % 6 };
                g.data[k * 8 + v] = 60.0;
            }
            g
        };
        assert!(dice_loss(&onehot(0), &m).unwrap() < 1e-4);
        assert!((dice_loss(&onehot(1), &m).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn label_out_of_range_is_shape_error() {
        let l = Grid::<f64>::zeros(2, [1, 1, 2]);
        assert!(matches!(ce_seg_loss(&l, &mask(vec![0, 3], [1, 1, 2])), Err(Error::Shape(_))));
        assert!(matches!(dice_loss(&l, &mask(vec![0, 1, 0], [1, 1, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        let dims = [4; 3];
        let l = Grid::<f64>::from_vec(7, dims, (0..7 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let m = mask((0..64).map(|_| rng.gen_range(0..7u8)).collect(), dims);
        for (wc, wd) in [(1.0, 0.0), (0.0, 1.0), (0.7, 1.3)] {
            let g = seg_loss_and_grad(&l, &m, wc, wd).unwrap().grad;
            for _ in 0..25 {
                let i = rng.gen_range(0..l.data.len());
                let eps = 1e-6;
                let mut a = l.clone();
                a.data[i] += eps;
                let mut b = l.clone();
                b.data[i] -= eps;
                let fd: f64 = (combined_loss(&a, &m, wc, wd).unwrap() - combined_loss(&b, &m, wc, wd).unwrap()) / (2.0 * eps);
                let rel = (fd - g.data[i]).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-3 || (fd - g.data[i]).abs() < 1e-10, "{i}: {fd} vs {}", g.data[i]);
            }
        }
    }

    #[test]
    fn freeze_policies() {
        let m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(0)).unwrap();
        let f = freeze(&m.params, FreezePolicy::Encoder).unwrap();
        for (k, p) in m.params.iter() {
            assert_eq!(f[k], !p.tag.is_encoder(), "{k}");
        }
        assert!(freeze(&m.params, FreezePolicy::None).unwrap().values().all(|&t| t));
        let mut bad = m.params.clone();
        bad.insert("proj.0.w", Partition::Projector, crate::tensor::Tensor::zeros(&[1]));
        assert!(matches!(freeze(&bad, FreezePolicy::Encoder), Err(Error::Config(_))));
    }

    fn toy_pairs(n: usize) -> Vec<(Volume3D, SegmentationMask)> {
        let mut rng = rng_from_seed(4);
        (0..n)
            .map(|i| {
                let labels: Vec<u8> = (0..512).map(|_| rng.gen_range(0..7u8)).collect();
                let vox = labels.iter().map(|&l| l as f32 * 0.1).collect();
                (
                    Volume3D::new(vox, [8; 3], [1.0; 3], Default::default(), format!("c{i}")).unwrap(),
                    mask(labels, [8; 3]),
                )
            })
            .collect()
    }

    #[test]
    fn frozen_tensors_stay_bit_identical() {
        let mut m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(1)).unwrap();
        let before = m.clone();
        let cfg = FinetuneConfig { lr: 1e-3, ..Default::default() };
        let trainable = freeze(&m.params, cfg.freeze).unwrap();
        let mut adam = Adam::new(cfg.adam);
        let data = toy_pairs(2);
        for s in 0..10 {
            finetune_step(&mut m, &mut adam, &trainable, &cfg, &data, &AugPolicy::identity(), s).unwrap();
        }
        for (k, p) in m.params.iter() {
            let b = before.params.param(k).unwrap();
            if p.tag.is_encoder() {
                assert_eq!(p.tensor, b.tensor, "{k}");
            } else if k.ends_with(".w") {
                assert_ne!(p.tensor, b.tensor, "{k}");
            }
        }
    }

    fn manifest_of(n: usize) -> Manifest {
        let rows = (0..n)
            .map(|i| ManifestRow {
                case_id: format!("case{i:02}"),
                image_path: String::new(),
                mask_path: String::new(),
                modality: Default::default(),
                split: "labeled".into(),
            })
            .collect();
        Manifest::new(rows, ".")
    }

    #[test]
    fn folds_are_balanced_and_exhaustive() {
        let f = make_folds(&manifest_of(30), 5, 7).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|a| a.fold == k).count(), 6);
        }
        let f7 = make_folds(&manifest_of(7), 5, 7).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|k| f7.iter().filter(|a| a.fold == k).count()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        let ids: std::collections::BTreeSet<_> = f7.iter().map(|a| a.case_id.clone()).collect();
        assert_eq!(ids.len(), 7);
        assert_eq!(make_folds(&manifest_of(7), 5, 7).unwrap(), f7);
        assert_ne!(make_folds(&manifest_of(30), 5, 8).unwrap(), f);
        assert!(matches!(make_folds(&manifest_of(4), 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn folds_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("folds.csv");
        let f = make_folds(&manifest_of(9), 3, 1).unwrap();
        write_folds(&p, &f).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().next(), Some(FOLDS_HEADER));
        assert_eq!(read_folds(&p).unwrap(), f);
    }

    fn labeled(dir: &Path, n: usize, with_masks: bool) -> Manifest {
        let spec = PhantomSpec { dims: [16; 3], spacing: [4.0; 3], ..Default::default() };
        let opts = DatasetOptions { split: "lab".into(), with_masks, ..Default::default() };
        generate_dataset(n, &spec, &opts, dir).unwrap()
    }

    #[test]
    fn run_finetune_steps_and_init_sensitivity() {
        let dir = tempfile::tempdir().unwrap();
        let man = labeled(&dir.path().join("d"), 4, true);
        let arch = ArchitectureConfig::default();
        let cfg = FinetuneConfig { epochs: 1, batch_size: 2, lr: 1e-3, ..Default::default() };
        let policy = AugPolicy::supervised_default();
        let run = |out: &Path, init: EncoderInit| {
            run_finetune(&FinetuneRun { stage: "ft", arch: &arch, cfg: &cfg, policy: &policy, seed: 5, out_dir: out, init }, &man)
                .unwrap()
        };
        let a = run(&dir.path().join("a"), EncoderInit::Scratch);
        assert_eq!(a.losses.len(), 2);
        let log = fs::read_to_string(&a.loss_log).unwrap();
        assert_eq!(log.lines().next(), Some(FINETUNE_LOSS_HEADER));
        assert_eq!(log.lines().count(), 3);

        let other = build_model(&arch, &mut rng_from_seed(77)).unwrap();
        let ck = dir.path().join("enc.hsck");
        save_model(&ck, &other, &CheckpointMeta::new("ssl-student", &arch)).unwrap();
        let b = run(&dir.path().join("b"), EncoderInit::Checkpoint(ck));
        assert_ne!(a.losses.last(), b.losses.last());
        assert_eq!(b.model.w("enc.0.conv.w"), other.w("enc.0.conv.w"));
    }

    #[test]
    fn missing_masks_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let man = labeled(dir.path(), 2, false);
        let arch = ArchitectureConfig::default();
        let cfg = FinetuneConfig::default();
        let policy = AugPolicy::identity();
        let r = run_finetune(
            &FinetuneRun { stage: "ft", arch: &arch, cfg: &cfg, policy: &policy, seed: 0, out_dir: dir.path(), init: EncoderInit::Scratch },
            &man,
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
