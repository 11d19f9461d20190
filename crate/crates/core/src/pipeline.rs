//! Run configuration and the staged driver: phantoms, SSL, reSSL, k-fold
//! fine-tuning of SSL and scratch models, prediction, evaluation, profiling
//! and plot emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::error::{Error, Result};
use crate::inference::{sliding_window_predict, InferenceConfig};
use crate::manifest::Manifest;
use crate::metrics::{emit_plots, evaluate_case, Metric, MetricsReport, PlotOptions, ProfileRecord, FOREGROUND, PROFILE_HEADER};
use crate::model::{activation_memory, build_model, count_params, estimate_flops, ArchitectureConfig, ModelParams};
use crate::phantom::{generate_dataset, DatasetOptions, ModalityMix, PhantomSpec};
use crate::rng::{rng_from_seed, split};
use crate::ssl::{run_ssl, SslConfig, SslOutcome, SslRun};
use crate::supervised::{fold_split, make_folds, read_folds, run_finetune, write_folds, EncoderInit, FinetuneConfig, FinetuneOutcome, FinetuneRun, FoldAssignment, FreezePolicy};
use crate::volio::{save_mask, SegmentationMask};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";
pub const PROFILE_FILE: &str = "profile.csv";
pub const FOLDS_FILE: &str = "folds.csv";
/// Model ids used in reports.
pub const SSL_MODEL: &str = "ssl";
pub const SCRATCH_MODEL: &str = "scratch";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    All,
    PhantomGen,
    SslPretrain,
    SslRessl,
    Finetune,
    Predict,
    Evaluate,
    Profile,
    Plots,
    Folds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub ssl_manifest: Option<PathBuf>,
    pub ressl_manifest: Option<PathBuf>,
    pub labeled_manifest: Option<PathBuf>,
    /// Input checkpoint: SSL resume point, fine-tune encoder or predict model.
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub folds: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub modality_mix: ModalityMix,
    pub n_ssl: usize,
    /// 0 skips the reSSL stage.
    pub n_ressl: usize,
    pub n_labeled: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { phantom: PhantomSpec::default(), modality_mix: ModalityMix::Template, n_ssl: 200, n_ressl: 200, n_labeled: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub arch: ArchitectureConfig,
    pub ssl_augment: AugPolicy,
    pub finetune_augment: AugPolicy,
    pub ssl: SslConfig,
    pub ressl: SslConfig,
    pub finetune: FinetuneConfig,
    pub folds: usize,
    /// Restricts fine-tuning to one fold; `None` runs all of them.
    pub fold: Option<usize>,
    /// Also train the scratch-initialized baseline under the same budget.
    pub scratch_baseline: bool,
    pub inference: InferenceConfig,
    pub plots: PlotOptions,
    pub model_id: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::All,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            arch: ArchitectureConfig::default(),
            ssl_augment: AugPolicy::ssl_default(),
            finetune_augment: AugPolicy::supervised_default(),
            ssl: SslConfig::default(),
            ressl: SslConfig::default(),
            finetune: FinetuneConfig::default(),
            folds: 5,
            fold: None,
            scratch_baseline: true,
            inference: InferenceConfig::default(),
            plots: PlotOptions::default(),
            model_id: SSL_MODEL.into(),
        }
    }
}

/// Learning rate of the laptop-scale profile.
pub const DESK_LR: f64 = 1e-3;
/// Fine-tuning learning rate of the laptop-scale profile.
pub const DESK_FINETUNE_LR: f64 = 3e-3;

impl RunConfig {
    /// Laptop-scale profile: full-scale defaults with step budgets cut to a
    /// few CPU minutes, larger learning rates, and the whole network
    /// fine-tuned (a frozen encoder does not converge in 300 steps).
    pub fn desk() -> Self {
        let d = RunConfig::default();
        RunConfig {
            ssl: SslConfig { lr: DESK_LR, max_steps: Some(500), ..d.ssl },
            ressl: SslConfig { lr: DESK_LR, max_steps: Some(100), ..d.ressl },
            finetune: FinetuneConfig { lr: DESK_FINETUNE_LR, max_steps: Some(300), freeze: FreezePolicy::None, ..d.finetune },
            out_dir: PathBuf::from("runs/desk"),
            ..d
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        RunConfig::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.phantom.validate()?;
        self.ssl_augment.validate()?;
        self.finetune_augment.validate()?;
        self.ssl.validate()?;
        self.ressl.validate()?;
        self.finetune.validate()?;
        self.inference.validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.fold.is_some_and(|f| f >= self.folds) {
            return Err(Error::Config(format!("fold {:?} outside 0..{}", self.fold, self.folds)));
        }
        if self.model_id.is_empty() || self.model_id.contains([',', '/', '\n']) {
            return Err(Error::Config(format!("bad model id {:?}", self.model_id)));
        }
        Ok(())
    }

    /// Writes the exact config next to the run outputs.
    pub fn archive(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let p = self.out_dir.join(CONFIG_FILE);
        fs::write(&p, self.to_json()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.out_dir.join(sub)
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

pub struct Datasets {
    pub ssl: Manifest,
    pub ressl: Option<Manifest>,
    pub labeled: Manifest,
}

/// Generates the unlabeled SSL pool, the reSSL pool and the labeled set.
pub fn generate_phantoms(cfg: &RunConfig) -> Result<Datasets> {
    let gen = |split_name: &str, n: usize, with_masks: bool| {
        let spec = PhantomSpec { seed: split(cfg.seed, format!("phantom/{split_name}").as_str()), ..cfg.data.phantom.clone() };
        let opts = DatasetOptions { split: split_name.into(), modality: cfg.data.modality_mix, with_masks };
        generate_dataset(n, &spec, &opts, cfg.dir("data").join(split_name))
    };
    Ok(Datasets {
        ssl: gen("ssl", cfg.data.n_ssl, false)?,
        ressl: if cfg.data.n_ressl > 0 { Some(gen("ressl", cfg.data.n_ressl, false)?) } else { None },
        labeled: gen("labeled", cfg.data.n_labeled, true)?,
    })
}

pub fn pretrain(cfg: &RunConfig, manifest: &Manifest, resume: Option<&Path>) -> Result<SslOutcome> {
    let out = cfg.dir("ssl");
    let run = SslRun { stage: "ssl", arch: &cfg.arch, cfg: &cfg.ssl, policy: &cfg.ssl_augment, seed: cfg.seed, out_dir: &out, resume };
    run_ssl(&run, manifest)
}

pub fn repretrain(cfg: &RunConfig, manifest: &Manifest, from: &Path) -> Result<SslOutcome> {
    let out = cfg.dir("ressl");
    let run = SslRun { stage: "ressl", arch: &cfg.arch, cfg: &cfg.ressl, policy: &cfg.ssl_augment, seed: cfg.seed, out_dir: &out, resume: Some(from) };
    run_ssl(&run, manifest)
}

pub fn assign_folds(cfg: &RunConfig, labeled: &Manifest) -> Result<(Vec<FoldAssignment>, PathBuf)> {
    let folds = make_folds(labeled, cfg.folds, split(cfg.seed, "folds"))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let p = cfg.dir(FOLDS_FILE);
    write_folds(&p, &folds)?;
    Ok((folds, p))
}

/// Training and held-out manifests of one fold.
pub fn fold_manifests(labeled: &Manifest, folds: &[FoldAssignment], fold: usize) -> Result<(Manifest, Manifest)> {
    let (held, train) = fold_split(folds, fold);
    if held.is_empty() {
        return Err(Error::Config(format!("fold {fold} has no cases")));
    }
    Ok((labeled.subset(&train)?, labeled.subset(&held)?))
}

/// Fine-tunes one model on one fold. SSL and scratch runs share the stage
/// label, so they see identical batches and augmentations.
pub fn finetune_fold(cfg: &RunConfig, train: &Manifest, fold: usize, model_id: &str, init: EncoderInit) -> Result<FinetuneOutcome> {
    let out = cfg.dir("finetune").join(model_id);
    let stage = format!("fold{fold}");
    let run = FinetuneRun { stage: &stage, arch: &cfg.arch, cfg: &cfg.finetune, policy: &cfg.finetune_augment, seed: cfg.seed, out_dir: &out, init };
    run_finetune(&run, train)
}

/// Sliding-window prediction of every case; masks are written to `out_dir`.
pub fn predict_manifest(m: &ModelParams, manifest: &Manifest, inf: &InferenceConfig, out_dir: &Path) -> Result<Vec<(String, SegmentationMask)>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::with_capacity(manifest.len());
    for row in &manifest.rows {
        let v = manifest.load_image(row)?;
        let (mask, _) = sliding_window_predict(m, &v, inf)?;
        save_mask(&mask, out_dir.join(format!("{}_pred.hsv", row.case_id)))?;
        out.push((row.case_id.clone(), mask));
    }
    Ok(out)
}

/// Scores predictions against the manifest's ground truth.
pub fn evaluate(manifest: &Manifest, preds: &[(String, SegmentationMask)], model_id: &str) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for (case_id, pred) in preds {
        let row = manifest.rows.iter().find(|r| &r.case_id == case_id).ok_or_else(|| Error::Data(format!("no ground truth for {case_id}")))?;
        let (_, gt) = manifest.load_labeled(row)?;
        report.extend(evaluate_case(case_id, model_id, pred, &gt)?);
    }
    Ok(report)
}

/// Compute record for the configured model. `mean_dice` is filled from
/// the report rows of `model_id` when a report is given.
pub fn profile(cfg: &RunConfig, model_id: &str, report: Option<&MetricsReport>) -> Result<ProfileRecord> {
    let dims = cfg.inference.window;
    let model = build_model(&cfg.arch, &mut rng_from_seed(0))?;
    Ok(ProfileRecord {
        model_id: model_id.to_string(),
        params: count_params(&model),
        flops: estimate_flops(&cfg.arch, dims)?,
        act_mem: activation_memory(&cfg.arch, dims)?,
        mean_dice: report.and_then(|r| r.mean(Metric::Dice, |row| row.model_id == model_id)),
    })
}

pub fn write_profile(path: &Path, records: &[ProfileRecord]) -> Result<()> {
    let mut s = format!("{PROFILE_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: f64,
    pub hd95: Option<f64>,
    pub hd95_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
    pub per_class: BTreeMap<u8, ClassScores>,
}

fn scores(report: &MetricsReport, model_id: &str, cases: Option<&[String]>) -> Option<ModelScores> {
    let keep = |r: &crate::metrics::MetricRow| r.model_id == model_id && cases.map_or(true, |c| c.contains(&r.case_id));
    let mean_dice = report.mean(Metric::Dice, keep)?;
    let per_class = FOREGROUND
        .map(|c| {
            let k = |r: &crate::metrics::MetricRow| keep(r) && r.class == c;
            let s = ClassScores { dice: report.mean(Metric::Dice, k).unwrap_or(f64::NAN), hd95: report.mean(Metric::Hd95, k), hd95_undefined: report.undefined_count(k) };
            (c, s)
        })
        .collect();
    Some(ModelScores { mean_dice, mean_hd95: report.mean(Metric::Hd95, keep), hd95_undefined: report.undefined_count(keep), per_class })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub held_out: Vec<String>,
    pub models: BTreeMap<String, ModelScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub folds: Vec<FoldSummary>,
    pub overall: BTreeMap<String, ModelScores>,
    pub ssl_mean_dice: Option<f64>,
    pub scratch_mean_dice: Option<f64>,
    pub ssl_final_step: u64,
    /// Artifact paths relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

/// All four stages in order: SSL, reSSL, fine-tune with k-fold CV, then
/// validation with reports, plots and a summary.
pub fn run_end_to_end(cfg: &RunConfig) -> Result<Summary> {
    cfg.validate()?;
    let base = cfg.out_dir.clone();
    let mut artifacts = BTreeMap::new();
    let mut note = |k: &str, p: &Path| {
        artifacts.insert(k.to_string(), relative(&base, p));
    };
    note("config", &staged("config", cfg.archive())?);

    let data = staged("phantom-gen", generate_phantoms(cfg))?;
    let ssl = staged("ssl-pretrain", pretrain(cfg, &data.ssl, None))?;
    note("ssl_checkpoint", &ssl.checkpoint);
    note("ssl_loss", &ssl.loss_log);
    let (encoder, final_step) = match &data.ressl {
        Some(pool) => {
            let r = staged("ssl-ressl", repretrain(cfg, pool, &ssl.checkpoint))?;
            note("ressl_checkpoint", &r.checkpoint);
            note("ressl_loss", &r.loss_log);
            (r.checkpoint, r.final_step)
        }
        None => (ssl.checkpoint.clone(), ssl.final_step),
    };

    let (folds, folds_path) = staged("folds", assign_folds(cfg, &data.labeled))?;
    note("folds", &folds_path);
    let fold_ids: Vec<usize> = match cfg.fold {
        Some(f) => vec![f],
        None => (0..cfg.folds).collect(),
    };
    let mut models = vec![(SSL_MODEL, EncoderInit::Checkpoint(encoder))];
    if cfg.scratch_baseline {
        models.push((SCRATCH_MODEL, EncoderInit::Scratch));
    }
    let mut report = MetricsReport::default();
    let mut fold_cases = Vec::new();
    for &fold in &fold_ids {
        let (train, held) = staged("finetune", fold_manifests(&data.labeled, &folds, fold))?;
        for (model_id, init) in &models {
            let ft = staged("finetune", finetune_fold(cfg, &train, fold, model_id, init.clone()))?;
            note(&format!("{model_id}_fold{fold}_checkpoint"), &ft.checkpoint);
            let pred_dir = cfg.dir("predictions").join(model_id).join(format!("fold{fold}"));
            let preds = staged("predict", predict_manifest(&ft.model, &held, &cfg.inference, &pred_dir))?;
            report.extend(staged("evaluate", evaluate(&held, &preds, model_id))?.rows);
        }
        fold_cases.push((fold, held.rows.iter().map(|r| r.case_id.clone()).collect::<Vec<_>>()));
    }
    let report = staged("evaluate", report.normalized())?;
    let report_path = cfg.dir(REPORT_FILE);
    staged("evaluate", report.write_csv(&report_path))?;
    note("report", &report_path);

    let records: Vec<ProfileRecord> = staged("profile", models.iter().map(|(id, _)| profile(cfg, id, Some(&report))).collect())?;
    let profile_path = cfg.dir(PROFILE_FILE);
    staged("profile", write_profile(&profile_path, &records))?;
    note("profile", &profile_path);
    let plot_dir = cfg.dir("plots");
    staged("plots", emit_plots(&report, &records, &cfg.plots, &plot_dir))?;
    note("plots", &plot_dir);

    let folds_summary = fold_cases
        .into_iter()
        .map(|(fold, held_out)| {
            let models = models.iter().filter_map(|(id, _)| scores(&report, id, Some(&held_out)).map(|s| (id.to_string(), s))).collect();
            FoldSummary { fold, held_out, models }
        })
        .collect();
    let overall: BTreeMap<String, ModelScores> = models.iter().filter_map(|(id, _)| scores(&report, id, None).map(|s| (id.to_string(), s))).collect();
    let summary_path = cfg.dir(SUMMARY_FILE);
    note("summary", &summary_path);
    let summary = Summary {
        seed: cfg.seed,
        folds: folds_summary,
        ssl_mean_dice: overall.get(SSL_MODEL).map(|s| s.mean_dice),
        scratch_mean_dice: overall.get(SCRATCH_MODEL).map(|s| s.mean_dice),
        overall,
        ssl_final_step: final_step,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    staged("summary", fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e)))?;
    Ok(summary)
}

/// Reads a folds file, or assigns folds when none is configured.
pub fn folds_for(cfg: &RunConfig, labeled: &Manifest) -> Result<Vec<FoldAssignment>> {
    match &cfg.paths.folds {
        Some(p) => read_folds(p),
        None => Ok(assign_folds(cfg, labeled)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(out: &Path) -> RunConfig {
        let d = RunConfig::desk();
        RunConfig {
            out_dir: out.to_path_buf(),
            data: DataConfig { phantom: PhantomSpec { dims: [16; 3], spacing: [4.0; 3], ..Default::default() }, n_ssl: 4, n_ressl: 2, n_labeled: 6, ..Default::default() },
            arch: ArchitectureConfig { stage_channels: vec![4, 8], vil_blocks_per_stage: vec![0, 1], vil_head_dim: 4, ..Default::default() },
            ssl: SslConfig { max_steps: Some(2), batch_size: 2, out_dim: 16, hidden_dim: 16, ..d.ssl },
            ressl: SslConfig { max_steps: Some(1), batch_size: 2, out_dim: 16, hidden_dim: 16, ..d.ressl },
            finetune: FinetuneConfig { max_steps: Some(2), ..d.finetune },
            folds: 3,
            inference: InferenceConfig { window: [16; 3], overlap: 0.0, ..Default::default() },
            plots: PlotOptions { n_boot: 20, ..Default::default() },
            ..d
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::desk();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["ssl"]["learning_rate"] = 1.0.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        let partial = RunConfig::from_json(r#"{"seed": 9, "finetune": {"lr": 0.01}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.finetune.lr, 0.01);
        assert_eq!(partial.finetune.w_ce, 1.0);
    }

    #[test]
    fn full_scale_defaults_are_kept() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.ssl.lr, 1e-5);
        assert_eq!(cfg.finetune.lr, 1e-5);
        assert_eq!(cfg.ssl.epochs, 1000);
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.finetune.freeze, FreezePolicy::Encoder);
        assert_eq!(RunConfig::desk().finetune.freeze, FreezePolicy::None);
        assert!(RunConfig::from_json(r#"{"folds": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"fold": 5}"#).is_err());
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = run_end_to_end(&tiny(a.path())).unwrap();
        let sb = run_end_to_end(&tiny(b.path())).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(fs::read(a.path().join(REPORT_FILE)).unwrap(), fs::read(b.path().join(REPORT_FILE)).unwrap());
        for f in ["ranks_dice.csv", "significance_dice.csv", "volume_scatter.csv"] {
            assert_eq!(fs::read(a.path().join("plots").join(f)).unwrap(), fs::read(b.path().join("plots").join(f)).unwrap());
        }
        let archived = RunConfig::load(a.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(archived, tiny(a.path()));
        let folds = read_folds(&a.path().join(FOLDS_FILE)).unwrap();
        for f in &sa.folds {
            let mut want: Vec<String> = folds.iter().filter(|x| x.fold == f.fold).map(|x| x.case_id.clone()).collect();
            want.sort();
            let mut got = f.held_out.clone();
            got.sort();
            assert_eq!(got, want);
            assert_eq!(f.models.len(), 2);
        }
        assert!(sa.ssl_mean_dice.is_some() && sa.scratch_mean_dice.is_some());
        assert_eq!(sa.ssl_final_step, 3);
        let report = MetricsReport::read_csv(a.path().join(REPORT_FILE)).unwrap();
        assert_eq!(report.rows.len(), 6 * 6 * 2);
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.inference.window = [15; 3];
        cfg.fold = Some(0);
        cfg.scratch_baseline = false;
        let err = run_end_to_end(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "predict"), "{err}");
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn profile_record_fields() {
        let cfg = RunConfig::desk();
        let r = profile(&cfg, "ssl", None).unwrap();
        assert_eq!(r.params, 294_123);
        assert_eq!(r.mean_dice, None);
        assert_eq!(r.csv_line(), format!("ssl,294123,{},{},", r.flops, r.act_mem));
        let report = MetricsReport { rows: vec![crate::metrics::MetricRow {
            case_id: "c".into(), model_id: "ssl".into(), class: 1, dice: 0.75, hd95: None, gt_ml: 0.0, pred_ml: 0.0,
        }] };
        assert_eq!(profile(&cfg, "ssl", Some(&report)).unwrap().mean_dice, Some(0.75));
    }
}
