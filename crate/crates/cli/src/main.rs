//! `heartseg` command-line driver. Every subcommand reads a [`RunConfig`]
//! from `--config` (desk profile when absent), applies flag overrides and
//! prints one JSON line: the result on stdout or the error on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heartseg::inference::sliding_window_predict;
use heartseg::manifest::Manifest;
use heartseg::metrics::{emit_plots, MetricsReport, ProfileRecord};
use heartseg::model::load_model;
use heartseg::phantom::{generate_dataset, DatasetOptions, PhantomSpec};
use heartseg::pipeline::{self, RunConfig, REPORT_FILE};
use heartseg::rng::split;
use heartseg::supervised::{fold_split, run_finetune, EncoderInit, FinetuneRun, FreezePolicy};
use heartseg::volio::{load_mask, save_mask, save_volume, Volume3D};
use heartseg::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "heartseg", version, about = "SSL pretraining and xLSTM-UNet heart segmentation on phantoms")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthetic phantoms.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Student-teacher pretraining.
    Ssl {
        #[command(subcommand)]
        cmd: SslCmd,
    },
    Finetune(FinetuneArgs),
    Predict(PredictArgs),
    Evaluate(EvaluateArgs),
    Profile(ProfileArgs),
    Plots(PlotsArgs),
    Folds(FoldsArgs),
    /// Every stage end to end.
    RunAll,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Ssl,
    Ressl,
    Labeled,
    All,
}

#[derive(Subcommand, Debug)]
enum PhantomCmd {
    Gen {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Overrides the configured size of the chosen split(s).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dims: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct SslArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum SslCmd {
    Pretrain(SslArgs),
    Ressl(SslArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FreezeArg {
    Encoder,
    None,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Encoder checkpoint; scratch initialization when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    folds_file: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    freeze: Option<FreezeArg>,
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, num_args = 3)]
    window: Option<Vec<usize>>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    model_id: Option<String>,
    /// Also write per-class probabilities.
    #[arg(long)]
    probs: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args, Debug)]
struct PlotsArgs {
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FoldsArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("missing {what} (flag or config paths)")))
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out_dir {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        *slot = v.clone();
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Data(format!("cannot create {}: {e}", p.display())))
}

fn phantom_gen(mut cfg: RunConfig, split_arg: SplitArg, n: Option<usize>, dims: Option<usize>) -> Result<Value> {
    if let Some(d) = dims {
        cfg.data.phantom.dims = [d; 3];
    }
    cfg.validate()?;
    cfg.archive()?;
    let splits: &[(&str, bool)] = match split_arg {
        SplitArg::Ssl => &[("ssl", false)],
        SplitArg::Ressl => &[("ressl", false)],
        SplitArg::Labeled => &[("labeled", true)],
        SplitArg::All => &[("ssl", false), ("ressl", false), ("labeled", true)],
    };
    let mut out = serde_json::Map::new();
    for &(name, masks) in splits {
        let count = n.unwrap_or(match name {
            "ssl" => cfg.data.n_ssl,
            "ressl" => cfg.data.n_ressl,
            _ => cfg.data.n_labeled,
        });
        if count == 0 {
            continue;
        }
        let spec = PhantomSpec { seed: split(cfg.seed, format!("phantom/{name}").as_str()), ..cfg.data.phantom.clone() };
        let opts = DatasetOptions { split: name.into(), modality: cfg.data.modality_mix, with_masks: masks };
        let dir = cfg.out_dir.join("data").join(name);
        let m = generate_dataset(count, &spec, &opts, &dir)?;
        out.insert(name.into(), json!({"cases": m.len(), "manifest": dir.join(format!("{name}.csv"))}));
    }
    Ok(Value::Object(out))
}

fn ssl_cmd(mut cfg: RunConfig, cmd: SslCmd) -> Result<Value> {
    let (ressl, a) = match cmd {
        SslCmd::Pretrain(a) => (false, a),
        SslCmd::Ressl(a) => (true, a),
    };
    let slot = if ressl { &mut cfg.ressl } else { &mut cfg.ssl };
    if a.steps.is_some() {
        slot.max_steps = a.steps;
    }
    set(&mut slot.lr, a.lr);
    set_path(if ressl { &mut cfg.paths.ressl_manifest } else { &mut cfg.paths.ssl_manifest }, &a.manifest);
    set_path(&mut cfg.paths.checkpoint, &a.checkpoint);
    cfg.validate()?;
    cfg.archive()?;
    let manifest = Manifest::load(required(if ressl { &cfg.paths.ressl_manifest } else { &cfg.paths.ssl_manifest }, "--manifest")?)?;
    let out = if ressl {
        pipeline::repretrain(&cfg, &manifest, &required(&cfg.paths.checkpoint, "--checkpoint")?)?
    } else {
        pipeline::pretrain(&cfg, &manifest, cfg.paths.checkpoint.as_deref())?
    };
    Ok(json!({"checkpoint": out.checkpoint, "loss_log": out.loss_log, "final_step": out.final_step, "final_loss": out.losses.last()}))
}

fn finetune_cmd(mut cfg: RunConfig, a: FinetuneArgs) -> Result<Value> {
    set_path(&mut cfg.paths.labeled_manifest, &a.manifest);
    set_path(&mut cfg.paths.checkpoint, &a.checkpoint);
    set_path(&mut cfg.paths.folds, &a.folds_file);
    if a.steps.is_some() {
        cfg.finetune.max_steps = a.steps;
    }
    set(&mut cfg.finetune.lr, a.lr);
    set(
        &mut cfg.finetune.freeze,
        a.freeze.map(|f| match f {
            FreezeArg::Encoder => FreezePolicy::Encoder,
            FreezeArg::None => FreezePolicy::None,
        }),
    );
    if a.fold.is_some() {
        cfg.fold = a.fold;
    }
    set(&mut cfg.model_id, a.model_id);
    cfg.validate()?;
    cfg.archive()?;
    let labeled = Manifest::load(required(&cfg.paths.labeled_manifest, "--manifest")?)?;
    let init = match &cfg.paths.checkpoint {
        Some(p) => EncoderInit::Checkpoint(p.clone()),
        None => EncoderInit::Scratch,
    };
    let out = match cfg.fold {
        Some(fold) => {
            let folds = pipeline::folds_for(&cfg, &labeled)?;
            let (train, _) = pipeline::fold_manifests(&labeled, &folds, fold)?;
            pipeline::finetune_fold(&cfg, &train, fold, &cfg.model_id, init)?
        }
        None => {
            let dir = cfg.out_dir.join("finetune").join(&cfg.model_id);
            let run = FinetuneRun { stage: "all", arch: &cfg.arch, cfg: &cfg.finetune, policy: &cfg.finetune_augment, seed: cfg.seed, out_dir: &dir, init };
            run_finetune(&run, &labeled)?
        }
    };
    Ok(json!({"checkpoint": out.checkpoint, "loss_log": out.loss_log, "final_loss": out.losses.last()}))
}

fn predict_cmd(mut cfg: RunConfig, a: PredictArgs) -> Result<Value> {
    set_path(&mut cfg.paths.checkpoint, &a.checkpoint);
    set_path(&mut cfg.paths.labeled_manifest, &a.manifest);
    if let Some(w) = a.window {
        cfg.inference.window = [w[0], w[1], w[2]];
    }
    set(&mut cfg.inference.overlap, a.overlap);
    set(&mut cfg.model_id, a.model_id);
    cfg.validate()?;
    cfg.archive()?;
    let (model, _) = load_model(&required(&cfg.paths.checkpoint, "--checkpoint")?)?;
    let manifest = Manifest::load(required(&cfg.paths.labeled_manifest, "--manifest")?)?;
    let dir = cfg.out_dir.join("predictions").join(&cfg.model_id);
    ensure_dir(&dir)?;
    for row in &manifest.rows {
        let v = manifest.load_image(row)?;
        let (mask, probs) = sliding_window_predict(&model, &v, &cfg.inference)?;
        save_mask(&mask, dir.join(format!("{}_pred.hsv", row.case_id)))?;
        if a.probs {
            // classes stacked along z
            let d = v.dims;
            let stacked = Volume3D::new(probs.data, [d[0] * probs.channels, d[1], d[2]], v.spacing, v.modality, format!("{}_probs", row.case_id))?;
            save_volume(&stacked, dir.join(format!("{}_probs.hsv", row.case_id)))?;
        }
    }
    Ok(json!({"predictions": dir, "cases": manifest.len()}))
}

fn evaluate_cmd(mut cfg: RunConfig, a: EvaluateArgs) -> Result<Value> {
    set_path(&mut cfg.paths.predictions, &a.predictions);
    set_path(&mut cfg.paths.labeled_manifest, &a.manifest);
    set(&mut cfg.model_id, a.model_id);
    cfg.validate()?;
    cfg.archive()?;
    let pred_dir = required(&cfg.paths.predictions, "--predictions")?;
    let manifest = Manifest::load(required(&cfg.paths.labeled_manifest, "--manifest")?)?;
    let preds = manifest
        .rows
        .iter()
        .map(|r| Ok((r.case_id.clone(), load_mask(pred_dir.join(format!("{}_pred.hsv", r.case_id)))?)))
        .collect::<Result<Vec<_>>>()?;
    let report = pipeline::evaluate(&manifest, &preds, &cfg.model_id)?.normalized()?;
    let path = cfg.out_dir.join(REPORT_FILE);
    report.write_csv(&path)?;
    let mean = report.mean(heartseg::metrics::Metric::Dice, |_| true);
    Ok(json!({"report": path, "rows": report.rows.len(), "mean_dice": mean}))
}

fn read_report(p: &Option<PathBuf>) -> Result<Option<MetricsReport>> {
    p.as_ref().map(MetricsReport::read_csv).transpose()
}

fn profile_cmd(mut cfg: RunConfig, a: ProfileArgs) -> Result<Value> {
    set_path(&mut cfg.paths.report, &a.report);
    set(&mut cfg.model_id, a.model_id);
    cfg.validate()?;
    cfg.archive()?;
    let report = read_report(&cfg.paths.report)?;
    let record = pipeline::profile(&cfg, &cfg.model_id, report.as_ref())?;
    let path = cfg.out_dir.join(pipeline::PROFILE_FILE);
    pipeline::write_profile(&path, std::slice::from_ref(&record))?;
    Ok(serde_json::to_value(&record).expect("record serializes"))
}

fn plots_cmd(mut cfg: RunConfig, a: PlotsArgs) -> Result<Value> {
    set_path(&mut cfg.paths.report, &a.report);
    cfg.validate()?;
    cfg.archive()?;
    let report = read_report(&cfg.paths.report)?.ok_or_else(|| Error::Config("missing --report".into()))?;
    let records: Vec<ProfileRecord> = report.model_ids().iter().map(|id| pipeline::profile(&cfg, id, Some(&report))).collect::<Result<_>>()?;
    let dir = cfg.out_dir.join("plots");
    let files = emit_plots(&report, &records, &cfg.plots, &dir)?;
    Ok(json!({"plots": dir, "files": files.len()}))
}

fn folds_cmd(mut cfg: RunConfig, a: FoldsArgs) -> Result<Value> {
    set_path(&mut cfg.paths.labeled_manifest, &a.manifest);
    set(&mut cfg.folds, a.k);
    cfg.validate()?;
    cfg.archive()?;
    let labeled = Manifest::load(required(&cfg.paths.labeled_manifest, "--manifest")?)?;
    let (folds, path) = pipeline::assign_folds(&cfg, &labeled)?;
    let sizes: Vec<usize> = (0..cfg.folds).map(|k| fold_split(&folds, k).0.len()).collect();
    Ok(json!({"folds": path, "sizes": sizes}))
}

fn run(cli: Cli) -> Result<Value> {
    let cfg = base_config(&cli.common)?;
    match cli.cmd {
        Cmd::Phantom { cmd: PhantomCmd::Gen { split, n, dims } } => phantom_gen(cfg, split, n, dims),
        Cmd::Ssl { cmd } => ssl_cmd(cfg, cmd),
        Cmd::Finetune(a) => finetune_cmd(cfg, a),
        Cmd::Predict(a) => predict_cmd(cfg, a),
        Cmd::Evaluate(a) => evaluate_cmd(cfg, a),
        Cmd::Profile(a) => profile_cmd(cfg, a),
        Cmd::Plots(a) => plots_cmd(cfg, a),
        Cmd::Folds(a) => folds_cmd(cfg, a),
        Cmd::RunAll => {
            let s = pipeline::run_end_to_end(&cfg)?;
            Ok(serde_json::to_value(&s).expect("summary serializes"))
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({"error": {"kind": kind, "message": message}}).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_line("usage", e.to_string().lines().next().unwrap_or_default()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(if e.kind() == "config" { 2 } else { 1 })
        }
    }
}
