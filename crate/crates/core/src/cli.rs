//! Command-line front end: dataset synthesis, crop preparation, splitting,
//! training, evaluation, scenario grids, and report generation.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures (I/O, training errors).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::evaluate::{self, FoldSummary, MetricScores};
use crate::imaging::{
    self, load_crops, load_stack, save_crops, save_stack_pair, StackFormat, TileParams,
};
use crate::imaging::synth::{synthesize_dataset, SynthParams};
use crate::model::{
    load_checkpoint, save_checkpoint, ArchitectureSpec, CheckpointBundle, EncoderKind, HeadKind,
    TaskKind, UNet,
};
use crate::report::{self, Curve, CurveSeries, FoldScores, ReportRow};
use crate::splits::{
    label_budget_subset, load_manifest, make_folds, make_splits, pretext_subset, save_manifest,
    DatasetManifest, SplitKind,
};
use crate::train::{
    self, crop_store, plan_scenario, train_main, train_pretext, CropStore, RunPlan, RunRecord,
    Scenario, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed configs, inconsistent inputs.
    Usage(String),
    /// Failures while doing the work: I/O, training, encoding.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Training configuration problems are user input; everything else that can
/// come out of a training run is a runtime failure.
fn train_err(e: train::TrainError) -> CliError {
    match e {
        train::TrainError::ConfigMismatch(m) => CliError::Usage(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn split_err(e: crate::splits::SplitError) -> CliError {
    use crate::splits::SplitError::*;
    match e {
        Io { .. } => CliError::Runtime(e.to_string()),
        EmptyDataset | FractionOutOfRange(_) | BudgetTooLarge { .. } | TooFewItems { .. }
        | Malformed(_) => CliError::Usage(e.to_string()),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "organoseg",
    about = "Self-supervised restoration pretraining and supervised segmentation for organoid microscopy crops",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic microscopy dataset with exact ground-truth masks.
    Synth(SynthArgs),
    /// Tile stacks into crops: slide a window, filter by object fraction,
    /// resize, add rotated copies.
    Prepare(PrepareArgs),
    /// Assign crops to pretext / main / evaluation splits per source.
    Split(SplitArgs),
    /// Restoration pretraining on the pretext split.
    Pretrain(PretrainArgs),
    /// Segmentation training with cross-validation folds.
    Train(TrainArgs),
    /// Score a checkpoint on the evaluation split.
    Evaluate(EvaluateArgs),
    /// Plan or run a full experiment grid.
    Scenario(ScenarioArgs),
    /// Aggregate per-fold score files into tables and curves.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; stacks land in <out>/stacks, masks in <out>/masks.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub stacks: usize,
    #[arg(long, default_value_t = 4)]
    pub slices: usize,
    #[arg(long, default_value_t = 640)]
    pub width: usize,
    #[arg(long, default_value_t = 640)]
    pub height: usize,
    #[arg(long, default_value_t = 26)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Dataset root with stacks/<id>/ and masks/<id>/ raster directories.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the prepared crops.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 636)]
    pub window: usize,
    #[arg(long, default_value_t = 60)]
    pub stride: usize,
    /// Side length crops are resized to (must be a multiple of 8).
    #[arg(long, default_value_t = 320)]
    pub resize: usize,
    /// Minimum fraction of foreground pixels for a window to be kept.
    #[arg(long, default_value_t = 0.05)]
    pub min_object_frac: f64,
    /// Skip the 90/180/270-degree rotated copies.
    #[arg(long, default_value_t = false)]
    pub no_rotations: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Directory of prepared crops.
    #[arg(long)]
    pub crops: PathBuf,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 26)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CommonTrainArgs {
    /// Directory of prepared crops.
    #[arg(long)]
    pub crops: PathBuf,
    /// Split manifest produced by `split`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and run records.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.003)]
    pub lr: f32,
    #[arg(long, default_value_t = 26)]
    pub seed: u64,
    /// Channel width of the first encoder stage.
    #[arg(long, default_value_t = 64)]
    pub base_channels: usize,
    /// Encoder: "resnet50" or "cnn".
    #[arg(long, default_value = "resnet50")]
    pub encoder: String,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Corruption: pixel-drop:<frac>, blur, or sobel.
    #[arg(long)]
    pub aug: String,
    /// Restoration loss: ssim or ssim-l1.
    #[arg(long, default_value = "ssim-l1")]
    pub loss: String,
    /// Fraction of the pretext split to use, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub pretext_frac: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// "ssl" (from a pretext checkpoint) or "supervised" (from scratch).
    #[arg(long)]
    pub mode: String,
    /// Pretext checkpoint directory; required in ssl mode.
    #[arg(long)]
    pub pretext_ckpt: Option<PathBuf>,
    /// Segmentation loss: bce, dice, or iou.
    #[arg(long, default_value = "iou")]
    pub loss: String,
    /// Keep transferred encoder weights fixed during training.
    #[arg(long, default_value_t = false)]
    pub freeze_encoder: bool,
    /// Re-initialize the decoder instead of continuing from the pretext one.
    #[arg(long, default_value_t = false)]
    pub no_transfer_decoder: bool,
    /// Number of labelled crops to draw from the main split; all by default.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of prepared crops.
    #[arg(long)]
    pub crops: PathBuf,
    /// Split manifest produced by `split`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory to score.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory for scores and overlays.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// How many example overlays (input | truth | prediction) to write.
    #[arg(long, default_value_t = 4)]
    pub overlays: usize,
}

#[derive(Args, Debug)]
pub struct ScenarioArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Scenario: 1 (pretext fractions), 2 (114-label head-to-head),
    /// 3 (label budgets), 4 (supervised fractions).
    #[arg(long)]
    pub case: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Write the run plan and stop without training.
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
    /// Run only the first N cells of the grid (all folds each); for smoke
    /// runs of an otherwise large scenario.
    #[arg(long)]
    pub max_cells: Option<usize>,
    /// Epochs for the pretext stage; defaults to --epochs.
    #[arg(long)]
    pub pretext_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding per-fold score files (the scores/ dir written by
    /// `train` or `scenario`).
    #[arg(long)]
    pub scores: PathBuf,
    /// Output directory for tables and curves.
    #[arg(long)]
    pub out: PathBuf,
    /// Folds each cell is expected to have.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

/// One fold's evaluation result; the unit the `report` command aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub cell: String,
    pub loss: String,
    pub augmentation: String,
    pub pretext_fraction: Option<f64>,
    pub label_budget: Option<usize>,
    pub framework: String,
    pub fold: usize,
    pub scores: MetricScores,
}

/// Parse argv and run. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version output are successful exits; anything else is
            // a usage problem.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Split(a) => cmd_split(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Scenario(a) => cmd_scenario(a),
        Command::Report(a) => cmd_report(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(runtime)
}

fn load_store(crops_dir: &Path) -> Result<CropStore, CliError> {
    let crops = load_crops(crops_dir).map_err(usage)?;
    if crops.is_empty() {
        return Err(CliError::Usage(format!(
            "no crops found in {}",
            crops_dir.display()
        )));
    }
    Ok(crop_store(crops))
}

/// Crops are square and uniformly sized; that side length is the network
/// input size.
fn infer_input_size(store: &CropStore) -> Result<usize, CliError> {
    let first = store.values().next().expect("store checked non-empty");
    let size = first.image.width;
    for c in store.values() {
        if c.image.width != size || c.image.height != size {
            return Err(CliError::Usage(format!(
                "crops are not uniformly {size}x{size}: {} is {}x{}",
                c.crop_id(),
                c.image.width,
                c.image.height
            )));
        }
    }
    Ok(size)
}

fn arch_for(store: &CropStore, common: &CommonTrainArgs) -> Result<ArchitectureSpec, CliError> {
    let encoder = EncoderKind::parse(&common.encoder).map_err(usage)?;
    let mut arch = ArchitectureSpec::new(encoder, HeadKind::Segmentation);
    arch.input_size = infer_input_size(store)?;
    arch.base_channels = common.base_channels;
    arch.validate().map_err(usage)?;
    Ok(arch)
}

fn check_manifest_covers(
    manifest: &DatasetManifest,
    store: &CropStore,
) -> Result<(), CliError> {
    for entry in &manifest.entries {
        if !store.contains_key(&entry.crop_id) {
            return Err(CliError::Usage(format!(
                "manifest entry {} has no crop on disk; did crops and manifest come from the same prepare run?",
                entry.crop_id
            )));
        }
    }
    Ok(())
}

/// Score a segmentation checkpoint on a set of crops: forward in eval mode,
/// threshold, per-image confusion, macro average.
fn score_bundle(
    bundle: &CheckpointBundle,
    store: &CropStore,
    ids: &[String],
    threshold: f32,
) -> Result<(MetricScores, Vec<(String, imaging::Mask2D)>), CliError> {
    if bundle.meta.task != TaskKind::Segmentation {
        return Err(CliError::Usage(
            "checkpoint is a restoration model; evaluation needs a segmentation checkpoint".into(),
        ));
    }
    let mut arch = ArchitectureSpec::new(bundle.meta.encoder, HeadKind::Segmentation);
    arch.input_size = bundle.meta.input_size;
    arch.base_channels = bundle.meta.base_channels;
    let mut model = UNet::build(&arch, bundle.meta.seed).map_err(usage)?;
    model.restore_from(bundle).map_err(usage)?;
    model.set_training(false);

    let mut confusions = Vec::with_capacity(ids.len());
    let mut predictions = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(8) {
        let mut images = Vec::with_capacity(chunk.len());
        for id in chunk {
            let crop = store
                .get(id)
                .ok_or_else(|| CliError::Usage(format!("unknown crop id {id}")))?;
            if crop.image.width != arch.input_size || crop.image.height != arch.input_size {
                return Err(CliError::Usage(format!(
                    "crop {id} is {}x{} but the checkpoint expects {}",
                    crop.image.width, crop.image.height, arch.input_size
                )));
            }
            images.push(crop.image.clone());
        }
        let out = model.forward(&train::batch_tensor(&images));
        for (i, id) in chunk.iter().enumerate() {
            let pred = evaluate::binarize(&train::plane_image(&out, i), threshold);
            let truth = &store[id].mask;
            confusions.push(evaluate::confusion(truth, &pred).map_err(runtime)?);
            predictions.push((id.clone(), pred));
        }
    }
    let scores = evaluate::macro_average(&confusions)
        .ok_or_else(|| CliError::Usage("no crops to evaluate".into()))?;
    Ok((scores, predictions))
}

fn sanitize_cell(cell: &str) -> String {
    cell.replace(['/', ':'], "_")
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    if a.stacks == 0 || a.slices == 0 || a.width == 0 || a.height == 0 {
        return Err(CliError::Usage(
            "stacks, slices, width, and height must all be positive".into(),
        ));
    }
    let params = SynthParams {
        n_stacks: a.stacks,
        slices_per_stack: a.slices,
        width: a.width,
        height: a.height,
        seed: a.seed,
        ..SynthParams::default()
    };
    let (stacks, masks) = synthesize_dataset(&params);
    for (img, mask) in stacks.iter().zip(&masks) {
        save_stack_pair(img, mask, &a.out).map_err(runtime)?;
    }
    println!(
        "wrote {} stacks x {} slices ({}x{}) under {}",
        a.stacks,
        a.slices,
        a.width,
        a.height,
        a.out.display()
    );
    Ok(())
}

fn cmd_prepare(a: PrepareArgs) -> Result<(), CliError> {
    if a.window == 0 || a.stride == 0 {
        return Err(CliError::Usage("window and stride must be positive".into()));
    }
    if a.resize == 0 || a.resize % 8 != 0 {
        return Err(CliError::Usage(
            "resize must be a positive multiple of 8".into(),
        ));
    }
    if !(0.0..=1.0).contains(&a.min_object_frac) {
        return Err(CliError::Usage(
            "min-object-frac must be in [0, 1]".into(),
        ));
    }
    let stacks_dir = a.data.join("stacks");
    let masks_dir = a.data.join("masks");
    let mut sources: Vec<String> = std::fs::read_dir(&stacks_dir)
        .map_err(|_| CliError::Usage(format!("no stacks directory at {}", stacks_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(CliError::Usage(format!(
            "no stack directories under {}",
            stacks_dir.display()
        )));
    }

    let params = TileParams {
        window: a.window,
        stride: a.stride,
        resize_to: a.resize,
        min_object_fraction: a.min_object_frac,
    };
    let mut all = Vec::new();
    for source in &sources {
        let stack =
            load_stack(&stacks_dir.join(source), StackFormat::RasterDir).map_err(usage)?;
        let mask = load_stack(&masks_dir.join(source), StackFormat::RasterDir).map_err(usage)?;
        let crops = imaging::tile_stack(&stack, &mask, &params).map_err(usage)?;
        all.extend(crops);
    }
    let kept = all.len();
    if !a.no_rotations {
        all = imaging::rotate_enrich(&all).map_err(runtime)?;
    }
    if all.is_empty() {
        return Err(CliError::Usage(
            "no windows passed the object-fraction filter; lower --min-object-frac".into(),
        ));
    }
    save_crops(&all, &a.out).map_err(runtime)?;
    println!(
        "kept {kept} windows from {} sources ({} crops with rotations) -> {}",
        sources.len(),
        all.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<(), CliError> {
    let crops = load_crops(&a.crops).map_err(usage)?;
    let manifest = make_splits(&crops, a.seed).map_err(split_err)?;
    save_manifest(&a.out, &manifest).map_err(split_err)?;
    let count = |k| manifest.ids_in(k).len();
    println!(
        "split {} crops: pretext {} / main {} / evaluation {} (seed {}) -> {}",
        manifest.entries.len(),
        count(SplitKind::Pretext),
        count(SplitKind::Main),
        count(SplitKind::Evaluation),
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn pretrain_config(a: &PretrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::pretext(&a.loss, &a.aug);
    cfg.epochs = a.common.epochs;
    cfg.batch_size = a.common.batch_size;
    cfg.learning_rate = a.common.lr;
    cfg.seed = a.common.seed;
    cfg.encoder = a.common.encoder.clone();
    cfg
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let store = load_store(&a.common.crops)?;
    let manifest = load_manifest(&a.common.manifest).map_err(split_err)?;
    check_manifest_covers(&manifest, &store)?;
    let arch = arch_for(&store, &a.common)?;
    let subset = pretext_subset(&manifest, a.pretext_frac).map_err(split_err)?;
    let cfg = pretrain_config(&a);

    let (bundle, mut record) =
        train_pretext(&store, &subset.train, &subset.validate, &arch, &cfg).map_err(train_err)?;
    let ckpt_dir = a.common.out.join("checkpoint");
    save_checkpoint(&ckpt_dir, &bundle).map_err(runtime)?;
    record.checkpoint = Some(ckpt_dir.display().to_string());
    write_json(&a.common.out.join("run.json"), &record)?;
    write_json(&a.common.out.join("config.json"), &cfg)?;
    println!(
        "pretext {} / {} on {} train + {} val crops: best epoch {} (val loss {:.6}) -> {}",
        a.aug,
        a.loss,
        subset.train.len(),
        subset.validate.len(),
        record.best_epoch,
        record.val_losses[record.best_epoch],
        ckpt_dir.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::main(&a.loss);
    cfg.epochs = a.common.epochs;
    cfg.batch_size = a.common.batch_size;
    cfg.learning_rate = a.common.lr;
    cfg.seed = a.common.seed;
    cfg.encoder = a.common.encoder.clone();
    cfg.freeze_encoder = a.freeze_encoder;
    cfg.transfer_decoder = !a.no_transfer_decoder;
    cfg
}

/// Train one fold and score it on the evaluation split: everything below the
/// fold loop of both `train` and `scenario`.
#[allow(clippy::too_many_arguments)]
fn run_fold(
    store: &CropStore,
    folds: &[Vec<String>],
    fold: usize,
    eval_ids: &[String],
    pretext: Option<&CheckpointBundle>,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(RunRecord, MetricScores), CliError> {
    let val_ids = &folds[fold];
    let train_ids: Vec<String> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fold)
        .flat_map(|(_, f)| f.iter().cloned())
        .collect();
    let (bundle, mut record) =
        train_main(store, &train_ids, val_ids, pretext, arch, cfg).map_err(train_err)?;
    let ckpt_dir = out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &bundle).map_err(runtime)?;
    record.fold = Some(fold);
    record.checkpoint = Some(ckpt_dir.display().to_string());
    write_json(&out_dir.join("run.json"), &record)?;
    let (scores, _) = score_bundle(&bundle, store, eval_ids, 0.5)?;
    write_json(&out_dir.join("scores.json"), &scores)?;
    Ok((record, scores))
}

fn summary_rows(scores: &[MetricScores]) -> BTreeMap<String, FoldSummary> {
    let mut out = BTreeMap::new();
    let metrics: [(&str, fn(&MetricScores) -> f64); 5] = [
        ("accuracy", |m| m.accuracy),
        ("precision", |m| m.precision),
        ("recall", |m| m.recall),
        ("f1", |m| m.f1),
        ("jaccard", |m| m.jaccard),
    ];
    for (name, get) in metrics {
        let vals: Vec<f64> = scores.iter().map(get).collect();
        out.insert(
            name.to_string(),
            evaluate::aggregate(&vals).expect("at least one fold"),
        );
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let store = load_store(&a.common.crops)?;
    let manifest = load_manifest(&a.common.manifest).map_err(split_err)?;
    check_manifest_covers(&manifest, &store)?;
    let arch = arch_for(&store, &a.common)?;
    let cfg = train_config(&a);

    let pretext = match a.mode.as_str() {
        "supervised" => {
            if a.pretext_ckpt.is_some() {
                return Err(CliError::Usage(
                    "--pretext-ckpt only applies to --mode ssl".into(),
                ));
            }
            None
        }
        "ssl" => {
            let dir = a.pretext_ckpt.as_ref().ok_or_else(|| {
                CliError::Usage("--mode ssl needs --pretext-ckpt".into())
            })?;
            let bundle = load_checkpoint(dir).map_err(usage)?;
            if bundle.meta.task != TaskKind::Restoration {
                return Err(CliError::Usage(
                    "pretext checkpoint is not a restoration model".into(),
                ));
            }
            Some(bundle)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown mode {other} (expected ssl or supervised)"
            )))
        }
    };

    let mut label_ids = manifest.ids_in(SplitKind::Main);
    if let Some(n) = a.labels {
        label_ids = label_budget_subset(&manifest, n).map_err(split_err)?;
    }
    let folds = make_folds(&label_ids, a.folds, cfg.seed).map_err(split_err)?;
    let eval_ids = manifest.ids_in(SplitKind::Evaluation);
    if eval_ids.is_empty() {
        return Err(CliError::Usage("manifest has no evaluation split".into()));
    }

    write_json(&a.common.out.join("config.json"), &cfg)?;
    let mut fold_scores = Vec::new();
    for fold in 0..folds.len() {
        let out_dir = a.common.out.join(format!("fold_{fold}"));
        let (record, scores) = run_fold(
            &store,
            &folds,
            fold,
            &eval_ids,
            pretext.as_ref(),
            &arch,
            &cfg,
            &out_dir,
        )?;
        println!(
            "fold {fold}: best epoch {} (val loss {:.6}), eval F1 {:.4}",
            record.best_epoch, record.val_losses[record.best_epoch], scores.f1
        );
        write_json(
            &a.common.out.join("scores").join(format!("fold_{fold}.json")),
            &ScoreRecord {
                cell: format!("{}/{}", a.mode, a.loss),
                loss: a.loss.clone(),
                augmentation: pretext
                    .as_ref()
                    .map(|b| b.meta.augmentation.clone())
                    .unwrap_or_default(),
                pretext_fraction: None,
                label_budget: a.labels,
                framework: a.mode.clone(),
                fold,
                scores: scores.clone(),
            },
        )?;
        fold_scores.push(scores);
    }
    let summary = summary_rows(&fold_scores);
    write_json(&a.common.out.join("summary.json"), &summary)?;
    let f1 = &summary["f1"];
    println!(
        "{} folds done: F1 best {:.4} / mean {:.4} / std {:.4} -> {}",
        folds.len(),
        f1.best,
        f1.mean,
        f1.std,
        a.common.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::Usage("threshold must be in [0, 1]".into()));
    }
    let store = load_store(&a.crops)?;
    let manifest = load_manifest(&a.manifest).map_err(split_err)?;
    check_manifest_covers(&manifest, &store)?;
    let eval_ids = manifest.ids_in(SplitKind::Evaluation);
    if eval_ids.is_empty() {
        return Err(CliError::Usage("manifest has no evaluation split".into()));
    }
    let bundle = load_checkpoint(&a.ckpt).map_err(usage)?;
    let (scores, predictions) = score_bundle(&bundle, &store, &eval_ids, a.threshold)?;
    write_json(&a.out.join("scores.json"), &scores)?;
    for (id, pred) in predictions.iter().take(a.overlays) {
        let crop = &store[id];
        report::emit_overlay(&a.out, &sanitize_cell(id), &crop.image, &crop.mask, pred)
            .map_err(runtime)?;
    }
    println!(
        "{} crops: accuracy {:.4} precision {:.4} recall {:.4} F1 {:.4} IoU {:.4}",
        eval_ids.len(),
        scores.accuracy,
        scores.precision,
        scores.recall,
        scores.f1,
        scores.jaccard
    );
    Ok(())
}

/// Cache key for a pretext run shared by several grid cells.
fn pretext_key(plan: &RunPlan) -> Option<(String, String, String, String)> {
    match (&plan.augmentation, &plan.pretext_loss, plan.pretext_fraction) {
        (Some(aug), Some(loss), Some(frac)) => Some((
            aug.clone(),
            loss.clone(),
            format!("{frac:.4}"),
            plan.encoder.clone(),
        )),
        _ => None,
    }
}

fn cmd_scenario(a: ScenarioArgs) -> Result<(), CliError> {
    let scenario = Scenario::parse(&a.case).map_err(train_err)?;
    if a.folds == 0 {
        return Err(CliError::Usage("folds must be >= 1".into()));
    }
    let plans = plan_scenario(scenario, a.folds);
    let out = &a.common.out;
    write_json(&out.join("plans.json"), &plans)?;

    // Group fold-plans back into cells, preserving grid order.
    let mut cells: Vec<(String, Vec<RunPlan>)> = Vec::new();
    for plan in plans {
        match cells.last_mut() {
            Some((cell, group)) if *cell == plan.cell => group.push(plan),
            _ => cells.push((plan.cell.clone(), vec![plan])),
        }
    }
    println!(
        "scenario {}: {} cells x {} folds ({} runs) planned -> {}",
        scenario.label(),
        cells.len(),
        a.folds,
        cells.len() * a.folds,
        out.join("plans.json").display()
    );
    if a.dry_run {
        return Ok(());
    }
    if let Some(n) = a.max_cells {
        cells.truncate(n.max(1));
    }

    let store = load_store(&a.common.crops)?;
    let manifest = load_manifest(&a.common.manifest).map_err(split_err)?;
    check_manifest_covers(&manifest, &store)?;
    let seed = a.common.seed;
    let eval_ids = manifest.ids_in(SplitKind::Evaluation);
    if eval_ids.is_empty() {
        return Err(CliError::Usage("manifest has no evaluation split".into()));
    }
    let main_ids = manifest.ids_in(SplitKind::Main);

    let mut pretext_cache: BTreeMap<(String, String, String, String), CheckpointBundle> =
        BTreeMap::new();
    let mut rows: Vec<ReportRow> = Vec::new();
    for (cell, group) in &cells {
        let plan = &group[0];
        // A cell owns one label pool: an explicit budget, a fraction of the
        // main split, or the whole main split.
        let label_ids = if let Some(budget) = plan.label_budget {
            label_budget_subset(&manifest, budget).map_err(split_err)?
        } else if let Some(frac) = plan.supervised_fraction {
            let n = ((main_ids.len() as f64) * frac).floor().max(1.0) as usize;
            label_budget_subset(&manifest, n).map_err(split_err)?
        } else {
            main_ids.clone()
        };
        let folds = make_folds(&label_ids, a.folds, seed).map_err(split_err)?;

        let pretext = if plan.framework == "ssl" {
            let key = pretext_key(plan).ok_or_else(|| {
                CliError::Runtime(format!("ssl cell {cell} is missing pretext settings"))
            })?;
            if !pretext_cache.contains_key(&key) {
                let frac = plan.pretext_fraction.expect("checked by pretext_key");
                let subset = pretext_subset(&manifest, frac).map_err(split_err)?;
                let mut cfg = TrainConfig::pretext(
                    plan.pretext_loss.as_deref().expect("checked"),
                    plan.augmentation.as_deref().expect("checked"),
                );
                cfg.epochs = a.pretext_epochs.unwrap_or(a.common.epochs);
                cfg.batch_size = a.common.batch_size;
                cfg.learning_rate = a.common.lr;
                cfg.seed = seed;
                cfg.encoder = plan.encoder.clone();
                let mut arch = arch_for(&store, &a.common)?;
                arch.encoder = EncoderKind::parse(&plan.encoder).map_err(usage)?;
                let (bundle, _) =
                    train_pretext(&store, &subset.train, &subset.validate, &arch, &cfg)
                        .map_err(train_err)?;
                let ckpt_dir = out
                    .join("pretext")
                    .join(sanitize_cell(&format!("{}_{}_{}", key.0, key.1, key.2)));
                save_checkpoint(&ckpt_dir, &bundle).map_err(runtime)?;
                pretext_cache.insert(key.clone(), bundle);
            }
            Some(&pretext_cache[&key])
        } else {
            None
        };

        let mut cfg = TrainConfig::main(&plan.main_loss);
        cfg.epochs = a.common.epochs;
        cfg.batch_size = a.common.batch_size;
        cfg.learning_rate = a.common.lr;
        cfg.seed = seed;
        cfg.encoder = plan.encoder.clone();
        cfg.freeze_encoder = plan.freeze_encoder;
        let mut arch = arch_for(&store, &a.common)?;
        arch.encoder = EncoderKind::parse(&plan.encoder).map_err(usage)?;

        let mut fold_scores = Vec::new();
        for plan_fold in group {
            let fold = plan_fold.fold;
            let out_dir = out.join("runs").join(sanitize_cell(cell)).join(format!("fold_{fold}"));
            let (_, scores) =
                run_fold(&store, &folds, fold, &eval_ids, pretext, &arch, &cfg, &out_dir)?;
            write_json(
                &out.join("scores")
                    .join(format!("{}__fold_{fold}.json", sanitize_cell(cell))),
                &ScoreRecord {
                    cell: cell.clone(),
                    loss: plan.main_loss.clone(),
                    augmentation: plan.augmentation.clone().unwrap_or_default(),
                    pretext_fraction: plan.pretext_fraction,
                    label_budget: plan.label_budget,
                    framework: plan.framework.clone(),
                    fold,
                    scores: scores.clone(),
                },
            )?;
            fold_scores.push(FoldScores { fold, scores });
        }
        let row = report::summarize_cell(
            cell,
            &plan.main_loss,
            plan.augmentation.as_deref().unwrap_or(""),
            plan.pretext_fraction,
            plan.label_budget,
            &fold_scores,
            a.folds,
        )
        .map_err(runtime)?;
        println!(
            "{cell}: F1 best {:.4} / mean {:.4} / std {:.4}",
            row.f1.best, row.f1.mean, row.f1.std
        );
        rows.push(row);
    }

    report::emit_tables(out, scenario.label(), &rows).map_err(runtime)?;
    emit_scenario_curves(out, scenario, &rows)?;
    println!(
        "{} cells done -> {}",
        rows.len(),
        out.join("tables").display()
    );
    Ok(())
}

/// Budget- and fraction-sweep scenarios get a mean-F1 curve per framework.
fn emit_scenario_curves(
    out: &Path,
    scenario: Scenario,
    rows: &[ReportRow],
) -> Result<(), CliError> {
    let (name, title, x_of): (&str, &str, fn(&ReportRow) -> Option<f64>) = match scenario {
        Scenario::S3LabelBudgets => (
            "s3_f1_vs_labels",
            "mean F1 vs label budget",
            |r| r.label_budget.map(|b| b as f64),
        ),
        Scenario::S4SupervisedFractions => (
            "s4_f1_vs_fraction",
            "mean F1 vs labelled fraction",
            |r| {
                r.config_id
                    .rsplit("frac")
                    .next()
                    .and_then(|s| s.parse().ok())
            },
        ),
        _ => return Ok(()),
    };
    let mut by_framework: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let Some(x) = x_of(row) else { continue };
        let framework = row
            .config_id
            .split('/')
            .nth(1)
            .unwrap_or("all")
            .to_string();
        by_framework.entry(framework).or_default().push((x, row.f1.mean));
    }
    let mut series: Vec<CurveSeries> = by_framework
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            CurveSeries { name, points }
        })
        .collect();
    series.retain(|s| !s.points.is_empty());
    if series.is_empty() {
        return Ok(());
    }
    let curve = Curve {
        title: title.to_string(),
        series,
        reference: None,
    };
    report::emit_curve(out, name, &curve).map_err(runtime)?;
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let entries = std::fs::read_dir(&a.scores)
        .map_err(|_| CliError::Usage(format!("no scores directory at {}", a.scores.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no score files in {}",
            a.scores.display()
        )));
    }

    let mut by_cell: BTreeMap<String, (ScoreRecord, Vec<FoldScores>)> = BTreeMap::new();
    for path in &paths {
        let bytes = std::fs::read(path).map_err(runtime)?;
        let record: ScoreRecord = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let fold = FoldScores {
            fold: record.fold,
            scores: record.scores.clone(),
        };
        by_cell
            .entry(record.cell.clone())
            .or_insert_with(|| (record, Vec::new()))
            .1
            .push(fold);
    }

    let mut rows = Vec::new();
    for (cell, (record, folds)) in &by_cell {
        rows.push(
            report::summarize_cell(
                cell,
                &record.loss,
                &record.augmentation,
                record.pretext_fraction,
                record.label_budget,
                folds,
                a.folds,
            )
            .map_err(runtime)?,
        );
    }
    report::emit_tables(&a.out, "report", &rows).map_err(runtime)?;
    println!(
        "aggregated {} score files into {} cells -> {}",
        paths.len(),
        rows.len(),
        a.out.join("tables").display()
    );
    Ok(())
}
