//! Training loops for the restoration pretext task and the segmentation main
//! task, plus the scenario grids that orchestrate full experiment runs.
//!
//! Hyperparameter defaults: Adam at learning rate 0.003, batch size 16,
//! 50 epochs, seed 26. Checkpoints are selected by best validation loss.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentError, AugmentationSpec};
use crate::imaging::{CropRecord, Image2D, Mask2D};
use crate::losses::{self, LossError, LossKind, SmoothingConfig, SsimConfig};
use crate::model::{
    ArchitectureSpec, CheckpointBundle, CheckpointMeta, EncoderKind, HeadKind, ModelError,
    TaskKind, TransferScope, UNet, CHECKPOINT_FORMAT_VERSION,
};
use crate::nn::{Adam, Tensor};
use crate::splits::derive_rng;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("crop id {0} not present in the crop store")]
    UnknownCrop(String),
    #[error("crop {id} is {w}x{h} but the model expects {expect}x{expect}")]
    SizeMismatch {
        id: String,
        w: usize,
        h: usize,
        expect: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Pretext,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Loss label, e.g. "ssim-l1" for pretext or "iou" for main.
    pub loss: String,
    pub task: TaskMode,
    pub freeze_encoder: bool,
    /// Encoder label: "resnet50" or "cnn".
    pub encoder: String,
    /// Corruption label for the pretext task, e.g. "blur" or
    /// "pixel-drop:0.25"; none for the main task.
    pub augmentation: Option<String>,
    /// When training from a pretext checkpoint, also continue from its
    /// decoder weights (the default) instead of re-initializing the decoder.
    pub transfer_decoder: bool,
}

impl TrainConfig {
    pub fn pretext(loss: &str, augmentation: &str) -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.003,
            seed: 26,
            loss: loss.to_string(),
            task: TaskMode::Pretext,
            freeze_encoder: false,
            encoder: "resnet50".to_string(),
            augmentation: Some(augmentation.to_string()),
            transfer_decoder: true,
        }
    }

    pub fn main(loss: &str) -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.003,
            seed: 26,
            loss: loss.to_string(),
            task: TaskMode::Main,
            freeze_encoder: false,
            encoder: "resnet50".to_string(),
            augmentation: None,
            transfer_decoder: true,
        }
    }

    fn validate_common(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::ConfigMismatch("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::ConfigMismatch(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::ConfigMismatch("epochs must be >= 1".into()));
        }
        EncoderKind::parse(&self.encoder)
            .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub fold: Option<usize>,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    /// Path of the saved checkpoint directory, once written.
    pub checkpoint: Option<String>,
    pub wall_seconds: f64,
}

/// Pure run-config decoding; shared by the CLI and the fuzz harness.
pub fn parse_run_config(bytes: &[u8]) -> Result<TrainConfig, TrainError> {
    let cfg: TrainConfig = serde_json::from_slice(bytes)
        .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    cfg.validate_common()?;
    Ok(cfg)
}

pub type CropStore = BTreeMap<String, CropRecord>;

pub fn crop_store(crops: Vec<CropRecord>) -> CropStore {
    crops.into_iter().map(|c| (c.crop_id(), c)).collect()
}

fn gather<'a>(store: &'a CropStore, ids: &[String]) -> Result<Vec<&'a CropRecord>, TrainError> {
    ids.iter()
        .map(|id| store.get(id).ok_or_else(|| TrainError::UnknownCrop(id.clone())))
        .collect()
}

fn check_size(c: &CropRecord, expect: usize) -> Result<(), TrainError> {
    if c.image.width != expect || c.image.height != expect {
        return Err(TrainError::SizeMismatch {
            id: c.crop_id(),
            w: c.image.width,
            h: c.image.height,
            expect,
        });
    }
    Ok(())
}

pub fn batch_tensor(images: &[Image2D]) -> Tensor {
    let s = images[0].width;
    let mut t = Tensor::zeros((images.len(), 1, s, s));
    for (i, img) in images.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                t[[i, 0, y, x]] = img.data[y * s + x];
            }
        }
    }
    t
}

pub fn plane_image(t: &Tensor, i: usize) -> Image2D {
    let (_, _, h, w) = t.dim();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(t[[i, 0, y, x]]);
        }
    }
    Image2D::new(w, h, data).expect("tensor plane is a valid image")
}

/// Seeded per-epoch shuffle, then contiguous batches.
fn epoch_batches(ids: &[String], seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<String>> {
    let mut order: Vec<String> = ids.to_vec();
    let mut rng = derive_rng(seed, &format!("epoch:{epoch}"));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Stable per-(epoch, crop) corruption seed.
fn corruption_seed(seed: u64, epoch: usize, crop_id: &str) -> u64 {
    derive_rng(seed, &format!("corrupt:{epoch}:{crop_id}")).random()
}

enum LossTarget<'a> {
    Clean(&'a Image2D),
    Mask(&'a Mask2D),
}

fn loss_and_grad(
    kind: LossKind,
    target: &LossTarget,
    pred: &Image2D,
    ssim_cfg: &SsimConfig,
    smooth_cfg: &SmoothingConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    Ok(match (kind, target) {
        (LossKind::Ssim, LossTarget::Clean(c)) => (
            losses::loss_ssim(c, pred, ssim_cfg)?,
            losses::grad_loss_ssim(c, pred, ssim_cfg)?,
        ),
        (LossKind::SsimL1, LossTarget::Clean(c)) => (
            losses::loss_ssim_l1(c, pred, ssim_cfg)?,
            losses::grad_loss_ssim_l1(c, pred, ssim_cfg)?,
        ),
        (LossKind::Bce, LossTarget::Mask(m)) => {
            (losses::loss_bce(m, pred)?, losses::grad_loss_bce(m, pred)?)
        }
        (LossKind::Dice, LossTarget::Mask(m)) => (
            losses::loss_dice(m, pred, smooth_cfg)?,
            losses::grad_loss_dice(m, pred, smooth_cfg)?,
        ),
        (LossKind::Iou, LossTarget::Mask(m)) => (
            losses::loss_iou(m, pred, smooth_cfg)?,
            losses::grad_loss_iou(m, pred, smooth_cfg)?,
        ),
        _ => {
            return Err(TrainError::ConfigMismatch(
                "loss kind does not match target kind".into(),
            ))
        }
    })
}

fn loss_only(
    kind: LossKind,
    target: &LossTarget,
    pred: &Image2D,
    ssim_cfg: &SsimConfig,
    smooth_cfg: &SmoothingConfig,
) -> Result<f64, TrainError> {
    Ok(match (kind, target) {
        (LossKind::Ssim, LossTarget::Clean(c)) => losses::loss_ssim(c, pred, ssim_cfg)?,
        (LossKind::SsimL1, LossTarget::Clean(c)) => losses::loss_ssim_l1(c, pred, ssim_cfg)?,
        (LossKind::Bce, LossTarget::Mask(m)) => losses::loss_bce(m, pred)?,
        (LossKind::Dice, LossTarget::Mask(m)) => losses::loss_dice(m, pred, smooth_cfg)?,
        (LossKind::Iou, LossTarget::Mask(m)) => losses::loss_iou(m, pred, smooth_cfg)?,
        _ => {
            return Err(TrainError::ConfigMismatch(
                "loss kind does not match target kind".into(),
            ))
        }
    })
}

struct Trainer<'a> {
    store: &'a CropStore,
    model: UNet,
    opt: Adam,
    cfg: &'a TrainConfig,
    kind: LossKind,
    augmentation: Option<AugmentationSpec>,
    ssim_cfg: SsimConfig,
    smooth_cfg: SmoothingConfig,
}

impl<'a> Trainer<'a> {
    /// One pass over a batch: corrupt (pretext only), forward, average the
    /// per-image losses, backprop the averaged gradient.
    fn train_batch(&mut self, ids: &[String], epoch: usize) -> Result<f64, TrainError> {
        let crops = gather(self.store, ids)?;
        let expect = self.model.spec.input_size;
        for c in &crops {
            check_size(c, expect)?;
        }
        let inputs: Vec<Image2D> = match &self.augmentation {
            Some(aug) => crops
                .iter()
                .map(|c| aug.apply(&c.image, corruption_seed(self.cfg.seed, epoch, &c.crop_id())))
                .collect::<Result<_, _>>()?,
            None => crops.iter().map(|c| c.image.clone()).collect(),
        };
        let x = batch_tensor(&inputs);
        let y = self.model.forward(&x);
        let n = crops.len();
        let (_, _, h, w) = y.dim();
        let mut gy = Tensor::zeros(y.dim());
        let mut total = 0.0;
        for (i, c) in crops.iter().enumerate() {
            let pred = plane_image(&y, i);
            let target = match self.cfg.task {
                TaskMode::Pretext => LossTarget::Clean(&c.image),
                TaskMode::Main => LossTarget::Mask(&c.mask),
            };
            let (l, g) =
                loss_and_grad(self.kind, &target, &pred, &self.ssim_cfg, &self.smooth_cfg)?;
            total += l;
            for yy in 0..h {
                for xx in 0..w {
                    gy[[i, 0, yy, xx]] = (g[yy * w + xx] / n as f64) as f32;
                }
            }
        }
        self.model.params.zero_grads();
        self.model.backward(&gy);
        self.opt.step(&mut self.model.params);
        Ok(total)
    }

    fn eval_loss(&mut self, ids: &[String]) -> Result<f64, TrainError> {
        let expect = self.model.spec.input_size;
        let mut total = 0.0;
        for chunk in ids.chunks(self.cfg.batch_size) {
            let crops = gather(self.store, chunk)?;
            for c in &crops {
                check_size(c, expect)?;
            }
            // Validation scores restoration on the corrupted input too, with
            // a fixed (epoch-independent) corruption per crop.
            let inputs: Vec<Image2D> = match &self.augmentation {
                Some(aug) => crops
                    .iter()
                    .map(|c| aug.apply(&c.image, corruption_seed(self.cfg.seed, usize::MAX, &c.crop_id())))
                    .collect::<Result<_, _>>()?,
                None => crops.iter().map(|c| c.image.clone()).collect(),
            };
            let x = batch_tensor(&inputs);
            let y = self.model.forward(&x);
            for (i, c) in crops.iter().enumerate() {
                let pred = plane_image(&y, i);
                let target = match self.cfg.task {
                    TaskMode::Pretext => LossTarget::Clean(&c.image),
                    TaskMode::Main => LossTarget::Mask(&c.mask),
                };
                total += loss_only(self.kind, &target, &pred, &self.ssim_cfg, &self.smooth_cfg)?;
            }
        }
        Ok(total / ids.len() as f64)
    }

    fn fit(
        &mut self,
        train_ids: &[String],
        val_ids: &[String],
        meta: CheckpointMeta,
    ) -> Result<(CheckpointBundle, RunRecord), TrainError> {
        if train_ids.is_empty() {
            return Err(TrainError::ConfigMismatch("empty training set".into()));
        }
        let started = Instant::now();
        let mut train_losses = Vec::with_capacity(self.cfg.epochs);
        let mut val_losses = Vec::with_capacity(self.cfg.epochs);
        let mut best_epoch = 0;
        let mut best_val = f64::INFINITY;
        let mut best: Option<CheckpointBundle> = None;
        for epoch in 0..self.cfg.epochs {
            self.model.set_training(true);
            let mut total = 0.0;
            for batch in epoch_batches(train_ids, self.cfg.seed, epoch, self.cfg.batch_size) {
                total += self.train_batch(&batch, epoch)?;
            }
            let train_loss = total / train_ids.len() as f64;
            self.model.set_training(false);
            let val_loss = if val_ids.is_empty() {
                train_loss
            } else {
                self.eval_loss(val_ids)?
            };
            train_losses.push(train_loss);
            val_losses.push(val_loss);
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                let mut m = meta.clone();
                m.epoch = epoch;
                best = Some(self.model.to_bundle(m));
            }
        }
        let bundle = best.expect("at least one epoch ran");
        let record = RunRecord {
            config: self.cfg.clone(),
            fold: None,
            train_losses,
            val_losses,
            best_epoch,
            checkpoint: None,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        Ok((bundle, record))
    }
}

fn base_meta(cfg: &TrainConfig, task: TaskKind, arch: &ArchitectureSpec) -> CheckpointMeta {
    CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        task,
        encoder: arch.encoder,
        base_channels: arch.base_channels,
        input_size: arch.input_size,
        loss: cfg.loss.clone(),
        augmentation: cfg.augmentation.clone().unwrap_or_default(),
        seed: cfg.seed,
        epoch: 0,
        frozen_names: Vec::new(),
    }
}

/// Restoration pretraining: corrupt each crop on the fly, train encoder and
/// decoder together to reconstruct the clean crop, return the checkpoint of
/// the best validation-loss epoch.
pub fn train_pretext(
    store: &CropStore,
    train_ids: &[String],
    val_ids: &[String],
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<(CheckpointBundle, RunRecord), TrainError> {
    cfg.validate_common()?;
    if cfg.task != TaskMode::Pretext {
        return Err(TrainError::ConfigMismatch("task must be pretext".into()));
    }
    let kind = LossKind::parse(&cfg.loss).map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    if !kind.is_pretext() {
        return Err(TrainError::ConfigMismatch(format!(
            "{} is a segmentation loss; pretext needs ssim or ssim-l1",
            cfg.loss
        )));
    }
    let aug_label = cfg.augmentation.as_deref().ok_or_else(|| {
        TrainError::ConfigMismatch("pretext training needs an augmentation".into())
    })?;
    let augmentation = AugmentationSpec::parse(aug_label)
        .map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;

    let mut spec = *arch;
    spec.encoder = EncoderKind::parse(&cfg.encoder).expect("validated");
    spec.head = HeadKind::Restoration;
    let model = UNet::build(&spec, cfg.seed)?;
    let opt = Adam::new(&model.params, cfg.learning_rate);
    let meta = base_meta(cfg, TaskKind::Restoration, &spec);
    let mut trainer = Trainer {
        store,
        model,
        opt,
        cfg,
        kind,
        augmentation: Some(augmentation),
        ssim_cfg: SsimConfig::default(),
        smooth_cfg: SmoothingConfig::default(),
    };
    trainer.fit(train_ids, val_ids, meta)
}

/// Segmentation training. With a pretext checkpoint (self-supervised mode)
/// the weights transfer in and the encoder freezes per `cfg.freeze_encoder`;
/// without one (supervised mode) everything starts from random init.
pub fn train_main(
    store: &CropStore,
    train_ids: &[String],
    val_ids: &[String],
    pretext_ckpt: Option<&CheckpointBundle>,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<(CheckpointBundle, RunRecord), TrainError> {
    cfg.validate_common()?;
    if cfg.task != TaskMode::Main {
        return Err(TrainError::ConfigMismatch("task must be main".into()));
    }
    let kind = LossKind::parse(&cfg.loss).map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    if kind.is_pretext() {
        return Err(TrainError::ConfigMismatch(format!(
            "{} is a restoration loss; main training needs bce, dice, or iou",
            cfg.loss
        )));
    }

    let mut spec = *arch;
    spec.encoder = EncoderKind::parse(&cfg.encoder).expect("validated");
    spec.head = HeadKind::Segmentation;
    let mut model = UNet::build(&spec, cfg.seed)?;
    if let Some(ckpt) = pretext_ckpt {
        let scope = if cfg.transfer_decoder {
            TransferScope::EncoderAndDecoder
        } else {
            TransferScope::EncoderOnly
        };
        model.transfer_from(ckpt, scope)?;
    }
    let mut meta = base_meta(cfg, TaskKind::Segmentation, &spec);
    if cfg.freeze_encoder {
        meta.frozen_names = model.freeze_encoder();
    }
    let opt = Adam::new(&model.params, cfg.learning_rate);
    let mut trainer = Trainer {
        store,
        model,
        opt,
        cfg,
        kind,
        augmentation: None,
        ssim_cfg: SsimConfig::default(),
        smooth_cfg: SmoothingConfig::default(),
    };
    trainer.fit(train_ids, val_ids, meta)
}

// ---------------------------------------------------------------------------
// Scenario grids
// ---------------------------------------------------------------------------

pub const SCENARIO_AUGMENTATIONS: [&str; 5] = [
    "pixel-drop:0.25",
    "pixel-drop:0.5",
    "pixel-drop:0.75",
    "blur",
    "sobel",
];
pub const PRETEXT_LOSSES: [&str; 2] = ["ssim", "ssim-l1"];
pub const MAIN_LOSSES: [&str; 3] = ["bce", "dice", "iou"];
pub const PRETEXT_FRACTIONS: [f64; 3] = [0.10, 0.50, 1.00];
pub const SMALL_LABEL_BUDGET: usize = 114;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Pretext-fraction sweep: every corruption x pretext loss x main loss x
    /// fraction, self-supervised, 114 labels.
    S1PretextFractions,
    /// Head-to-head at the minimal 114-label budget.
    S2SmallLabels,
    /// Label budgets 200..=1000 step 100 for both frameworks.
    S3LabelBudgets,
    /// Supervised at 10%..100% of the main split vs the SSL reference.
    S4SupervisedFractions,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "1" | "s1" => Ok(Self::S1PretextFractions),
            "2" | "s2" => Ok(Self::S2SmallLabels),
            "3" | "s3" => Ok(Self::S3LabelBudgets),
            "4" | "s4" => Ok(Self::S4SupervisedFractions),
            other => Err(TrainError::ConfigMismatch(format!(
                "unknown scenario {other} (expected 1..4)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::S1PretextFractions => "s1",
            Self::S2SmallLabels => "s2",
            Self::S3LabelBudgets => "s3",
            Self::S4SupervisedFractions => "s4",
        }
    }
}

/// One planned training run: a grid cell plus a fold index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub scenario: String,
    pub cell: String,
    /// "ssl" or "supervised".
    pub framework: String,
    pub encoder: String,
    pub augmentation: Option<String>,
    pub pretext_loss: Option<String>,
    pub main_loss: String,
    pub pretext_fraction: Option<f64>,
    pub label_budget: Option<usize>,
    pub supervised_fraction: Option<f64>,
    pub freeze_encoder: bool,
    pub fold: usize,
}

/// Expand a scenario into its full grid of planned runs (cells x folds).
pub fn plan_scenario(scenario: Scenario, folds: usize) -> Vec<RunPlan> {
    let mut cells: Vec<RunPlan> = Vec::new();
    let proto = |cell: String| RunPlan {
        scenario: scenario.label().to_string(),
        cell,
        framework: "ssl".to_string(),
        encoder: "resnet50".to_string(),
        augmentation: None,
        pretext_loss: None,
        main_loss: "iou".to_string(),
        pretext_fraction: None,
        label_budget: None,
        supervised_fraction: None,
        freeze_encoder: false,
        fold: 0,
    };
    match scenario {
        Scenario::S1PretextFractions => {
            for aug in SCENARIO_AUGMENTATIONS {
                for pl in PRETEXT_LOSSES {
                    for ml in MAIN_LOSSES {
                        for frac in PRETEXT_FRACTIONS {
                            let mut p =
                                proto(format!("s1/{aug}/{pl}/{ml}/frac{frac:.2}"));
                            p.augmentation = Some(aug.to_string());
                            p.pretext_loss = Some(pl.to_string());
                            p.main_loss = ml.to_string();
                            p.pretext_fraction = Some(frac);
                            p.label_budget = Some(SMALL_LABEL_BUDGET);
                            p.freeze_encoder = true;
                            cells.push(p);
                        }
                    }
                }
            }
        }
        Scenario::S2SmallLabels => {
            for aug in SCENARIO_AUGMENTATIONS {
                for pl in PRETEXT_LOSSES {
                    for ml in MAIN_LOSSES {
                        let mut p = proto(format!("s2/ssl/{aug}/{pl}/{ml}"));
                        p.augmentation = Some(aug.to_string());
                        p.pretext_loss = Some(pl.to_string());
                        p.main_loss = ml.to_string();
                        p.pretext_fraction = Some(1.0);
                        p.label_budget = Some(SMALL_LABEL_BUDGET);
                        p.freeze_encoder = true;
                        cells.push(p);
                    }
                }
            }
            for encoder in ["resnet50", "cnn"] {
                for ml in MAIN_LOSSES {
                    for freeze in [false, true] {
                        let tag = if freeze { "freeze" } else { "no-freeze" };
                        let mut p = proto(format!("s2/supervised/{encoder}/{ml}/{tag}"));
                        p.framework = "supervised".to_string();
                        p.encoder = encoder.to_string();
                        p.main_loss = ml.to_string();
                        p.label_budget = Some(SMALL_LABEL_BUDGET);
                        p.freeze_encoder = freeze;
                        cells.push(p);
                    }
                }
            }
        }
        Scenario::S3LabelBudgets => {
            for framework in ["ssl", "supervised"] {
                for budget in (200..=1000).step_by(100) {
                    let mut p = proto(format!("s3/{framework}/n{budget}"));
                    p.framework = framework.to_string();
                    p.label_budget = Some(budget);
                    if framework == "ssl" {
                        p.augmentation = Some("blur".to_string());
                        p.pretext_loss = Some("ssim-l1".to_string());
                        p.pretext_fraction = Some(1.0);
                        p.freeze_encoder = true;
                    }
                    cells.push(p);
                }
            }
        }
        Scenario::S4SupervisedFractions => {
            for i in 1..=10 {
                let frac = i as f64 / 10.0;
                let mut p = proto(format!("s4/supervised/frac{frac:.1}"));
                p.framework = "supervised".to_string();
                p.supervised_fraction = Some(frac);
                cells.push(p);
            }
        }
    }
    let mut plans = Vec::with_capacity(cells.len() * folds);
    for cell in cells {
        for fold in 0..folds {
            let mut p = cell.clone();
            p.fold = fold;
            plans.push(p);
        }
    }
    plans
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Tiny synthetic segmentation corpus: bright square on dark background.
    fn tiny_store(n: usize, size: usize) -> (CropStore, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut crops = Vec::new();
        for i in 0..n {
            let cx = rng.random_range(2..size - 4);
            let cy = rng.random_range(2..size - 4);
            let mut img = vec![0.1f32; size * size];
            let mut mask = vec![0u8; size * size];
            for y in cy..cy + 3 {
                for x in cx..cx + 3 {
                    img[y * size + x] = 0.9;
                    mask[y * size + x] = 1;
                }
            }
            for v in img.iter_mut() {
                *v += rng.random_range(-0.02f32..0.02);
            }
            crops.push(CropRecord {
                image: Image2D::new(size, size, img).unwrap(),
                mask: Mask2D::new(size, size, mask).unwrap(),
                source_id: "t".to_string(),
                slice_index: 0,
                window_x: i * 10,
                window_y: 0,
                rotation_deg: 0,
                object_fraction: 9.0 / (size * size) as f64,
            });
        }
        let store = crop_store(crops);
        let ids: Vec<String> = store.keys().cloned().collect();
        (store, ids)
    }

    fn tiny_arch() -> ArchitectureSpec {
        let mut a = ArchitectureSpec::new(EncoderKind::Resnet50, HeadKind::Segmentation);
        a.input_size = 16;
        a.base_channels = 2;
        a
    }

    fn quick_cfg(mut cfg: TrainConfig) -> TrainConfig {
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn config_validation_rejects_mismatches() {
        let (store, ids) = tiny_store(4, 16);
        let arch = tiny_arch();
        // Segmentation loss in pretext.
        let cfg = quick_cfg(TrainConfig::pretext("bce", "blur"));
        assert!(matches!(
            train_pretext(&store, &ids, &[], &arch, &cfg),
            Err(TrainError::ConfigMismatch(_))
        ));
        // Restoration loss in main.
        let cfg = quick_cfg(TrainConfig::main("ssim"));
        assert!(matches!(
            train_main(&store, &ids, &[], None, &arch, &cfg),
            Err(TrainError::ConfigMismatch(_))
        ));
        // Pretext without augmentation.
        let mut cfg = quick_cfg(TrainConfig::pretext("ssim", "blur"));
        cfg.augmentation = None;
        assert!(matches!(
            train_pretext(&store, &ids, &[], &arch, &cfg),
            Err(TrainError::ConfigMismatch(_))
        ));
        // Unknown crop id.
        let cfg = quick_cfg(TrainConfig::main("bce"));
        assert!(matches!(
            train_main(&store, &["nope".to_string()], &[], None, &arch, &cfg),
            Err(TrainError::UnknownCrop(_))
        ));
    }

    #[test]
    fn defaults_match_published_hyperparameters() {
        let cfg = TrainConfig::pretext("ssim-l1", "blur");
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.learning_rate, 0.003);
        assert_eq!(cfg.seed, 26);
    }

    #[test]
    fn pretext_run_is_deterministic_and_finite() {
        let (store, ids) = tiny_store(6, 16);
        let arch = tiny_arch();
        let cfg = quick_cfg(TrainConfig::pretext("ssim-l1", "pixel-drop:0.25"));
        let (train_ids, val_ids) = ids.split_at(4);
        let (b1, r1) = train_pretext(&store, train_ids, val_ids, &arch, &cfg).unwrap();
        let (b2, r2) = train_pretext(&store, train_ids, val_ids, &arch, &cfg).unwrap();
        assert_eq!(r1.train_losses.len(), cfg.epochs);
        assert_eq!(r1.val_losses.len(), cfg.epochs);
        assert!(r1
            .train_losses
            .iter()
            .chain(&r1.val_losses)
            .all(|l| l.is_finite()));
        assert_eq!(r1.train_losses, r2.train_losses);
        assert_eq!(r1.val_losses, r2.val_losses);
        assert_eq!(b1.tensors, b2.tensors);
        assert_eq!(b1.meta.task, TaskKind::Restoration);
    }

    #[test]
    fn ssl_main_keeps_frozen_encoder_bit_identical() {
        let (store, ids) = tiny_store(8, 16);
        let arch = tiny_arch();
        let pre_cfg = quick_cfg(TrainConfig::pretext("ssim", "blur"));
        let (ckpt, _) = train_pretext(&store, &ids[..5], &ids[5..6], &arch, &pre_cfg).unwrap();

        let mut main_cfg = quick_cfg(TrainConfig::main("bce"));
        main_cfg.freeze_encoder = true;
        let (seg, rec) =
            train_main(&store, &ids[..5], &ids[5..], Some(&ckpt), &arch, &main_cfg).unwrap();
        for (name, (shape, values)) in &ckpt.tensors {
            if !name.starts_with("enc.") {
                continue;
            }
            let (shape2, values2) = &seg.tensors[name];
            assert_eq!(shape, shape2);
            let a: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = values2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "frozen encoder tensor {name} drifted");
        }
        assert_eq!(rec.config.loss, "bce");
        assert!(!seg.meta.frozen_names.is_empty());
        // Decoder continued from pretext weights, then trained: must differ
        // both from the checkpoint and from a fresh random init.
        let moved = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("dec."))
            .any(|(n, (_, v))| &seg.tensors[n].1 != v);
        assert!(moved, "decoder did not train");
    }

    #[test]
    fn supervised_main_trains_and_records_losses() {
        let (store, ids) = tiny_store(6, 16);
        let arch = tiny_arch();
        let cfg = quick_cfg(TrainConfig::main("iou"));
        let (bundle, rec) = train_main(&store, &ids[..4], &ids[4..], None, &arch, &cfg).unwrap();
        assert_eq!(bundle.meta.task, TaskKind::Segmentation);
        assert!(rec.train_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert!(rec.best_epoch < cfg.epochs);
        assert_eq!(rec.val_losses[rec.best_epoch], rec
            .val_losses
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn epoch_batches_deterministic() {
        let ids: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
        let b1 = epoch_batches(&ids, 26, 0, 6);
        let b2 = epoch_batches(&ids, 26, 0, 6);
        assert_eq!(b1, b2);
        let b3 = epoch_batches(&ids, 26, 1, 6);
        assert_ne!(b1, b3);
        let sizes: Vec<usize> = b1.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![6, 6, 6, 2]);
    }

    #[test]
    fn run_config_round_trip_and_rejection() {
        let cfg = TrainConfig::main("dice");
        let bytes = serde_json::to_vec(&cfg).unwrap();
        assert_eq!(parse_run_config(&bytes).unwrap(), cfg);
        assert!(parse_run_config(b"{}").is_err());
        let mut bad = cfg.clone();
        bad.batch_size = 0;
        let bytes = serde_json::to_vec(&bad).unwrap();
        assert!(matches!(
            parse_run_config(&bytes),
            Err(TrainError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn scenario_grid_cardinalities() {
        assert_eq!(plan_scenario(Scenario::S1PretextFractions, 5).len(), 90 * 5);
        let s3 = plan_scenario(Scenario::S3LabelBudgets, 5);
        assert_eq!(
            s3.iter().filter(|p| p.framework == "ssl").count(),
            9 * 5
        );
        assert_eq!(
            s3.iter().filter(|p| p.framework == "supervised").count(),
            9 * 5
        );
        assert_eq!(plan_scenario(Scenario::S4SupervisedFractions, 5).len(), 10 * 5);
        let s2 = plan_scenario(Scenario::S2SmallLabels, 5);
        assert_eq!(s2.len(), (30 + 12) * 5);
        // Every budgeted plan in S1/S2 uses the minimal 114-label budget.
        assert!(plan_scenario(Scenario::S1PretextFractions, 5)
            .iter()
            .all(|p| p.label_budget == Some(114)));
    }

    #[test]
    fn scenario_parse_labels() {
        assert_eq!(Scenario::parse("2").unwrap(), Scenario::S2SmallLabels);
        assert_eq!(Scenario::parse("s4").unwrap().label(), "s4");
        assert!(Scenario::parse("5").is_err());
    }
}
