//! Patch-based training loop with a three-phase learning-rate schedule,
//! epoch logging, checkpoints and sliding-window evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::{
    read_nifti, DatasetError, DatasetIndex, LabelMask, NiftiError, Phase, Split, Volume,
};
use crate::metrics::{
    aggregate_report, evaluate_volume, Aggregation, MetricRow, MetricsError, MetricsReport,
};
use crate::numfmt::sig6;
use crate::preprocess::{
    canonicalize, clean_mask, extract_patches, validate_patch, Connectivity, CropWindow,
    PreprocessError, CANONICAL_SHAPE,
};
use crate::tensor::{
    adam_step, dice_loss, sigmoid, sigmoid_backward, AdamConfig, AdamState, DiceLoss, Parameter,
    Tensor, TensorError,
};
use crate::unet::{
    save_checkpoint, sliding_window_infer, UNet, UNetConfig, UNetError, DEFAULT_STRIDE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0:?} split is empty")]
    EmptySplit(Split),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (lr {lr})")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        lr: f64,
    },
    #[error("{path}: {source}")]
    Nifti { path: PathBuf, source: NiftiError },
    #[error("{subject} {phase}: {source}")]
    Preprocess {
        subject: String,
        phase: Phase,
        source: PreprocessError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] UNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Learning rates of the three phases and where the first two end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub phase1: f64,
    pub phase2: f64,
    /// Rate reached at the last epoch by geometric decay from `phase2`.
    #[serde(rename = "final")]
    pub final_lr: f64,
    /// Last epoch (1-based) at `phase1`.
    pub phase1_end: usize,
    /// Last epoch at `phase2`; decay starts on the next one.
    pub phase2_end: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            phase1: 0.005,
            phase2: 0.001,
            final_lr: 0.0004457,
            phase1_end: 40,
            phase2_end: 60,
        }
    }
}

/// Piecewise learning rate over `epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr: LrConfig,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn new(lr: LrConfig, epochs: usize) -> Result<Self> {
        let rates = [lr.phase1, lr.phase2, lr.final_lr];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(TrainError::Config(format!(
                "learning rates must be positive, got {rates:?}"
            )));
        }
        if lr.phase1_end > lr.phase2_end {
            return Err(TrainError::Config(
                "phase1_end must not exceed phase2_end".into(),
            ));
        }
        if epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        Ok(Self { lr, epochs })
    }

    /// Rate for a 1-based epoch. After `phase2_end` the rate decays by a
    /// constant factor per epoch so that the last epoch uses `final`.
    pub fn at(&self, epoch: usize) -> Result<f64> {
        let l = &self.lr;
        if epoch == 0 || epoch > self.epochs {
            return Err(TrainError::Config(format!(
                "epoch {epoch} outside 1..={}",
                self.epochs
            )));
        }
        Ok(if epoch <= l.phase1_end {
            l.phase1
        } else if epoch <= l.phase2_end {
            l.phase2
        } else {
            let span = (self.epochs - l.phase2_end) as f64;
            let ratio = (l.final_lr / l.phase2).powf(1.0 / span);
            l.phase2 * ratio.powi((epoch - l.phase2_end) as i32)
        })
    }
}

/// Rate at `epoch` for the default 100-epoch schedule.
pub fn lr_schedule(epoch: usize) -> Result<f64> {
    LrSchedule::new(LrConfig::default(), 100)?.at(epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// `(x, y, z)` patch extent.
    pub patch: [usize; 3],
    pub patches_per_volume: usize,
    pub seed: u64,
    pub lr: LrConfig,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Train and score against masks with papillary muscles relabeled.
    pub clean_masks: bool,
    /// Run validation every this many epochs and always after the last.
    pub validate_every: usize,
    /// Sliding-window step in `(x, y, z)`.
    pub stride: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_channels: 16,
            levels: 3,
            patch: [64, 64, 4],
            patches_per_volume: 8,
            seed: 0,
            lr: LrConfig::default(),
            checkpoint_every: 0,
            clean_masks: true,
            validate_every: 1,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patches_per_volume == 0 || self.validate_every == 0 {
            return Err(TrainError::Config(
                "batch_size, patches_per_volume and validate_every must be >= 1".into(),
            ));
        }
        validate_patch(self.patch).map_err(|e| TrainError::Config(e.to_string()))?;
        LrSchedule::new(self.lr, self.epochs)?;
        self.unet_config().validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.epochs)
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.base_channels,
            levels: self.levels,
            patch_shape: self.patch,
            seed: self.seed,
            ..UNetConfig::default()
        }
    }
}

/// One labelled volume prepared for training or scoring.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    pub subject: String,
    pub phase: Phase,
    /// Normalized image on the canonical grid.
    pub image: Volume,
    /// Target mask on the canonical grid.
    pub mask: LabelMask,
    /// Target mask on the original grid, the reference for scoring.
    pub truth: LabelMask,
    pub window: CropWindow,
}

impl PreparedVolume {
    pub fn new(
        subject: &str,
        phase: Phase,
        image: &Volume,
        mask: &LabelMask,
        clean: bool,
    ) -> Result<Self> {
        let truth = if clean {
            clean_mask(mask, Connectivity::Slice8)
        } else {
            mask.clone()
        };
        let wrap = |source| TrainError::Preprocess {
            subject: subject.to_string(),
            phase,
            source,
        };
        let canon = canonicalize(image, Some(&truth), CANONICAL_SHAPE).map_err(wrap)?;
        Ok(Self {
            subject: subject.to_string(),
            phase,
            image: canon.image,
            mask: canon.mask.expect("mask was supplied"),
            truth,
            window: canon.window,
        })
    }
}

fn read_pair(root: &Path, image: &Path, mask: &Path) -> Result<(Volume, LabelMask)> {
    let read = |rel: &Path| {
        let path = root.join(rel);
        read_nifti(&path).map_err(|source| TrainError::Nifti {
            path: path.clone(),
            source,
        })
    };
    let img = read(image)?.into_volume();
    let mpath = root.join(mask);
    let m = read(mask)?
        .into_label_mask()
        .map_err(|source| TrainError::Nifti {
            path: mpath,
            source,
        })?;
    Ok((img, m))
}

/// Loads and prepares every entry of `split`; paths resolve against `root`.
pub fn load_split(
    index: &DatasetIndex,
    root: &Path,
    split: Split,
    clean: bool,
) -> Result<Vec<PreparedVolume>> {
    index
        .in_split(split)
        .map(|e| {
            let (img, mask) = read_pair(root, &e.image, &e.mask)?;
            PreparedVolume::new(&e.subject, e.phase, &img, &mask, clean)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean soft foreground Dice over the epoch's batches.
    pub train_dice: f64,
    pub train_loss: f64,
    /// Validation figures, present on epochs that ran validation.
    pub val: Option<ValidationScores>,
}

/// Mean foreground metrics over every validation volume and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScores {
    pub dice: f64,
    pub loss: f64,
    pub f1: f64,
    pub iou_percent: f64,
}

impl ValidationScores {
    pub fn from_rows(rows: &[MetricRow]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(Self {
            dice: mean(|r| r.dice),
            loss: mean(|r| r.dice_loss),
            f1: mean(|r| r.f1),
            iou_percent: mean(|r| r.iou_percent),
        })
    }
}

pub const EPOCH_LOG_HEADER: [&str; 8] = [
    "epoch",
    "lr",
    "train_dice",
    "train_loss",
    "val_dice",
    "val_loss",
    "val_f1",
    "val_iou",
];

/// Writes one row per epoch; validation columns are empty when skipped.
pub fn write_epoch_log(log: &[EpochLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| TrainError::Io(e.into());
    w.write_record(EPOCH_LOG_HEADER).map_err(csv_err)?;
    for e in log {
        let val = e.val.map_or(
            [String::new(), String::new(), String::new(), String::new()],
            |v| [sig6(v.dice), sig6(v.loss), sig6(v.f1), sig6(v.iou_percent)],
        );
        let mut rec = vec![
            e.epoch.to_string(),
            sig6(e.lr),
            sig6(e.train_dice),
            sig6(e.train_loss),
        ];
        rec.extend(val);
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: UNet,
    pub optimizer: Vec<AdamState>,
    pub log: Vec<EpochLog>,
}

pub type EpochCallback<'a> = Box<dyn FnMut(&EpochLog) + 'a>;

/// Knobs that do not affect the learned parameters.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `epochNNN.csg` checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after every epoch.
    pub on_epoch: Option<EpochCallback<'a>>,
}

/// Every class channel is scored so the background logit is trained too;
/// the argmax decode compares all channels.
fn training_loss() -> DiceLoss {
    DiceLoss::new(vec![0, 1, 2])
}

/// Optimizes `model` on `train` and scores `val` by sliding-window
/// inference on validation epochs. Validation never influences the
/// parameters.
pub fn train(
    mut model: UNet,
    train: &[PreparedVolume],
    val: &[PreparedVolume],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if model.config().patch_shape != cfg.patch {
        return Err(TrainError::Config(format!(
            "model patch {:?} differs from training patch {:?}",
            model.config().patch_shape,
            cfg.patch
        )));
    }
    let schedule = cfg.schedule()?;
    let loss_cfg = training_loss();
    let mut optimizer: Vec<AdamState> = model
        .parameters()
        .iter()
        .map(|p| AdamState::new(p, AdamConfig::default()))
        .collect();
    // patch sampling has its own stream, independent of initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = schedule.at(epoch)?;
        let mut samples = Vec::with_capacity(train.len() * cfg.patches_per_volume);
        for v in train {
            let seed = rng.random::<u64>();
            let patches =
                extract_patches(&v.image, &v.mask, cfg.patch, cfg.patches_per_volume, seed)
                    .map_err(|source| TrainError::Preprocess {
                        subject: v.subject.clone(),
                        phase: v.phase,
                        source,
                    })?;
            samples.extend(patches);
        }
        samples.shuffle(&mut rng);

        let (mut dice_sum, mut loss_sum) = (0.0, 0.0);
        for (step, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
            let labels: Vec<&Tensor> = batch.iter().map(|s| &s.label).collect();
            let x = Tensor::stack_batch(&images)?;
            let y = Tensor::stack_batch(&labels)?;

            model.zero_grad();
            let (logits, tape) = model.forward_train(&x)?;
            let probs = sigmoid(&logits);
            let out = dice_loss(&probs, &y, &loss_cfg)?;
            if !out.loss.is_finite() || !logits.all_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step: step + 1,
                    loss: out.loss,
                    lr,
                });
            }
            let grad = sigmoid_backward(&out.grad, &probs)?;
            model.backward(tape, &grad)?;
            let mut params: Vec<&mut Parameter> = model.parameters_mut().iter_mut().collect();
            adam_step(&mut params, &mut optimizer, lr)?;

            let n = batch.len() as f64;
            // per_class follows loss_cfg.classes; 1 and 2 are the foreground
            dice_sum += n * (out.per_class[1] + out.per_class[2]) / 2.0;
            loss_sum += n * out.loss;
        }
        let count = samples.len() as f64;

        let validate = !val.is_empty() && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
        let val_scores = if validate {
            ValidationScores::from_rows(&score_volumes(&model, val, cfg.stride, cfg.clean_masks)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_dice: dice_sum / count,
            train_loss: loss_sum / count,
            val: val_scores,
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&entry);
        }
        log.push(entry);

        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(&model, &optimizer, dir.join(format!("epoch{epoch:03}.csg")))?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
    })
}

/// Whole-volume prediction on the volume's original grid. With `clean`, the
/// prediction gets the same papillary relabeling as the targets.
pub fn predict_volume(
    model: &UNet,
    v: &PreparedVolume,
    stride: [usize; 3],
    clean: bool,
) -> Result<LabelMask> {
    let canonical = sliding_window_infer(model, &v.image, stride)?;
    let pred = LabelMask::new(v.truth.header, v.window.uncrop(&canonical.labels));
    Ok(if clean {
        clean_mask(&pred, Connectivity::Slice8)
    } else {
        pred
    })
}

fn score_volumes(
    model: &UNet,
    volumes: &[PreparedVolume],
    stride: [usize; 3],
    clean: bool,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(2 * volumes.len());
    for v in volumes {
        let pred = predict_volume(model, v, stride, clean)?;
        rows.extend(evaluate_volume(&v.subject, v.phase, &pred, &v.truth)?);
    }
    Ok(rows)
}

/// Scores `volumes` with per-volume rows and ED/ES aggregates.
pub fn evaluate(
    model: &UNet,
    volumes: &[PreparedVolume],
    stride: [usize; 3],
    clean: bool,
    mode: Aggregation,
) -> Result<MetricsReport> {
    Ok(aggregate_report(
        score_volumes(model, volumes, stride, clean)?,
        mode,
    )?)
}
