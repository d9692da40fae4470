//! Desk-scale training: AdamW with linear lr scaling, warmup plus cosine
//! schedule, soft-label cross-entropy, CutOut / MixUp / CutMix, datasets and
//! checkpoints.

pub mod augment;
pub mod checkpoint;
mod config;
pub mod data;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Progress};
pub use config::{AugmentConfig, DataSource, ScheduleKind, TrainConfig};
pub use data::{synth_dataset, Dataset, SynthSpec};
pub use loss::{argmax, correct, one_hot, soft_cross_entropy};
pub use optim::{adamw_step, constant_schedule, lr_for, lr_for_with, schedule, AdamW, OptimizerState, COSINE_FLOOR};

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::zoo::Model;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// `"train"` or `"val"`.
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Records of every completed epoch, including ones before a resume.
    pub history: Vec<MetricRecord>,
    /// Loss of the very first optimization step of this invocation.
    pub initial_loss: Option<f64>,
    /// Per-step training losses of this invocation.
    pub step_losses: Vec<f64>,
    pub best_top1: f64,
    pub final_top1: f64,
    pub epochs_completed: usize,
    pub num_params: usize,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Loads or generates the splits named by `cfg.data`.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => synth_dataset(spec),
        DataSource::Files { train, val } => {
            let (t, v) = (Dataset::load(train)?, Dataset::load(val)?);
            if (t.side(), t.channels(), t.classes) != (v.side(), v.channels(), v.classes) {
                return Err(Error::Dataset("train and val files disagree on side, channels or classes".into()));
            }
            Ok((t, v))
        }
    }
}

/// Mean hard-label cross-entropy and top-1 in evaluation mode.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.gather(chunk);
        let logits = model.predict(&images)?;
        let l = soft_cross_entropy(&Var::constant(logits.clone()), &one_hot(&labels, data.classes))?;
        loss += l.value().data()[0] as f64 * chunk.len() as f64;
        hits += correct(&logits, &labels);
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Observer for progress lines; the CLI prints these to stderr.
pub type ProgressFn<'a> = &'a mut dyn FnMut(&MetricRecord);

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn augment_batch(
    cfg: &AugmentConfig,
    images: Tensor<f32>,
    targets: Tensor<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images = if cfg.cutout && cfg.cutout_size > 0 {
        augment::cutout(&images, cfg.cutout_size, cfg.cutout_mean_fill, rng)?
    } else {
        images
    };
    if !cfg.any_mixing() || rng.random::<f64>() >= cfg.mix_prob {
        return Ok((images, targets));
    }
    // Partner batch is the batch in reverse order.
    let n = images.shape()[0];
    let rev: Vec<usize> = (0..n).rev().collect();
    let flip = |t: &Tensor<f32>| -> Tensor<f32> {
        let per = t.numel() / n.max(1);
        let data = rev.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    let (pb, pt) = (flip(&images), flip(&targets));
    let use_cutmix = cfg.cutmix && (!cfg.mixup || rng.random::<f64>() < cfg.switch_prob);
    let mixed = if use_cutmix {
        augment::cutmix(&images, &targets, &pb, &pt, cfg.cutmix_alpha, rng)?
    } else {
        augment::mixup(&images, &targets, &pb, &pt, cfg.mixup_alpha, rng)?
    };
    Ok((mixed.images, mixed.targets))
}

struct StepResult {
    loss: f64,
    hits: usize,
    grads: Vec<Option<Tensor<f32>>>,
}

fn forward_backward(model: &Model<f32>, images: Tensor<f32>, targets: &Tensor<f32>, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<StepResult> {
    let tape = Tape::new();
    let params = model.store.bind(Some(&tape));
    let logits = model.arch.forward(&params, &Var::constant(images), Mode::Train, rng)?;
    let hits = correct(logits.value(), labels);
    let loss = soft_cross_entropy(&logits, targets)?;
    let value = loss.value().data()[0] as f64;
    if !value.is_finite() {
        return Ok(StepResult { loss: value, hits, grads: Vec::new() });
    }
    loss.backward()?;
    let grads = params.vars().iter().map(|v| v.grad()).collect();
    Ok(StepResult { loss: value, hits, grads })
}

fn read_history(path: &Path, through_epoch: usize) -> Result<Vec<MetricRecord>> {
    let Ok(file) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line)?;
        if rec.epoch <= through_epoch {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Runs (or with `resume`, continues from `last.ckpt`) the configured
/// training. Every epoch appends train and val records to `metrics.jsonl`,
/// refreshes `last.ckpt`, and writes `best.ckpt` when validation top-1 improves.
pub fn train_loop(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    resume: bool,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    let model_cfg = cfg.model_config(train.classes)?;
    if model_cfg.image_size != train.side() || model_cfg.in_channels != train.channels() {
        return Err(Error::Config(format!(
            "model expects {0}x{0}x{1} images, dataset has {2}x{2}x{3}",
            model_cfg.image_size,
            model_cfg.in_channels,
            train.side(),
            train.channels()
        )));
    }
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);

    let mut model = Model::<f32>::build(&model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut state = OptimizerState::new(&model.store);
    let mut done = Progress { epoch: 0, best_top1: -1.0 };
    if resume && last_path.exists() {
        let (s, p) = checkpoint::load_training_checkpoint(&last_path, &mut model.store)?;
        state = s;
        done = p;
    }
    let mut history = if done.epoch > 0 { read_history(&metrics_path, done.epoch)? } else { Vec::new() };
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    for rec in &history {
        writeln!(metrics, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let opt = AdamW {
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup();
    let peak = cfg.peak_lr();
    let classes = train.classes;

    let mut step_losses = Vec::new();
    let mut final_top1 = history.iter().rev().find(|r| r.split == "val").map_or(0.0, |r| r.top1);
    let mut best = done.best_top1 as f32;
    for epoch in done.epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for (i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let global = epoch * steps_per_epoch + i;
            let lr = match cfg.schedule {
                ScheduleKind::Cosine => schedule(global, total_steps, warmup_steps, peak),
                ScheduleKind::Constant => constant_schedule(global, warmup_steps, peak),
            };
            let (images, labels) = train.gather(chunk);
            let (images, targets) = augment_batch(&cfg.augment, images, one_hot(&labels, classes), &mut rng)?;
            let step = forward_backward(&model, images, &targets, &labels, &mut rng)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: step.loss,
                    epoch: epoch + 1,
                    step: i,
                });
            }
            adamw_step(&mut model.store, &mut state, &step.grads, lr, &opt)?;
            step_losses.push(step.loss);
            loss_sum += step.loss * chunk.len() as f64;
            hits += step.hits;
        }
        let n = train.len() as f64;
        let (val_loss, val_top1) = evaluate(&model, val, cfg.batch_size.max(64))?;
        let records = [
            MetricRecord {
                epoch: epoch + 1,
                split: "train".into(),
                loss: loss_sum / n,
                top1: hits as f64 / n,
            },
            MetricRecord {
                epoch: epoch + 1,
                split: "val".into(),
                loss: val_loss,
                top1: val_top1,
            },
        ];
        for rec in records {
            writeln!(metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&metrics_path, e))?;
            if let Some(p) = progress.as_mut() {
                p(&rec);
            }
            history.push(rec);
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        final_top1 = val_top1;
        if (val_top1 as f32) > best {
            best = val_top1 as f32;
            save_checkpoint(&best_path, &model.store)?;
        }
        done = Progress {
            epoch: epoch + 1,
            best_top1: best as f64,
        };
        checkpoint::save_training_checkpoint(&last_path, &model.store, &state, done)?;
        if cfg.stop_at_top1.is_some_and(|t| val_top1 >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        initial_loss: step_losses.first().copied(),
        step_losses,
        best_top1: best.max(0.0) as f64,
        final_top1,
        epochs_completed: done.epoch,
        num_params: model.num_params(),
        metrics_path,
        best_checkpoint: best_path,
    })
}
