use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SynthSpec;
use crate::error::{Error, Result};
use crate::zoo::{self, ViPConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup then cosine decay to 1% of the peak.
    #[default]
    Cosine,
    /// Linear warmup then a flat peak.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// Two files in the raw `VIPDATA1` format.
    Files { train: PathBuf, val: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub cutout: bool,
    /// Side of the erased square, in pixels.
    pub cutout_size: usize,
    /// Fill erased pixels with the image mean instead of zero.
    pub cutout_mean_fill: bool,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub cutmix: bool,
    pub cutmix_alpha: f64,
    /// Probability that a batch is mixed at all.
    pub mix_prob: f64,
    /// With both mixers enabled, probability of choosing CutMix.
    pub switch_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cutout: false,
            cutout_size: 8,
            cutout_mean_fill: false,
            mixup: false,
            mixup_alpha: 0.8,
            cutmix: false,
            cutmix_alpha: 1.0,
            mix_prob: 1.0,
            switch_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn any_mixing(&self) -> bool {
        self.mixup || self.cutmix
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Registry name. `num_classes` is taken from the dataset.
    pub model: String,
    /// Full architecture; overrides `model` when present.
    pub model_config: Option<ViPConfig>,
    pub batch_size: usize,
    /// Peak learning rate is `base_lr · batch_size / lr_reference_batch`.
    pub base_lr: f64,
    pub lr_reference_batch: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    /// Defaults to `ceil(epochs / 60)`, i.e. 5 of 300.
    pub warmup_epochs: Option<usize>,
    pub schedule: ScheduleKind,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub data: DataSource,
    /// Receives `metrics.jsonl`, `best.ckpt` and `last.ckpt`.
    pub output_dir: PathBuf,
    /// Stop once validation top-1 reaches this value.
    pub stop_at_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: zoo::TINY.into(),
            model_config: None,
            batch_size: 64,
            base_lr: 1e-3,
            lr_reference_batch: 1024,
            weight_decay: 5e-2,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            epochs: 30,
            warmup_epochs: None,
            schedule: ScheduleKind::Cosine,
            augment: AugmentConfig::default(),
            seed: 0,
            data: DataSource::default(),
            output_dir: PathBuf::from("runs/default"),
            stop_at_top1: None,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs.div_ceil(60))
    }

    pub fn peak_lr(&self) -> f64 {
        super::lr_for_with(self.batch_size, self.base_lr, self.lr_reference_batch as f64)
    }

    /// Architecture for a dataset with `num_classes` labels.
    pub fn model_config(&self, num_classes: usize) -> Result<ViPConfig> {
        let cfg = match &self.model_config {
            Some(c) => c.clone(),
            None => zoo::config(&self.model)?,
        };
        let cfg = cfg.with_num_classes(num_classes);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.lr_reference_batch == 0 || !(self.base_lr > 0.0) {
            return fail("base_lr and lr_reference_batch must be positive".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.warmup() > self.epochs {
            return fail(format!("warmup_epochs {} exceeds epochs {}", self.warmup(), self.epochs));
        }
        let a = &self.augment;
        for (name, p) in [("mix_prob", a.mix_prob), ("switch_prob", a.switch_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("augment.{name} = {p} is not a probability"));
            }
        }
        if (a.mixup && !(a.mixup_alpha > 0.0)) || (a.cutmix && !(a.cutmix_alpha > 0.0)) {
            return fail("mixing alphas must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        if let Some(t) = self.stop_at_top1 {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("stop_at_top1 {t} is not a fraction"));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// Parses JSON. Parse errors carry line, column and the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
