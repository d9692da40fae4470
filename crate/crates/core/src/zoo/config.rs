use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::permutator::{MixerKind, SPLIT_ATTENTION_REDUCTION};

/// One resolution stage: an embedding followed by `depth` Permutator blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Image patch size for the first stage, downsampling factor afterwards.
    pub patch_size: usize,
    pub hidden_size: usize,
    pub num_tokens_side: usize,
    pub depth: usize,
}

impl StageConfig {
    pub fn new(patch_size: usize, hidden_size: usize, num_tokens_side: usize, depth: usize) -> Self {
        Self {
            patch_size,
            hidden_size,
            num_tokens_side,
            depth,
        }
    }

    /// `S = C / N` with `N` the token side.
    pub fn segments(&self) -> usize {
        self.hidden_size / self.num_tokens_side
    }
}

/// How per-block stochastic-depth rates are spread over the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropSchedule {
    /// `max · i / (D − 1)` for block `i` of `D`.
    #[default]
    Linear,
    /// Every block uses `max`.
    Constant,
}

fn default_mlp_ratio() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViPConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub stochastic_depth_max: f64,
    #[serde(default)]
    pub drop_schedule: DropSchedule,
    #[serde(default = "default_true")]
    pub final_layernorm: bool,
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub mixer: MixerKind,
}

pub const TINY: &str = "ViP-Tiny";

impl ViPConfig {
    fn imagenet(name: &str, stages: Vec<StageConfig>, sd: f64) -> Self {
        Self {
            name: name.into(),
            stages,
            num_classes: 1000,
            mlp_ratio: 3,
            stochastic_depth_max: sd,
            drop_schedule: DropSchedule::Linear,
            final_layernorm: true,
            image_size: 224,
            in_channels: 3,
            mixer: MixerKind::Weighted,
        }
    }

    /// Desk-scale model: 32×32 images, 4×4 patches, one stage of four 64-wide blocks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            name: TINY.into(),
            stages: vec![StageConfig::new(4, 64, 8, 4)],
            num_classes,
            mlp_ratio: 3,
            stochastic_depth_max: 0.0,
            drop_schedule: DropSchedule::Linear,
            final_layernorm: true,
            image_size: 32,
            in_channels: 3,
            mixer: MixerKind::Weighted,
        }
    }

    pub fn with_mixer(mut self, mixer: MixerKind) -> Self {
        self.mixer = mixer;
        self
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn total_depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Per-block stochastic-depth rates across the whole network.
    pub fn drop_rates(&self) -> Vec<f64> {
        let d = self.total_depth();
        (0..d)
            .map(|i| match self.drop_schedule {
                DropSchedule::Constant => self.stochastic_depth_max,
                DropSchedule::Linear if d > 1 => self.stochastic_depth_max * i as f64 / (d - 1) as f64,
                DropSchedule::Linear => 0.0,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return fail("num_classes, mlp_ratio and in_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_max) {
            return fail(format!("stochastic_depth_max {} outside [0, 1)", self.stochastic_depth_max));
        }
        let mut side = self.image_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                return fail(format!("stage {i} has depth 0"));
            }
            if s.patch_size == 0 || side % s.patch_size != 0 {
                return fail(format!("stage {i}: side {side} not divisible by patch {}", s.patch_size));
            }
            side /= s.patch_size;
            if side != s.num_tokens_side {
                return fail(format!(
                    "stage {i}: patch {} yields a {side}x{side} grid, config says {}",
                    s.patch_size, s.num_tokens_side
                ));
            }
            if s.hidden_size % s.num_tokens_side != 0 {
                return fail(format!(
                    "stage {i}: hidden size {} not divisible by token side {}",
                    s.hidden_size, s.num_tokens_side
                ));
            }
            if self.mixer.uses_split_attention() && s.hidden_size % SPLIT_ATTENTION_REDUCTION != 0 {
                return fail(format!(
                    "stage {i}: hidden size {} not divisible by the split-attention reduction {SPLIT_ATTENTION_REDUCTION}",
                    s.hidden_size
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every named configuration, in ascending size order.
pub fn registry() -> IndexMap<String, ViPConfig> {
    let s = StageConfig::new;
    [
        ViPConfig::imagenet("ViP-Small/16", vec![s(16, 336, 14, 18)], 0.1),
        ViPConfig::imagenet("ViP-Small/14", vec![s(14, 384, 16, 18)], 0.1),
        ViPConfig::imagenet("ViP-Small/7", vec![s(7, 192, 32, 4), s(2, 384, 16, 14)], 0.1),
        ViPConfig::imagenet("ViP-Medium/7", vec![s(7, 256, 32, 7), s(2, 512, 16, 17)], 0.2),
        ViPConfig::imagenet("ViP-Large/7", vec![s(7, 256, 32, 9), s(2, 512, 16, 27)], 0.3),
        ViPConfig::tiny(10),
    ]
    .into_iter()
    .map(|c| (c.name.clone(), c))
    .collect()
}

pub fn config(name: &str) -> Result<ViPConfig> {
    registry().swap_remove(name).ok_or_else(|| Error::UnknownModel(name.into()))
}

/// Published parameter count of a named ImageNet configuration.
pub fn reference_params(name: &str) -> Option<usize> {
    Some(match name {
        "ViP-Small/16" => 23_000_000,
        "ViP-Small/14" => 30_000_000,
        "ViP-Small/7" => 25_000_000,
        "ViP-Medium/7" => 55_000_000,
        "ViP-Large/7" => 88_000_000,
        _ => return None,
    })
}
