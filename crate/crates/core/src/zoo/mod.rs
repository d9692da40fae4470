//! Named architectures, model assembly and parameter accounting.
//!
//! Pipeline: patch embedding, Permutator blocks, then for two-stage models a
//! 2×2 downsampling embedding and more blocks, an optional final LayerNorm,
//! global average pooling and a linear classifier.

mod config;
mod gradcheck;

pub use config::{config, reference_params, registry, DropSchedule, StageConfig, ViPConfig, TINY};
pub use gradcheck::{gradcheck_model, LayerError, ModelGradcheck};

use rand::{RngCore, SeedableRng};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{global_pool_head, init_params, Bindings, LayerNorm, Linear, Mode, PatchEmbed, ParamStore};
use crate::permutator::PermutatorBlock;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<PermutatorBlock>,
}

/// Parameter handles of an assembled network. Precision independent.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ViPConfig,
    pub stages: Vec<Stage>,
    pub final_norm: Option<LayerNorm>,
    pub head: Linear,
}

impl Architecture {
    /// Registers every parameter of `config` in `store` (zero-filled).
    pub fn register<T: Scalar>(config: &ViPConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let rates = config.drop_rates();
        let mut block_index = 0;
        let mut in_channels = config.in_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (si, sc) in config.stages.iter().enumerate() {
            let embed = PatchEmbed::register(store, &format!("stage{si}.embed"), sc.patch_size, in_channels, sc.hidden_size)?;
            let mut blocks = Vec::with_capacity(sc.depth);
            for bi in 0..sc.depth {
                blocks.push(PermutatorBlock::register(
                    store,
                    &format!("stage{si}.blocks.{bi}"),
                    sc.hidden_size,
                    sc.num_tokens_side,
                    config.mlp_ratio,
                    config.mixer,
                    rates[block_index],
                )?);
                block_index += 1;
            }
            stages.push(Stage { embed, blocks });
            in_channels = sc.hidden_size;
        }
        let final_norm = if config.final_layernorm {
            Some(LayerNorm::register(store, "norm", in_channels)?)
        } else {
            None
        };
        let head = Linear::register(store, "head", in_channels, config.num_classes)?;
        Ok(Self {
            config: config.clone(),
            stages,
            final_norm,
            head,
        })
    }

    /// Expected input shape for a batch of `batch` images.
    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.image_size;
        [batch, s, s, self.config.in_channels]
    }

    /// `[B, H, W, 3]` images to `[B, K]` logits.
    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, images: &Var<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Var<T>> {
        let batch = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 || images.shape() != self.input_shape(batch) || batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: images.shape().to_vec(),
                rhs: self.input_shape(batch.max(1)).to_vec(),
            });
        }
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.embed.forward(params, &x)?;
            for block in &stage.blocks {
                x = block.forward(params, &x, mode, rng)?;
            }
        }
        global_pool_head(params, &x, self.final_norm.as_ref(), &self.head)
    }
}

/// Closed-form total parameter count.
pub fn count_params(config: &ViPConfig) -> usize {
    param_groups(config).iter().map(|(_, n)| n).sum()
}

/// Parameter counts per stage (embedding plus blocks) and for the head
/// (final norm plus classifier). Sums to [`count_params`].
pub fn param_groups(config: &ViPConfig) -> Vec<(String, usize)> {
    let mut groups = Vec::new();
    let mut in_channels = config.in_channels;
    for (i, s) in config.stages.iter().enumerate() {
        let embed = PatchEmbed::param_count(s.patch_size, in_channels, s.hidden_size);
        let blocks = s.depth * PermutatorBlock::param_count(s.hidden_size, config.mlp_ratio, config.mixer);
        groups.push((format!("stage{i}"), embed + blocks));
        in_channels = s.hidden_size;
    }
    let norm = if config.final_layernorm { LayerNorm::param_count(in_channels) } else { 0 };
    groups.push(("head".into(), norm + Linear::param_count(in_channels, config.num_classes)));
    groups
}

/// An architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Registers and initializes all parameters from `rng`.
    pub fn build(config: &ViPConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Architecture::register(config, &mut store)?;
        init_params(&mut store, rng);
        Ok(Self { arch, store })
    }

    /// Zero-filled parameters, e.g. as a checkpoint load target.
    pub fn empty(config: &ViPConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Architecture::register(config, &mut store)?;
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ViPConfig {
        &self.arch.config
    }

    pub fn num_params(&self) -> usize {
        self.store.total_params()
    }

    /// Untracked evaluation-mode logits.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        // Evaluation draws no randomness.
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let params = self.store.bind(None);
        let out = self.arch.forward(&params, &Var::constant(images.clone()), Mode::Eval, &mut unused)?;
        Ok(out.into_tensor())
    }

    /// Actual per-group totals of the built store, using the naming scheme.
    pub fn measured_groups(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, name, entry) in self.store.iter() {
            let group = match name.split('.').next() {
                Some(g) if g.starts_with("stage") => g.to_string(),
                _ => "head".to_string(),
            };
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += entry.tensor().numel(),
                None => groups.push((group, entry.tensor().numel())),
            }
        }
        groups
    }
}
