use super::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Affine map `y = x·W + b` over the last axis. `W` is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let weight = store.register(format!("{prefix}.weight"), &[in_features, out_features], ParamKind::Weight)?;
        let bias = store.register(format!("{prefix}.bias"), &[out_features], ParamKind::Bias)?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }

    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().last() != Some(&self.in_features) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_features, self.out_features],
            });
        }
        x.matmul(params.get(self.weight))?.add(params.get(self.bias))
    }
}

/// LayerNorm over the channel (last) axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{prefix}.gamma"), &[dim], ParamKind::NormScale)?;
        let beta = store.register(format!("{prefix}.beta"), &[dim], ParamKind::NormShift)?;
        Ok(Self {
            gamma,
            beta,
            dim,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(params.get(self.gamma), params.get(self.beta), self.eps)
    }
}

/// Non-overlapping `p×p` patches, each flattened row-major over
/// `(row, col, channel)` and projected by one shared linear layer.
///
/// Serves as the image stem (`in_channels = 3`) and as the 2×2 downsampling
/// embedding between stages. No positional encoding is added.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_channels: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        patch: usize,
        in_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let proj = Linear::register(store, &format!("{prefix}.proj"), patch * patch * in_channels, hidden)?;
        Ok(Self {
            patch,
            in_channels,
            proj,
        })
    }

    pub fn param_count(patch: usize, in_channels: usize, hidden: usize) -> usize {
        Linear::param_count(patch * patch * in_channels, hidden)
    }

    /// `[B, H, W, C_in] -> [B, H/p, W/p, hidden]`.
    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        let &[b, h, w, c] = x.shape() else {
            return Err(Error::InvalidArgument(format!(
                "patch embedding expects [B, H, W, C], got {:?}",
                x.shape()
            )));
        };
        let p = self.patch;
        if h % p != 0 || w % p != 0 || c != self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "input {:?} is not divisible into {p}x{p}x{} patches",
                x.shape(),
                self.in_channels
            )));
        }
        let patches = x
            .reshape([b, h / p, p, w / p, p, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape([b, h / p, w / p, p * p * c])?;
        self.proj.forward(params, &patches)
    }
}

/// Optional final LayerNorm, mean over the token grid, then the classifier.
pub fn global_pool_head<T: Scalar>(
    params: &Bindings<T>,
    grid: &Var<T>,
    final_norm: Option<&LayerNorm>,
    classifier: &Linear,
) -> Result<Var<T>> {
    let rank = grid.shape().len();
    if rank < 3 {
        return Err(Error::InvalidArgument(format!("head expects a token grid, got {:?}", grid.shape())));
    }
    let normed = match final_norm {
        Some(n) => n.forward(params, grid)?,
        None => grid.clone(),
    };
    let pooled = normed.mean(&[rank - 3, rank - 2], false)?;
    classifier.forward(params, &pooled)
}
