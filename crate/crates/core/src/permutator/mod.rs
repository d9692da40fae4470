//! Permute-MLP and the Permutator block.
//!
//! Token grids are `[B, H, W, C]` (a rank-3 `[H, W, C]` grid is accepted and
//! treated as a batch of one). The channel axis is split into `S` segments of
//! width `N = C / S`, and `N` must equal the grid side so that regrouping one
//! spatial axis with the segment axis yields exactly `C` features:
//!
//! ```text
//! height: [B,H,W,N,S] -> permute(0,3,2,1,4) -> [B,N,W,H·S] -> Linear(C,C) -> inverse
//! width:  [B,H,W,N,S] -> permute(0,1,3,2,4) -> [B,H,N,W·S] -> Linear(C,C) -> inverse
//! ```
//!
//! Both permutations are their own inverse.

pub mod oracle;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{stochastic_depth, Bindings, LayerNorm, Linear, Mode, ParamStore};
use crate::tensor::Scalar;

/// Bottleneck reduction of the split-attention squeeze.
pub const SPLIT_ATTENTION_REDUCTION: usize = 4;

/// Number of fused branches, in attention order: height, width, channel.
pub const NUM_BRANCHES: usize = 3;

/// Validated extents of a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [height, width, channels] => Ok(Self { batch: 1, height, width, channels }),
            [batch, height, width, channels] => Ok(Self { batch, height, width, channels }),
            _ => Err(Error::InvalidArgument(format!(
                "token grid must be [H, W, C] or [B, H, W, C], got {shape:?}"
            ))),
        }
    }

    fn batched(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    /// Segment width `N = C / S`, checked against `side`.
    pub fn segment_width(&self, segments: usize, side: usize) -> Result<usize> {
        if segments == 0 || self.channels % segments != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {} not divisible into {segments} segments",
                self.channels
            )));
        }
        let n = self.channels / segments;
        if n != side {
            return Err(Error::InvalidArgument(format!(
                "segment width N = {}/{segments} = {n} must equal the grid side {side}",
                self.channels
            )));
        }
        Ok(n)
    }
}

/// Segment count for a square grid: `S = C / side`.
pub fn segments_for(channels: usize, side: usize) -> Result<usize> {
    if side == 0 || channels % side != 0 {
        return Err(Error::Config(format!(
            "hidden size {channels} is not a multiple of the token side {side}"
        )));
    }
    Ok(channels / side)
}

/// Runs `f` on a rank-4 view and restores the input rank.
fn batched<T: Scalar>(x: &Var<T>, f: impl FnOnce(&Var<T>, TokenGrid) -> Result<Var<T>>) -> Result<Var<T>> {
    let g = TokenGrid::of(x.shape())?;
    if x.shape().len() == 4 {
        f(x, g)
    } else {
        let out = f(&x.reshape(g.batched())?, g)?;
        out.reshape(x.shape().to_vec())
    }
}

/// Height branch: mixes each `(column, segment)` slice along the height axis.
pub fn mix_height<T: Scalar>(params: &Bindings<T>, x: &Var<T>, proj_h: &Linear, segments: usize) -> Result<Var<T>> {
    batched(x, |x, g| {
        let (b, h, w, c) = (g.batch, g.height, g.width, g.channels);
        let n = g.segment_width(segments, h)?;
        let s = segments;
        let regrouped = x.reshape([b, h, w, n, s])?.permute(&[0, 3, 2, 1, 4])?.reshape([b, n, w, h * s])?;
        proj_h
            .forward(params, &regrouped)?
            .reshape([b, n, w, h, s])?
            .permute(&[0, 3, 2, 1, 4])?
            .reshape([b, h, w, c])
    })
}

/// Width branch: mixes each `(row, segment)` slice along the width axis.
pub fn mix_width<T: Scalar>(params: &Bindings<T>, x: &Var<T>, proj_w: &Linear, segments: usize) -> Result<Var<T>> {
    batched(x, |x, g| {
        let (b, h, w, c) = (g.batch, g.height, g.width, g.channels);
        let n = g.segment_width(segments, w)?;
        let s = segments;
        let regrouped = x.reshape([b, h, w, n, s])?.permute(&[0, 1, 3, 2, 4])?.reshape([b, h, n, w * s])?;
        proj_w
            .forward(params, &regrouped)?
            .reshape([b, h, n, w, s])?
            .permute(&[0, 1, 3, 2, 4])?
            .reshape([b, h, w, c])
    })
}

/// The four square projections of a Permute-MLP.
#[derive(Clone, Copy, Debug)]
pub struct PermuteMlpWeights {
    pub proj_h: Linear,
    pub proj_w: Linear,
    pub proj_c: Linear,
    pub proj: Linear,
}

impl PermuteMlpWeights {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            proj_h: Linear::register(store, &format!("{prefix}.proj_h"), dim, dim)?,
            proj_w: Linear::register(store, &format!("{prefix}.proj_w"), dim, dim)?,
            proj_c: Linear::register(store, &format!("{prefix}.proj_c"), dim, dim)?,
            proj: Linear::register(store, &format!("{prefix}.proj"), dim, dim)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }
}

/// Squeeze (global average of the branch sum), GELU bottleneck, then a
/// per-channel softmax over the three branches.
#[derive(Clone, Copy, Debug)]
pub struct SplitAttentionWeights {
    pub reduce: Linear,
    pub expand: Linear,
    pub ratio: usize,
}

impl SplitAttentionWeights {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || dim % ratio != 0 {
            return Err(Error::Config(format!("channels {dim} not divisible by reduction {ratio}")));
        }
        Ok(Self {
            reduce: Linear::register(store, &format!("{prefix}.reduce"), dim, dim / ratio)?,
            expand: Linear::register(store, &format!("{prefix}.expand"), dim / ratio, NUM_BRANCHES * dim)?,
            ratio,
        })
    }

    pub fn param_count(dim: usize, ratio: usize) -> usize {
        Linear::param_count(dim, dim / ratio) + Linear::param_count(dim / ratio, NUM_BRANCHES * dim)
    }

    /// Branch weights `[B, 3, C]`, summing to one over the branch axis.
    pub fn weights<T: Scalar>(&self, params: &Bindings<T>, branches: [&Var<T>; 3]) -> Result<Var<T>> {
        let g = TokenGrid::of(branches[0].shape())?;
        let total = branches[0].add(branches[1])?.add(branches[2])?;
        let squeezed = total.mean(&[1, 2], false)?;
        let hidden = self.reduce.forward(params, &squeezed)?.gelu()?;
        let logits = self.expand.forward(params, &hidden)?.reshape([g.batch, NUM_BRANCHES, g.channels])?;
        logits.softmax(1)
    }
}

/// Sum of the three branch outputs followed by the fusion projection.
pub fn permute_mlp_forward<T: Scalar>(
    params: &Bindings<T>,
    x: &Var<T>,
    w: &PermuteMlpWeights,
    segments: usize,
) -> Result<Var<T>> {
    let xh = mix_height(params, x, &w.proj_h, segments)?;
    let xw = mix_width(params, x, &w.proj_w, segments)?;
    let xc = w.proj_c.forward(params, x)?;
    w.proj.forward(params, &xh.add(&xw)?.add(&xc)?)
}

fn weighted_fusion<T: Scalar>(
    params: &Bindings<T>,
    branches: [Var<T>; 3],
    w: &PermuteMlpWeights,
    a: &SplitAttentionWeights,
) -> Result<Var<T>> {
    let g = TokenGrid::of(branches[0].shape())?;
    let weights = a.weights(params, [&branches[0], &branches[1], &branches[2]])?;
    let mut fused: Option<Var<T>> = None;
    for (i, branch) in branches.iter().enumerate() {
        let ai = weights.select(1, i)?.reshape([g.batch, 1, 1, g.channels])?;
        let term = branch.mul(&ai)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    w.proj.forward(params, &fused.expect("three branches"))
}

/// Permute-MLP with branches fused by split attention.
pub fn weighted_permute_mlp_forward<T: Scalar>(
    params: &Bindings<T>,
    x: &Var<T>,
    w: &PermuteMlpWeights,
    a: &SplitAttentionWeights,
    segments: usize,
) -> Result<Var<T>> {
    batched(x, |x, _| {
        let xh = mix_height(params, x, &w.proj_h, segments)?;
        let xw = mix_width(params, x, &w.proj_w, segments)?;
        let xc = w.proj_c.forward(params, x)?;
        weighted_fusion(params, [xh, xw, xc], w, a)
    })
}

/// Per-token `fc2(gelu(fc1(x)))`.
pub fn channel_mlp_forward<T: Scalar>(params: &Bindings<T>, x: &Var<T>, fc1: &Linear, fc2: &Linear) -> Result<Var<T>> {
    fc2.forward(params, &fc1.forward(params, x)?.gelu()?)
}

/// Token-mixing variant of a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Height, width and channel branches fused by split attention.
    #[default]
    Weighted,
    /// Same branches fused by plain addition.
    Vanilla,
    /// Height branch replaced by a per-token channel projection.
    NoHeight,
    /// Width branch replaced by a per-token channel projection.
    NoWidth,
    /// Both spatial branches replaced; the block has no spatial mixing at all.
    PositionBlind,
}

impl MixerKind {
    pub fn uses_split_attention(self) -> bool {
        self != MixerKind::Vanilla
    }

    pub fn mixes_height(self) -> bool {
        matches!(self, MixerKind::Weighted | MixerKind::Vanilla | MixerKind::NoWidth)
    }

    pub fn mixes_width(self) -> bool {
        matches!(self, MixerKind::Weighted | MixerKind::Vanilla | MixerKind::NoHeight)
    }
}

/// Pre-norm residual block:
/// `Y = X + SD(PermuteMLP(LN(X)))`, `Z = Y + SD(ChannelMLP(LN(Y)))`.
#[derive(Clone, Copy, Debug)]
pub struct PermutatorBlock {
    pub norm1: LayerNorm,
    pub mixer: PermuteMlpWeights,
    pub attention: Option<SplitAttentionWeights>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub kind: MixerKind,
    pub segments: usize,
    pub drop_rate: f64,
}

impl PermutatorBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        side: usize,
        mlp_ratio: usize,
        kind: MixerKind,
        drop_rate: f64,
    ) -> Result<Self> {
        let segments = segments_for(dim, side)?;
        let norm1 = LayerNorm::register(store, &format!("{prefix}.norm1"), dim)?;
        let mixer = PermuteMlpWeights::register(store, &format!("{prefix}.mixer"), dim)?;
        let attention = if kind.uses_split_attention() {
            Some(SplitAttentionWeights::register(
                store,
                &format!("{prefix}.mixer.attn"),
                dim,
                SPLIT_ATTENTION_REDUCTION,
            )?)
        } else {
            None
        };
        let norm2 = LayerNorm::register(store, &format!("{prefix}.norm2"), dim)?;
        let fc1 = Linear::register(store, &format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim)?;
        let fc2 = Linear::register(store, &format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim)?;
        Ok(Self {
            norm1,
            mixer,
            attention,
            norm2,
            fc1,
            fc2,
            kind,
            segments,
            drop_rate,
        })
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(dim: usize, mlp_ratio: usize, kind: MixerKind) -> usize {
        let attn = if kind.uses_split_attention() {
            SplitAttentionWeights::param_count(dim, SPLIT_ATTENTION_REDUCTION)
        } else {
            0
        };
        2 * LayerNorm::param_count(dim)
            + PermuteMlpWeights::param_count(dim)
            + attn
            + Linear::param_count(dim, mlp_ratio * dim)
            + Linear::param_count(mlp_ratio * dim, dim)
    }

    /// Token mixing for this block's variant.
    pub fn mix<T: Scalar>(&self, params: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = &self.mixer;
        batched(x, |x, _| {
            let xh = if self.kind.mixes_height() {
                mix_height(params, x, &w.proj_h, self.segments)?
            } else {
                w.proj_h.forward(params, x)?
            };
            let xw = if self.kind.mixes_width() {
                mix_width(params, x, &w.proj_w, self.segments)?
            } else {
                w.proj_w.forward(params, x)?
            };
            let xc = w.proj_c.forward(params, x)?;
            match &self.attention {
                Some(a) => weighted_fusion(params, [xh, xw, xc], w, a),
                None => w.proj.forward(params, &xh.add(&xw)?.add(&xc)?),
            }
        })
    }

    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, x: &Var<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Var<T>> {
        batched(x, |x, _| {
            let mixed = self.mix(params, &self.norm1.forward(params, x)?)?;
            let y = x.add(&stochastic_depth(&mixed, self.drop_rate, mode, rng)?)?;
            let hidden = channel_mlp_forward(params, &self.norm2.forward(params, &y)?, &self.fc1, &self.fc2)?;
            y.add(&stochastic_depth(&hidden, self.drop_rate, mode, rng)?)
        })
    }
}

#[cfg(test)]
mod tests;
