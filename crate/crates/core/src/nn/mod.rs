//! Layers the architecture is assembled from.

mod check;
mod functional;
mod init;
mod layers;
mod params;

pub use check::{gradcheck_store, probe_indices};
pub use functional::{gelu, softmax, stochastic_depth, Mode};
pub use init::{init_params, truncated_normal, INIT_STD};
pub use layers::{global_pool_head, LayerNorm, Linear, PatchEmbed, LAYER_NORM_EPS};
pub use params::{Bindings, ParamEntry, ParamId, ParamKind, ParamStore};
