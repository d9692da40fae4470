//! Vision Permutator: MLP-like image classification that mixes tokens
//! separately along height, width and channels.
//!
//! The crate is self-contained: a dense tensor type with reverse-mode
//! autodiff ([`tensor`], [`autograd`]), network primitives ([`nn`]), the
//! Permute-MLP and Permutator block ([`permutator`]), the model registry
//! ([`zoo`]) and a small training harness ([`train`]).

pub mod autograd;
pub mod error;
pub mod nn;
pub mod permutator;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use nn::{Mode, ParamStore};
pub use permutator::{MixerKind, TokenGrid};
pub use zoo::{Model, StageConfig, ViPConfig};
pub use tensor::{DType, Scalar, Tensor};

