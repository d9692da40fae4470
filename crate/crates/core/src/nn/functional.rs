use rand::{Rng, RngCore};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

pub fn gelu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    x.gelu()
}

pub fn softmax<T: Scalar>(x: &Var<T>, axis: usize) -> Result<Var<T>> {
    x.softmax(axis)
}

/// Per-sample residual-branch drop.
///
/// In training each sample (leading axis) is zeroed with probability `rate`
/// and otherwise scaled by `1/(1-rate)`. Evaluation is the identity.
pub fn stochastic_depth<T: Scalar>(x: &Var<T>, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("stochastic depth rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let Some(&batch) = x.shape().first() else {
        return Err(Error::InvalidArgument("stochastic depth needs a batch axis".into()));
    };
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mut mask_shape = vec![1; x.shape().len()];
    mask_shape[0] = batch;
    let mask = Tensor::from_fn(mask_shape, |_| {
        if rng.random::<f64>() < rate {
            T::ZERO
        } else {
            keep_scale
        }
    });
    x.mul_const(&mask)
}
