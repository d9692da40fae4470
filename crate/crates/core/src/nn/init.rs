use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::params::{ParamKind, ParamStore};
use crate::tensor::Scalar;

/// Target standard deviation of initialized linear weights.
pub const INIT_STD: f64 = 0.02;

/// Std of a standard normal truncated to `[-2, 2]`.
fn truncated_unit_std() -> f64 {
    let pdf2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = libm::erf(2.0 / std::f64::consts::SQRT_2);
    (1.0 - 4.0 * pdf2 / mass).sqrt()
}

/// Normal sample rejected outside `±2·scale`, with `scale` chosen so the
/// truncated distribution has standard deviation `std`.
pub fn truncated_normal(rng: &mut dyn RngCore, std: f64) -> f64 {
    let scale = std / truncated_unit_std();
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * scale;
        }
    }
}

/// Weights ~ truncated normal (std 0.02), biases 0, LayerNorm gain 1 and shift 0.
///
/// Parameters are visited in registration order, so a seed fixes the result.
pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, rng: &mut dyn RngCore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.entry(id).kind();
        let t = store.tensor_mut(id);
        match kind {
            ParamKind::Weight => t
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::from_f64(truncated_normal(rng, INIT_STD))),
            ParamKind::Bias | ParamKind::NormShift => t.data_mut().fill(T::ZERO),
            ParamKind::NormScale => t.data_mut().fill(T::ONE),
        }
    }
}
