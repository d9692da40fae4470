use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BASE_LR: f64 = 1e-3;
pub const LR_REFERENCE_BATCH: f64 = 1024.0;

/// Linear scaling rule: `1e-3 · batch_size / 1024`.
pub fn lr_for(batch_size: usize) -> f64 {
    lr_for_with(batch_size, BASE_LR, LR_REFERENCE_BATCH)
}

pub fn lr_for_with(batch_size: usize, base: f64, denom: f64) -> f64 {
    base * batch_size as f64 / denom
}

/// Final value of the cosine phase, relative to the peak.
pub const COSINE_FLOOR: f64 = 1e-2;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `peak_lr · 1e-2`.
pub fn schedule(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return peak_lr;
    }
    let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    let floor = peak_lr * COSINE_FLOOR;
    floor + (peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Warmup then a constant peak.
pub fn constant_schedule(step: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        peak_lr * step as f64 / warmup_steps as f64
    } else {
        peak_lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, e)| Tensor::zeros(e.tensor().shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update.
///
/// Decaying parameters are first shrunk by `1 − lr·wd`, then every parameter
/// moves by `lr · m̂ / (√v̂ + eps)`. `grads` follows store order.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    grads: &[Option<Tensor<T>>],
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2) = (T::from_f64(opt.beta1), T::from_f64(opt.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - opt.beta1), T::from_f64(1.0 - opt.beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(opt.eps);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[i] else {
            return Err(Error::MissingGradient(store.name(id).to_string()));
        };
        let decays = store.entry(id).decays();
        let shrink = T::from_f64(1.0 - lr * opt.weight_decay);
        let p = store.tensor_mut(id);
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if decays {
                *p *= shrink;
            }
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let denom = (*v).sqrt() * inv_sqrt_bc2 + eps;
            *p -= step_size * *m / denom;
        }
    }
    Ok(())
}
