//! Central-difference gradient oracle.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckSettings {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
    /// Denominator floor: `|a-n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl GradcheckSettings {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self { eps, tol, floor: 1e-6 }
    }
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self::new(1e-5, 1e-4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct ProbeError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ProbeError>,
    pub checked: usize,
    pub passed: bool,
}

impl GradcheckReport {
    pub(crate) fn from_probes(probes: impl IntoIterator<Item = ProbeError>, tol: f64) -> Self {
        let mut worst: Option<ProbeError> = None;
        let mut checked = 0;
        for p in probes {
            checked += 1;
            // NaN must count as a failure.
            if worst.map_or(true, |w| !(p.rel_error <= w.rel_error)) {
                worst = Some(p);
            }
        }
        let max_rel_error = worst.map_or(0.0, |w| w.rel_error);
        Self {
            max_rel_error,
            worst,
            checked,
            passed: max_rel_error <= tol,
        }
    }
}

pub(crate) fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff against central differences at every element of `x`.
///
/// `f` must build a scalar from the var it is given. It is called once on a
/// tracked copy of `x`, then twice per element on untracked perturbed copies.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, settings: GradcheckSettings) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    gradcheck_points(f, x, &all, settings)
}

/// [`gradcheck`] restricted to the flat offsets in `indices`.
pub fn gradcheck_points<F>(
    f: F,
    x: &Tensor<f64>,
    indices: &[usize],
    settings: GradcheckSettings,
) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let xv = tape.watch(x.clone());
    let loss = f(&tape, &xv)?;
    if loss.value().numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let analytic = if loss.is_tracked() {
        loss.backward()?;
        xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    } else {
        Tensor::zeros(x.shape().to_vec())
    };

    let eval = |idx: usize, delta: f64| -> Result<f64> {
        let mut probe = x.clone();
        probe.set_requires_grad(false);
        probe.data_mut()[idx] += delta;
        let t = Tape::new();
        Ok(f(&t, &Var::constant(probe))?.value().data()[0])
    };

    let mut probes = Vec::with_capacity(indices.len());
    for &idx in indices {
        let numeric = (eval(idx, settings.eps)? - eval(idx, -settings.eps)?) / (2.0 * settings.eps);
        let a = analytic.data()[idx];
        probes.push(ProbeError {
            index: idx,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric, settings.floor),
        });
    }
    Ok(GradcheckReport::from_probes(probes, settings.tol))
}
