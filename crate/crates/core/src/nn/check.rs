//! Gradient checks over the parameters of a store.

use super::params::{Bindings, ParamStore};
use crate::autograd::{GradcheckReport, GradcheckSettings, ProbeError, Tape, Var};
use crate::error::{Error, Result};

/// Evenly spaced flat offsets, at most `count` of them.
pub fn probe_indices(numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    let mut idx: Vec<usize> = (0..count).map(|i| i * numel / count + (i * 7919) % (numel / count).max(1)).collect();
    idx.dedup();
    idx
}

/// Central-difference check of `d loss / d param` for up to `per_tensor`
/// elements of every parameter. One report per parameter, in store order.
///
/// `f` is run once with parameters bound on `tape` (inject faults on it
/// beforehand) and twice per probe with constant bindings.
pub fn gradcheck_store<F>(
    store: &ParamStore<f64>,
    tape: &Tape<f64>,
    f: F,
    per_tensor: usize,
    settings: GradcheckSettings,
) -> Result<Vec<(String, GradcheckReport)>>
where
    F: Fn(&Bindings<f64>) -> Result<Var<f64>>,
{
    let bound = store.bind(Some(tape));
    let loss = f(&bound)?;
    if loss.value().numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;

    let mut work = store.clone();
    let mut reports = Vec::with_capacity(store.len());
    for (pos, id) in store.ids().enumerate() {
        let analytic = bound.vars()[pos].grad();
        let numel = store.tensor(id).numel();
        let mut probes = Vec::new();
        for idx in probe_indices(numel, per_tensor) {
            let original = store.tensor(id).data()[idx];
            let mut eval = |delta: f64| -> Result<f64> {
                work.tensor_mut(id).data_mut()[idx] = original + delta;
                Ok(f(&work.bind(None))?.value().data()[0])
            };
            let numeric = (eval(settings.eps)? - eval(-settings.eps)?) / (2.0 * settings.eps);
            work.tensor_mut(id).data_mut()[idx] = original;
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[idx]);
            probes.push(ProbeError {
                index: idx,
                analytic: a,
                numeric,
                rel_error: crate::autograd::rel_error(a, numeric, settings.floor),
            });
        }
        reports.push((store.name(id).to_string(), GradcheckReport::from_probes(probes, settings.tol)));
    }
    Ok(reports)
}
