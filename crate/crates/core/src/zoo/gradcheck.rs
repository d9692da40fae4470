use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Architecture, Model, ViPConfig};
use crate::autograd::{gradcheck_points, Fault, GradcheckSettings, ProbeError, Tape, Var};
use crate::error::Result;
use crate::nn::{gradcheck_store, probe_indices, Mode};
use crate::tensor::Tensor;

/// Worst probe of one parameter tensor (or of the input image batch).
#[derive(Clone, Debug, Serialize)]
pub struct LayerError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<ProbeError>,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradcheck {
    pub model: String,
    pub tol: f64,
    pub eps: f64,
    pub max_rel_error: f64,
    /// Name of the tensor holding the overall worst probe.
    pub worst_layer: Option<String>,
    pub passed: bool,
    pub layers: Vec<LayerError>,
}

/// 64-bit gradient check of a full model: cross-entropy on a random batch,
/// `per_tensor` probes per parameter tensor plus the same number on the input.
pub fn gradcheck_model(
    config: &ViPConfig,
    seed: u64,
    batch: usize,
    per_tensor: usize,
    settings: GradcheckSettings,
    fault: Fault,
) -> Result<ModelGradcheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::build(config, &mut rng)?;
    let arch: &Architecture = &model.arch;
    let images = Tensor::from_fn(arch.input_shape(batch), |_| rng.random_range(-1.0..1.0));
    let k = config.num_classes;
    let onehot = Tensor::from_fn([batch, k], |i| if i % k == (i / k) % k { 1.0 } else { 0.0 });

    let loss = |params: &crate::nn::Bindings<f64>, x: &Var<f64>| -> Result<Var<f64>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let logits = arch.forward(params, x, Mode::Eval, &mut unused)?;
        logits.log_softmax(1)?.mul_const(&onehot)?.sum_all()?.scale(-1.0 / batch as f64)
    };

    let tape = Tape::new();
    tape.inject_fault(fault);
    let const_images = Var::constant(images.clone());
    let per_param = gradcheck_store(&model.store, &tape, |p| loss(p, &const_images), per_tensor, settings)?;

    let frozen = model.store.bind(None);
    let input = gradcheck_points(
        |t, x| {
            t.inject_fault(fault);
            loss(&frozen, x)
        },
        &images,
        &probe_indices(images.numel(), per_tensor),
        settings,
    )?;

    let mut layers: Vec<LayerError> = per_param
        .into_iter()
        .map(|(name, r)| LayerError {
            name,
            max_rel_error: r.max_rel_error,
            worst: r.worst,
            checked: r.checked,
            passed: r.passed,
        })
        .collect();
    layers.push(LayerError {
        name: "input".into(),
        max_rel_error: input.max_rel_error,
        worst: input.worst,
        checked: input.checked,
        passed: input.passed,
    });

    let worst = layers
        .iter()
        .fold(None::<&LayerError>, |w, l| match w {
            Some(w) if w.max_rel_error >= l.max_rel_error => Some(w),
            _ => Some(l),
        });
    let max_rel_error = worst.map_or(0.0, |l| l.max_rel_error);
    Ok(ModelGradcheck {
        model: config.name.clone(),
        tol: settings.tol,
        eps: settings.eps,
        max_rel_error,
        worst_layer: worst.map(|l| l.name.clone()),
        passed: layers.iter().all(|l| l.passed),
        layers,
    })
}
