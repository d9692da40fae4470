use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `mean_b −Σ_k target[b,k] · log_softmax(logits)[b,k]`.
pub fn soft_cross_entropy<T: Scalar>(logits: &Var<T>, targets: &Tensor<T>) -> Result<Var<T>> {
    let &[b, k] = logits.shape() else {
        return Err(Error::InvalidArgument(format!("logits must be [B, K], got {:?}", logits.shape())));
    };
    if targets.shape() != [b, k] {
        return Err(Error::ShapeMismatch {
            op: "soft_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    for (row, t) in targets.data().chunks(k).enumerate() {
        let s: f64 = t.iter().map(|v| v.to_f64()).sum();
        if (s - 1.0).abs() > 1e-4 || t.iter().any(|v| v.to_f64() < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target row {row} is not a distribution (sum {s})"
            )));
        }
    }
    logits.log_softmax(1)?.mul_const(targets)?.sum_all()?.scale(-1.0 / b as f64)
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = T::ONE;
    }
    t
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}
