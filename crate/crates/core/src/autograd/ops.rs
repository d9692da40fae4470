//! Differentiable operations on [`Var`].

use super::{Fault, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shape, check_axes, check_permutation, check_reshape, gemm, inverse_permutation,
    kernels_binary, matmul_dims, reduce_sum, sum_to_shape, transpose2d, Scalar, Tensor,
};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn tensor<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Broadcasts `g` (shape `from`) up to `to`.
fn expand<T: Scalar>(from: &[usize], g: &[T], to: &[usize]) -> Vec<T> {
    if from == to {
        return g.to_vec();
    }
    let zeros = vec![T::ZERO; to.iter().product()];
    kernels_binary(to, &zeros, from, g, |_, y| y)
        .expect("broadcast-compatible by construction")
        .1
}

impl<T: Scalar> Var<T> {
    fn binary_op(
        &self,
        rhs: &Var<T>,
        f: impl Fn(T, T) -> T,
        // (g, a, b) -> (da_full, db_full) over the broadcast output shape
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<Var<T>> {
        let (a, b) = (self.value.clone(), rhs.value.clone());
        let (shape, data) = kernels_binary(a.shape(), a.data(), b.shape(), b.data(), f)?;
        let out = tensor(shape.clone(), data);
        Var::record(out, &[self, rhs], move |g, needs| {
            let ea = expand(a.shape(), a.data(), &shape);
            let eb = expand(b.shape(), b.data(), &shape);
            let mut ga = Vec::with_capacity(ea.len());
            let mut gb = Vec::with_capacity(eb.len());
            for ((&gv, &x), &y) in g.data().iter().zip(&ea).zip(&eb) {
                let (dx, dy) = df(gv, x, y);
                ga.push(dx);
                gb.push(dy);
            }
            vec![
                needs[0].then(|| tensor(a.shape().to_vec(), sum_to_shape(&shape, &ga, a.shape()))),
                needs[1].then(|| tensor(b.shape().to_vec(), sum_to_shape(&shape, &gb, b.shape()))),
            ]
        })
    }

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        // Addition needs no operand values in backward; avoid the generic path.
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        let (shape, data) = kernels_binary(&sa, self.value.data(), &sb, rhs.value.data(), |x, y| x + y)?;
        let out = tensor(shape.clone(), data);
        Var::record(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| tensor(sa.clone(), sum_to_shape(&shape, g.data(), &sa))),
                needs[1].then(|| tensor(sb.clone(), sum_to_shape(&shape, g.data(), &sb))),
            ]
        })
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        let (shape, data) = kernels_binary(&sa, self.value.data(), &sb, rhs.value.data(), |x, y| x - y)?;
        let out = tensor(shape.clone(), data);
        Var::record(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| tensor(sa.clone(), sum_to_shape(&shape, g.data(), &sa))),
                needs[1].then(|| {
                    let neg: Vec<T> = g.data().iter().map(|&v| -v).collect();
                    tensor(sb.clone(), sum_to_shape(&shape, &neg, &sb))
                }),
            ]
        })
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.binary_op(rhs, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn div(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.binary_op(rhs, |x, y| x / y, |g, x, y| (g / y, -g * x / (y * y)))
    }

    fn unary_op(&self, f: impl Fn(T) -> T, df: impl Fn(T, T, T) -> T + 'static) -> Result<Var<T>> {
        // df(g, x, y) with y = f(x)
        let x = self.value.clone();
        let out = x.map(f);
        let y = std::sync::Arc::new(out.clone());
        Var::record(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| df(gv, xv, yv))
                .collect();
            vec![Some(tensor(x.shape().to_vec(), data))]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let c = T::from_f64(c);
        let out = self.value.map(|v| v * c);
        Var::record(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<T>> {
        let c = T::from_f64(c);
        let out = self.value.map(|v| v + c);
        Var::record(out, &[self], move |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary_op(|v| v.exp(), |g, _, y| g * y)
    }

    pub fn ln(&self) -> Result<Var<T>> {
        self.unary_op(|v| v.ln(), |g, x, _| g / x)
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        self.unary_op(|v| v.sqrt(), |g, _, y| g / (y + y))
    }

    pub fn reciprocal(&self) -> Result<Var<T>> {
        self.unary_op(|v| T::ONE / v, |g, _, y| -g * y * y)
    }

    pub fn erf(&self) -> Result<Var<T>> {
        let two_over_sqrt_pi = T::from_f64(std::f64::consts::FRAC_2_SQRT_PI);
        self.unary_op(|v| v.erf(), move |g, x, _| g * two_over_sqrt_pi * (-(x * x)).exp())
    }

    /// Exact GELU `x·Φ(x)` with `Φ` the standard normal CDF.
    pub fn gelu(&self) -> Result<Var<T>> {
        let half = T::from_f64(0.5);
        let r2 = T::from_f64(FRAC_1_SQRT_2);
        let c = T::from_f64(INV_SQRT_2PI);
        let corrupt = match self.tape() {
            Some(t) if t.fault() == Fault::GeluBackward => T::from_f64(1.5),
            _ => T::ONE,
        };
        self.unary_op(
            move |x| x * half * (T::ONE + (x * r2).erf()),
            move |g, x, _| {
                let cdf = half * (T::ONE + (x * r2).erf());
                let pdf = c * (-(x * x) * half).exp();
                g * (cdf + x * pdf) * corrupt
            },
        )
    }

    pub fn matmul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        let (m, k, n) = matmul_dims(self.shape(), rhs.shape())?;
        let out = self.value.matmul(&rhs.value)?;
        let (a, b) = (self.value.clone(), rhs.value.clone());
        Var::record(out, &[self, rhs], move |g, needs| {
            let ga = needs[0].then(|| {
                let bt = transpose2d(k, n, b.data());
                let mut d = vec![T::ZERO; m * k];
                gemm(m, n, k, g.data(), &bt, &mut d);
                tensor(a.shape().to_vec(), d)
            });
            let gb = needs[1].then(|| {
                let at = transpose2d(m, k, a.data());
                let mut d = vec![T::ZERO; k * n];
                gemm(k, m, n, &at, g.data(), &mut d);
                tensor(vec![k, n], d)
            });
            vec![ga, gb]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let shape = shape.into();
        check_reshape(self.shape(), &shape)?;
        let from = self.shape().to_vec();
        let out = self.value.reshape(shape)?;
        Var::record(out, &[self], move |g, _| {
            vec![Some(g.reshape(from.clone()).expect("same element count"))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        check_permutation(axes, self.value.rank())?;
        let out = self.value.permute(axes)?;
        let inv = inverse_permutation(axes);
        Var::record(out, &[self], move |g, _| vec![Some(g.permute(&inv).expect("valid inverse"))])
    }

    pub fn sum(&self, axes: &[usize], keepdims: bool) -> Result<Var<T>> {
        let sorted = check_axes(axes, self.value.rank())?;
        let in_shape = self.shape().to_vec();
        let (kept, data) = reduce_sum(&in_shape, self.value.data(), &sorted);
        let out_shape = if keepdims {
            kept.clone()
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !sorted.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let out = tensor(out_shape, data);
        Var::record(out, &[self], move |g, _| {
            vec![Some(tensor(in_shape.clone(), expand(&kept, g.data(), &in_shape)))]
        })
    }

    pub fn mean(&self, axes: &[usize], keepdims: bool) -> Result<Var<T>> {
        let sorted = check_axes(axes, self.value.rank())?;
        let count: usize = sorted.iter().map(|&a| self.shape()[a]).product();
        self.sum(&sorted, keepdims)?.scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let axes: Vec<usize> = (0..self.value.rank()).collect();
        self.sum(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let axes: Vec<usize> = (0..self.value.rank()).collect();
        self.mean(&axes, false)
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "select index {index} on axis {axis} of shape {shape:?}"
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * ext + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = tensor(out_shape, data);
        Var::record(out, &[self], move |g, _| {
            let mut d = vec![T::ZERO; outer * ext * inner];
            for o in 0..outer {
                let base = (o * ext + index) * inner;
                d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
            }
            vec![Some(tensor(shape.clone(), d))]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxes { axes: vec![axis], rank: shape.len() });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let x = self.value.data();
        let mut y = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let mut mx = x[at(0)];
                for e in 1..ext {
                    mx = mx.max(x[at(e)]);
                }
                let mut total = T::ZERO;
                for e in 0..ext {
                    let v = (x[at(e)] - mx).exp();
                    y[at(e)] = v;
                    total += v;
                }
                for e in 0..ext {
                    y[at(e)] /= total;
                }
            }
        }
        let out = tensor(shape.clone(), y);
        let yv = std::sync::Arc::new(out.clone());
        Var::record(out, &[self], move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut d = vec![T::ZERO; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * ext + e) * inner + i;
                    let dot: T = (0..ext).map(|e| gd[at(e)] * yd[at(e)]).sum();
                    for e in 0..ext {
                        d[at(e)] = yd[at(e)] * (gd[at(e)] - dot);
                    }
                }
            }
            vec![Some(tensor(shape.clone(), d))]
        })
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxes { axes: vec![axis], rank: shape.len() });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let x = self.value.data();
        let mut y = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let mut mx = x[at(0)];
                for e in 1..ext {
                    mx = mx.max(x[at(e)]);
                }
                let lse = mx + (0..ext).map(|e| (x[at(e)] - mx).exp()).sum::<T>().ln();
                for e in 0..ext {
                    y[at(e)] = x[at(e)] - lse;
                }
            }
        }
        let out = tensor(shape.clone(), y);
        let yv = std::sync::Arc::new(out.clone());
        Var::record(out, &[self], move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut d = vec![T::ZERO; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * ext + e) * inner + i;
                    let total: T = (0..ext).map(|e| gd[at(e)]).sum();
                    for e in 0..ext {
                        d[at(e)] = gd[at(e)] - yd[at(e)].exp() * total;
                    }
                }
            }
            vec![Some(tensor(shape.clone(), d))]
        })
    }

    /// LayerNorm over the last axis: `gamma·(x-μ)/sqrt(σ²+eps) + beta`, biased variance.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::InvalidArgument("layer_norm on a scalar".into()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.value.numel() / c.max(1);
        let (x, gm, bt) = (self.value.data(), gamma.value.data(), beta.value.data());
        let eps = T::from_f64(eps);
        let inv_c = T::ONE / T::from_usize(c);
        let mut xhat = vec![T::ZERO; x.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut y = vec![T::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = gm[j] * h + bt[j];
            }
        }
        let out = tensor(shape.clone(), y);
        let gamma_v = gamma.value.clone();
        Var::record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gm = gamma_v.data();
            let dx = needs[0].then(|| {
                let mut d = vec![T::ZERO; gd.len()];
                for r in 0..rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for j in 0..c {
                        let dh = gr[j] * gm[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        d[r * c + j] = rstd[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                    }
                }
                tensor(shape.clone(), d)
            });
            let dgamma = needs[1].then(|| {
                let mut d = vec![T::ZERO; c];
                for r in 0..rows {
                    for j in 0..c {
                        d[j] += gd[r * c + j] * xhat[r * c + j];
                    }
                }
                tensor(vec![c], d)
            });
            let dbeta = needs[2].then(|| {
                let mut d = vec![T::ZERO; c];
                for r in 0..rows {
                    for j in 0..c {
                        d[j] += gd[r * c + j];
                    }
                }
                tensor(vec![c], d)
            });
            vec![dx, dgamma, dbeta]
        })
    }

    /// Elementwise product with an untracked mask broadcast over trailing axes.
    pub fn mul_const(&self, mask: &Tensor<T>) -> Result<Var<T>> {
        broadcast_shape(self.shape(), mask.shape())?;
        self.mul(&Var::constant(mask.clone()))
    }
}
