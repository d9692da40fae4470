//! Index-level loop implementations of every Permute-MLP component.
//!
//! These deliberately avoid reshape/permute and the blocked matmul: each
//! output element is written from an explicit gather over the input, so they
//! serve as an independent reference for the tensor-level implementations.
//! All functions take `[B, H, W, C]` tensors.

use crate::nn::{Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Raw weight `[in, out]` and bias `[out]` of one linear layer.
#[derive(Clone, Debug)]
pub struct Affine<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn from_store(store: &ParamStore<T>, layer: &Linear) -> Self {
        Self {
            weight: store.tensor(layer.weight).clone(),
            bias: store.tensor(layer.bias).clone(),
        }
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        let (inp, out) = (self.weight.shape()[0], self.weight.shape()[1]);
        assert_eq!(v.len(), inp);
        let w = self.weight.data();
        (0..out)
            .map(|o| {
                let mut acc = T::ZERO;
                for (k, &vk) in v.iter().enumerate() {
                    acc += vk * w[k * out + o];
                }
                acc + self.bias.data()[o]
            })
            .collect()
    }
}

fn dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let &[b, h, w, c] = x.shape() else {
        panic!("oracle expects [B, H, W, C], got {:?}", x.shape());
    };
    (b, h, w, c)
}

/// `out[b,i,j,n·S+s] = (Σ_{h,s'} x[b,h,j,n·S+s'] · W[h·S+s', i·S+s]) + bias`.
pub fn mix_height<T: Scalar>(x: &Tensor<T>, proj: &Affine<T>, segments: usize) -> Tensor<T> {
    let (b, h, w, c) = dims(x);
    let s = segments;
    let n = c / s;
    assert_eq!(n, h, "segment width must equal height");
    let mut out = Tensor::zeros([b, h, w, c]);
    for bi in 0..b {
        for j in 0..w {
            for ni in 0..n {
                let mut gathered = Vec::with_capacity(h * s);
                for hi in 0..h {
                    for si in 0..s {
                        gathered.push(x.at(&[bi, hi, j, ni * s + si]));
                    }
                }
                let mixed = proj.apply(&gathered);
                for i in 0..h {
                    for si in 0..s {
                        out.set(&[bi, i, j, ni * s + si], mixed[i * s + si]);
                    }
                }
            }
        }
    }
    out
}

/// Width analogue of [`mix_height`].
pub fn mix_width<T: Scalar>(x: &Tensor<T>, proj: &Affine<T>, segments: usize) -> Tensor<T> {
    let (b, h, w, c) = dims(x);
    let s = segments;
    let n = c / s;
    assert_eq!(n, w, "segment width must equal width");
    let mut out = Tensor::zeros([b, h, w, c]);
    for bi in 0..b {
        for i in 0..h {
            for ni in 0..n {
                let mut gathered = Vec::with_capacity(w * s);
                for wj in 0..w {
                    for si in 0..s {
                        gathered.push(x.at(&[bi, i, wj, ni * s + si]));
                    }
                }
                let mixed = proj.apply(&gathered);
                for j in 0..w {
                    for si in 0..s {
                        out.set(&[bi, i, j, ni * s + si], mixed[j * s + si]);
                    }
                }
            }
        }
    }
    out
}

/// Per-token affine map.
pub fn per_token<T: Scalar>(x: &Tensor<T>, proj: &Affine<T>) -> Tensor<T> {
    let (b, h, w, c) = dims(x);
    let out_c = proj.weight.shape()[1];
    let mut out = Tensor::zeros([b, h, w, out_c]);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let token: Vec<T> = (0..c).map(|k| x.at(&[bi, i, j, k])).collect();
                for (o, v) in proj.apply(&token).into_iter().enumerate() {
                    out.set(&[bi, i, j, o], v);
                }
            }
        }
    }
    out
}

fn zip3<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, f: impl Fn(usize, T, T, T) -> T) -> Tensor<T> {
    let data = (0..a.numel())
        .map(|i| f(i, a.data()[i], b.data()[i], c.data()[i]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Unweighted three-branch fusion.
pub fn permute_mlp<T: Scalar>(
    x: &Tensor<T>,
    proj_h: &Affine<T>,
    proj_w: &Affine<T>,
    proj_c: &Affine<T>,
    proj: &Affine<T>,
    segments: usize,
) -> Tensor<T> {
    let xh = mix_height(x, proj_h, segments);
    let xw = mix_width(x, proj_w, segments);
    let xc = per_token(x, proj_c);
    per_token(&zip3(&xh, &xw, &xc, |_, a, b, c| a + b + c), proj)
}

pub fn gelu_scalar<T: Scalar>(v: T) -> T {
    let x = v.to_f64();
    T::from_f64(x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
}

/// Branch weights `[B][3][C]` from the squeeze / bottleneck / softmax formula.
pub fn split_attention<T: Scalar>(
    xh: &Tensor<T>,
    xw: &Tensor<T>,
    xc: &Tensor<T>,
    reduce: &Affine<T>,
    expand: &Affine<T>,
) -> Vec<[Vec<f64>; 3]> {
    let (b, h, w, c) = dims(xh);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut squeeze = vec![T::ZERO; c];
        for (k, sq) in squeeze.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for i in 0..h {
                for j in 0..w {
                    let idx = [bi, i, j, k];
                    acc += xh.at(&idx) + xw.at(&idx) + xc.at(&idx);
                }
            }
            *sq = acc / T::from_usize(h * w);
        }
        let hidden: Vec<T> = reduce.apply(&squeeze).into_iter().map(gelu_scalar).collect();
        let logits = expand.apply(&hidden);
        let mut weights: [Vec<f64>; 3] = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
        for k in 0..c {
            let z: Vec<f64> = (0..3).map(|br| logits[br * c + k].to_f64()).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let total: f64 = e.iter().sum();
            for br in 0..3 {
                weights[br][k] = e[br] / total;
            }
        }
        out.push(weights);
    }
    out
}

/// Split-attention weighted fusion, written straight from the formula.
#[allow(clippy::too_many_arguments)]
pub fn weighted_permute_mlp<T: Scalar>(
    x: &Tensor<T>,
    proj_h: &Affine<T>,
    proj_w: &Affine<T>,
    proj_c: &Affine<T>,
    proj: &Affine<T>,
    reduce: &Affine<T>,
    expand: &Affine<T>,
    segments: usize,
) -> Tensor<T> {
    let xh = mix_height(x, proj_h, segments);
    let xw = mix_width(x, proj_w, segments);
    let xc = per_token(x, proj_c);
    let a = split_attention(&xh, &xw, &xc, reduce, expand);
    let (_, h, w, c) = dims(x);
    let fused = zip3(&xh, &xw, &xc, |flat, vh, vw, vc| {
        let k = flat % c;
        let bi = flat / (h * w * c);
        let wt = &a[bi];
        T::from_f64(wt[0][k] * vh.to_f64() + wt[1][k] * vw.to_f64() + wt[2][k] * vc.to_f64())
    });
    per_token(&fused, proj)
}

/// `fc2(gelu(fc1(token)))` one token at a time.
pub fn channel_mlp<T: Scalar>(x: &Tensor<T>, fc1: &Affine<T>, fc2: &Affine<T>) -> Tensor<T> {
    let hidden = per_token(x, fc1).map(gelu_scalar);
    per_token(&hidden, fc2)
}
