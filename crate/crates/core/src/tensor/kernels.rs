use super::{numel, strides, Scalar};
use crate::error::{Error, Result};

/// Copies `data` (shape `shape`) into the permuted layout.
pub(super) fn permute<T: Scalar>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = data.len();
    if rank == 0 || n == 0 {
        return (out_shape, data.to_vec());
    }
    // Input stride walked by each output axis.
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    // Merge a trailing run of axes that stay contiguous so the inner loop is a memcpy.
    let mut run = 1;
    let mut tail = rank;
    while tail > 0 && walk[tail - 1] == run {
        run *= out_shape[tail - 1];
        tail -= 1;
    }

    let mut out = Vec::with_capacity(n);
    if tail == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let outer_shape = &out_shape[..tail];
    let outer_walk = &walk[..tail];
    let mut idx = vec![0usize; tail];
    let mut src = 0usize;
    let last = tail - 1;
    let inner_ext = outer_shape[last];
    let inner_walk = outer_walk[last];
    loop {
        if run == 1 {
            let mut s = src;
            for _ in 0..inner_ext {
                out.push(data[s]);
                s += inner_walk;
            }
        } else {
            let mut s = src;
            for _ in 0..inner_ext {
                out.extend_from_slice(&data[s..s + run]);
                s += inner_walk;
            }
        }
        // Odometer over the outer axes, skipping the innermost one handled above.
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            src += outer_walk[ax];
            if idx[ax] < outer_shape[ax] {
                break;
            }
            src -= outer_walk[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Right-aligned broadcast of two shapes where each axis is equal or 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - shape.len();
    let own = strides(shape);
    (0..out_shape.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Elementwise binary op with trailing-axis broadcasting.
pub(crate) fn binary<T: Scalar>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    if a_shape == b_shape {
        return Ok((a_shape.to_vec(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
    }
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let n = numel(&out_shape);
    // Fast path: b is a suffix of a (bias-style add).
    let b_core: Vec<usize> = b_shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out_shape == a_shape && !b.is_empty() && a_shape.ends_with(&b_core) {
        let m = b.len();
        let out = a.chunks(m).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y))).collect();
        return Ok((out_shape, out));
    }
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok((out_shape, out));
    }
    let rank = out_shape.len();
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    loop {
        let (mut pa, mut pb) = (ia, ib);
        for _ in 0..out_shape[last] {
            out.push(f(a[pa], b[pb]));
            pa += sa[last];
            pb += sb[last];
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return Ok((out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * idx[ax];
            ib -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums over the sorted, validated `axes`; reduced axes keep extent 1.
pub fn reduce_sum<T: Scalar>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let mut out = vec![T::ZERO; numel(&out_shape)];
    if data.is_empty() {
        return (out_shape, out);
    }
    let so = broadcast_strides(&out_shape, shape);
    let rank = shape.len();
    if rank == 0 {
        out[0] = data[0];
        return (out_shape, out);
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut io = 0usize;
    let mut src = 0usize;
    loop {
        let mut po = io;
        for _ in 0..shape[last] {
            out[po] += data[src];
            src += 1;
            po += so[last];
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            io += so[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            io -= so[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Reduces a broadcast result back to `target` (the adjoint of broadcasting).
pub fn sum_to_shape<T: Scalar>(shape: &[usize], data: &[T], target: &[usize]) -> Vec<T> {
    if shape == target {
        return data.to_vec();
    }
    let pad = shape.len() - target.len();
    let axes: Vec<usize> = (0..shape.len())
        .filter(|&i| i < pad || (target[i - pad] == 1 && shape[i] != 1))
        .collect();
    reduce_sum(shape, data, &axes).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[2, 1, 1, 4], &[2, 3, 3, 4]).unwrap(), vec![2, 3, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn binary_broadcast_matches_loop() {
        let a: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let b = vec![10.0, 20.0, 30.0, 40.0];
        let (s, out) = binary(&[2, 3, 4], &a, &[4], &b, |x, y| x + y).unwrap();
        assert_eq!(s, vec![2, 3, 4]);
        for i in 0..24 {
            assert_eq!(out[i], a[i] + b[i % 4]);
        }
        // Per-sample, per-channel scaling as used by branch reweighting.
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (_, out) = binary(&[2, 3, 4], &a, &[2, 1, 4], &w, |x, y| x * y).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[i * 12 + j * 4 + k], a[i * 12 + j * 4 + k] * w[i * 4 + k]);
                }
            }
        }
        // Lhs broadcast.
        let (s, out) = binary(&[3, 1], &[1.0, 2.0, 3.0], &[3, 2], &[1.0; 6], |x, y| x - y).unwrap();
        assert_eq!(s, vec![3, 2]);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn reduce_and_sum_to_shape() {
        let d = vec![1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(reduce_sum(&[2, 2], &d, &[0]).1, vec![4.0, 6.0]);
        assert_eq!(reduce_sum(&[2, 2], &d, &[1]).1, vec![3.0, 7.0]);
        assert_eq!(reduce_sum(&[2, 2], &d, &[0, 1]).1, vec![10.0]);
        assert_eq!(sum_to_shape(&[2, 2], &d, &[2]), vec![4.0, 6.0]);
        assert_eq!(sum_to_shape(&[2, 2], &d, &[2, 1]), vec![3.0, 7.0]);
    }

    #[test]
    fn permute_matches_index_map() {
        let shape = [2, 3, 4, 5];
        let data: Vec<f32> = (0..120).map(|i| i as f32).collect();
        let axes = [2, 1, 0, 3];
        let (os, out) = permute(&shape, &data, &axes);
        assert_eq!(os, vec![4, 3, 2, 5]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        let src = ((a * 3 + b) * 4 + c) * 5 + d;
                        let dst = ((c * 3 + b) * 2 + a) * 5 + d;
                        assert_eq!(out[dst], data[src]);
                    }
                }
            }
        }
    }
}
