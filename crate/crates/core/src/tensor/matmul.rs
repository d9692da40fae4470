//! Blocked row-major GEMM.
//!
//! Rows of the output are split across the rayon pool in fixed-size chunks.
//! Each output element is accumulated by exactly one worker in a fixed `k`
//! order, so results are bit-identical for any worker count.

use rayon::prelude::*;

use super::Scalar;

const ROW_CHUNK: usize = 64;
const COL_BLOCK: usize = 256;
const K_BLOCK: usize = 128;

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`, `c: [m, n]` (overwritten).
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|x| *x = T::ZERO);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let work = m * k * n;
    if work < 1 << 16 || m <= ROW_CHUNK {
        gemm_rows(k, n, a, b, c);
        return;
    }
    c.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(c_rows, a_rows)| gemm_rows(k, n, a_rows, b, c_rows));
}

/// Serial kernel over a contiguous band of rows.
fn gemm_rows<T: Scalar>(k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let rows = c.len() / n;
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for k0 in (0..k).step_by(K_BLOCK) {
            let k1 = (k0 + K_BLOCK).min(k);
            let mut i = 0;
            while i + 4 <= rows {
                let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
                for p in k0..k1 {
                    let brow = &b[p * n + j0..p * n + j1];
                    let a0 = a[i * k + p];
                    let a1 = a[(i + 1) * k + p];
                    let a2 = a[(i + 2) * k + p];
                    let a3 = a[(i + 3) * k + p];
                    for (jj, &bv) in brow.iter().enumerate() {
                        c0[jj] += a0 * bv;
                        c1[jj] += a1 * bv;
                        c2[jj] += a2 * bv;
                        c3[jj] += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < rows {
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in k0..k1 {
                    let av = a[i * k + p];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
                i += 1;
            }
        }
    }
}

/// Triple-loop reference product, used as a test oracle and a benchmark baseline.
pub fn gemm_naive<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `[rows, cols] -> [cols, rows]`.
pub fn transpose2d<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}
