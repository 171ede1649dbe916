//! Dense matrix kernels. Row-parallel where the work is large enough; every
//! output element is reduced by a single thread in a fixed order, so results
//! do not depend on the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // blocks of ROWS output rows share each load of a `b` row
    let block = |(bi, c_block): (usize, &mut [f64])| {
        let i0 = bi * ROWS;
        let rows = c_block.len() / n;
        if rows == ROWS {
            let (c0, rest) = c_block.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in 0..k {
                let x = [a[i0 * k + p], a[(i0 + 1) * k + p], a[(i0 + 2) * k + p], a[(i0 + 3) * k + p]];
                if x == [0.0; ROWS] {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = b_row[j];
                    c0[j] += x[0] * bv;
                    c1[j] += x[1] * bv;
                    c2[j] += x[2] * bv;
                    c3[j] += x[3] * bv;
                }
            }
        } else {
            for (r, c_row) in c_block.chunks_mut(n).enumerate() {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &a_ip) in a_row.iter().enumerate() {
                    if a_ip == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                        *c_v += a_ip * b_v;
                    }
                }
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * n * k >= PAR_THRESHOLD && m > ROWS {
        c[..m * n].par_chunks_mut(ROWS * n).enumerate().for_each(block);
    } else {
        c[..m * n].chunks_mut(ROWS * n).enumerate().for_each(block);
    }
}

const ROWS: usize = 4;

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    // a transposed copy of b turns the inner loop into a contiguous axpy
    let mut bt = vec![0.0; n * k];
    for (q, b_row) in b[..k * n].chunks(n).enumerate() {
        for (p, &v) in b_row.iter().enumerate() {
            bt[p * k + q] = v;
        }
    }
    gemm_nn(g, &bt, c, m, n, k);
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(p, c_row): (usize, &mut [f64])| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (c_v, &g_v) in c_row.iter_mut().zip(g_row) {
                *c_v += a_ip * g_v;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && k > 1 {
        c[..k * n].par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c[..k * n].chunks_mut(n).enumerate().for_each(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_eq!(c, naive(&a, &b, m, k, n));

        // gemm_nt: a[m,k] = c[m,n] · bᵀ where b is [k,n]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut out, m, k, n);
        let expect = naive(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // gemm_tn: bᵀ-shaped product aᵀ · c
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out = vec![0.0; k * n];
        let g: Vec<f64> = (0..m * n).map(|i| i as f64 - 3.0).collect();
        gemm_tn(&a, &g, &mut out, m, k, n);
        let expect = naive(&at, &g, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
