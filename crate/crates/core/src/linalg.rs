//! Dense f64 matrix products over flat row-major buffers.
//!
//! All entry points compute output rows in fixed 64-row chunks, so the
//! parallel and sequential paths produce bitwise-identical results: each
//! output element is written by exactly one `dgemm` call whose blocking does
//! not depend on how chunks are scheduled. The `*_serial` variants exist for
//! benchmarking the fallback path; with the `parallel` feature disabled the
//! default entry points take the serial route themselves.

use matrixmultiply::dgemm;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per dispatch unit. Fixed so chunking never depends on thread count.
const ROW_CHUNK: usize = 64;

/// Below this many multiply-adds the parallel dispatch is pure overhead.
const PAR_MIN_FLOPS: usize = 1 << 20;

#[derive(Clone, Copy)]
enum Layout {
    /// `a` is [m x k], `b` is [k x n].
    Nn,
    /// `a` is [m x k], `b` is [n x k]; computes `a * b^T`.
    Nt,
    /// `a` is [k x m], `b` is [k x n]; computes `a^T * b`.
    Tn,
}

/// One chunk of output rows `[i0, i0 + mc)`. Strides express the transposed
/// views without materializing them.
///
/// # Safety
/// Caller guarantees `a`, `b`, `c` match the documented shapes for `layout`
/// and that `i0 + mc <= m`.
unsafe fn gemm_chunk(
    layout: Layout,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    i0: usize,
    mc: usize,
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    let (a_ptr, rsa, csa) = match layout {
        Layout::Nn | Layout::Nt => (a.as_ptr().add(i0 * k), k as isize, 1),
        Layout::Tn => (a.as_ptr().add(i0), 1, m as isize),
    };
    let (rsb, csb) = match layout {
        Layout::Nn | Layout::Tn => (n as isize, 1),
        Layout::Nt => (1, k as isize),
    };
    dgemm(
        mc, k, n, 1.0, a_ptr, rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
    );
}

fn gemm_into(
    layout: Layout,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
    parallel: bool,
) {
    let (a_len, b_len) = match layout {
        Layout::Nn => (m * k, k * n),
        Layout::Nt => (m * k, n * k),
        Layout::Tn => (k * m, k * n),
    };
    assert_eq!(a.len(), a_len, "lhs buffer does not match shape");
    assert_eq!(b.len(), b_len, "rhs buffer does not match shape");
    assert_eq!(c.len(), m * n, "output buffer does not match shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }

    #[cfg(feature = "parallel")]
    if parallel {
        c.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(ci, cc)| {
            let i0 = ci * ROW_CHUNK;
            let mc = cc.len() / n;
            unsafe { gemm_chunk(layout, a, b, cc, i0, mc, m, k, n, beta) }
        });
        return;
    }
    let _ = parallel;

    for (ci, cc) in c.chunks_mut(ROW_CHUNK * n).enumerate() {
        let i0 = ci * ROW_CHUNK;
        let mc = cc.len() / n;
        unsafe { gemm_chunk(layout, a, b, cc, i0, mc, m, k, n, beta) }
    }
}

fn want_parallel(m: usize, k: usize, n: usize) -> bool {
    cfg!(feature = "parallel") && m > ROW_CHUNK && m * k * n >= PAR_MIN_FLOPS
}

// ── C = A·B ──────────────────────────────────────────────────────────────

/// `a` is [m x k], `b` is [k x n]; returns [m x n].
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(Layout::Nn, a, b, &mut c, m, k, n, 0.0, want_parallel(m, k, n));
    c
}

/// `c += a * b`; accumulating form used by backward passes.
pub fn matmul_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm_into(Layout::Nn, a, b, c, m, k, n, 1.0, want_parallel(m, k, n));
}

/// Single-threaded reference path (also the `parallel`-off behavior).
pub fn matmul_nn_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(Layout::Nn, a, b, &mut c, m, k, n, 0.0, false);
    c
}

// ── C = A·Bᵀ ─────────────────────────────────────────────────────────────

/// `a` is [m x k], `b` is [n x k]; returns [m x n].
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(Layout::Nt, a, b, &mut c, m, k, n, 0.0, want_parallel(m, k, n));
    c
}

/// `c += a * b^T`.
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm_into(Layout::Nt, a, b, c, m, k, n, 1.0, want_parallel(m, k, n));
}

// ── C = Aᵀ·B ─────────────────────────────────────────────────────────────

/// `a` is [k x m], `b` is [k x n]; returns [m x n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(Layout::Tn, a, b, &mut c, m, k, n, 0.0, want_parallel(m, k, n));
    c
}

/// `c += a^T * b`.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm_into(Layout::Tn, a, b, c, m, k, n, 1.0, want_parallel(m, k, n));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn rand_mat(rng: &mut impl Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn hand_checked_product() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let c = matmul_nn(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn identity_is_noop() {
        let x = vec![1.0, -2.0, 3.5, 0.25, 4.0, -1.0];
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul_nn(&x, &eye, 2, 3, 3), x);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (65, 7, 9), (130, 16, 3)] {
            let a = rand_mat(&mut rng, m * k);
            let b = rand_mat(&mut rng, k * n);
            let got = matmul_nn(&a, &b, m, k, n);
            let want = naive_nn(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "nn mismatch: {g} vs {w}");
            }
        }
    }

    #[test]
    fn transposed_layouts_match_explicit_transpose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (m, k, n) = (67, 13, 5);
        let a = rand_mat(&mut rng, m * k);
        let b = rand_mat(&mut rng, k * n);

        // NT: b_t stored as [n x k]
        let mut b_t = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                b_t[j * k + p] = b[p * n + j];
            }
        }
        let nt = matmul_nt(&a, &b_t, m, k, n);

        // TN: a_t stored as [k x m]
        let mut a_t = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                a_t[p * m + i] = a[i * k + p];
            }
        }
        let tn = matmul_tn(&a_t, &b, m, k, n);

        let want = naive_nn(&a, &b, m, k, n);
        for idx in 0..m * n {
            assert!((nt[idx] - want[idx]).abs() < 1e-12);
            assert!((tn[idx] - want[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_adds_onto_existing() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![2.0, 3.0, 4.0, 5.0];
        let mut c = vec![10.0, 10.0, 10.0, 10.0];
        matmul_nn_acc(&mut c, &a, &b, 2, 2, 2);
        assert_eq!(c, vec![12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (m, k, n) = (200, 64, 48);
        let a = rand_mat(&mut rng, m * k);
        let b = rand_mat(&mut rng, k * n);
        let par = matmul_nn(&a, &b, m, k, n);
        let ser = matmul_nn_serial(&a, &b, m, k, n);
        assert_eq!(par, ser);
    }
}
