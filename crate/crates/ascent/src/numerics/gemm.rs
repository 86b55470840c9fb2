//! Row-major f64 matrix kernels.
//!
//! Three variants cover every product the tape needs without materializing
//! transposes: `gemm_nn` (A·B), `gemm_nt` (A·Bᵀ), `gemm_tn` (Aᵀ·B). All
//! accumulate into `c` so callers can fold multiple contributions.
//!
//! All three share one register-blocked 4x32 microkernel fed from packed
//! operand panels: A is repacked into `[k x 4]` column order, B into `[k x 32]`
//! row panels, so the kernel's inner loop issues only contiguous loads and
//! keeps four independent FMA chains per vector lane. The transposed variants
//! differ from `gemm_nn` only in how the panels are gathered. Packing zero-pads
//! ragged edges; the writeback trims them, so every size takes the same code
//! path and the floating-point reduction order is fixed for a given shape.

const MR: usize = 4;
const NR: usize = 32;

#[derive(Clone, Copy)]
enum Layout {
    /// operand stored as it is used
    Normal,
    /// operand stored transposed relative to its use
    Transposed,
}

/// c[m x n] += a[m x k] * b[k x n]
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_packed(m, k, n, a, Layout::Normal, b, Layout::Normal, c);
}

/// c[m x n] += a[m x k] * b[n x k]T
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    gemm_packed(m, k, n, a, Layout::Normal, b, Layout::Transposed, c);
}

/// c[m x n] += a[k x m]T * b[k x n]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_packed(m, k, n, a, Layout::Transposed, b, Layout::Normal, c);
}

fn gemm_packed(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let i_blocks = m.div_ceil(MR);
    let mut apack = vec![0.0; i_blocks * k * MR];
    for ib in 0..i_blocks {
        let i0 = ib * MR;
        let rows = MR.min(m - i0);
        let dst = &mut apack[ib * k * MR..(ib + 1) * k * MR];
        match a_layout {
            Layout::Normal => {
                for l in 0..k {
                    for r in 0..rows {
                        dst[l * MR + r] = a[(i0 + r) * k + l];
                    }
                }
            }
            Layout::Transposed => {
                for l in 0..k {
                    dst[l * MR..l * MR + rows].copy_from_slice(&a[l * m + i0..l * m + i0 + rows]);
                }
            }
        }
    }
    let mut bpack = vec![0.0; k * NR];
    let mut j0 = 0;
    while j0 < n {
        let cols = NR.min(n - j0);
        match b_layout {
            Layout::Normal => {
                for l in 0..k {
                    bpack[l * NR..l * NR + cols].copy_from_slice(&b[l * n + j0..l * n + j0 + cols]);
                    bpack[l * NR + cols..(l + 1) * NR].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Layout::Transposed => {
                for l in 0..k {
                    for j in 0..cols {
                        bpack[l * NR + j] = b[(j0 + j) * k + l];
                    }
                    bpack[l * NR + cols..(l + 1) * NR].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        for ib in 0..i_blocks {
            let i0 = ib * MR;
            let rows = MR.min(m - i0);
            kernel_4x32(k, &apack[ib * k * MR..], &bpack, i0, j0, rows, cols, n, c);
        }
        j0 += NR;
    }
}

/// acc[4 x 32] += apack[k x 4] (x) bpack[k x 32], written back trimmed.
/// Kept out of line so the register allocator sees only the hot loop.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn kernel_4x32(
    k: usize,
    apack: &[f64],
    bpack: &[f64],
    i0: usize,
    j0: usize,
    rows: usize,
    cols: usize,
    n: usize,
    c: &mut [f64],
) {
    let (mut a0, mut a1, mut a2, mut a3) = ([0.0f64; NR], [0.0f64; NR], [0.0f64; NR], [0.0f64; NR]);
    for l in 0..k {
        let av: &[f64; MR] = apack[l * MR..][..MR].try_into().expect("packed A");
        let bv: &[f64; NR] = bpack[l * NR..][..NR].try_into().expect("packed B");
        for j in 0..NR {
            a0[j] += av[0] * bv[j];
            a1[j] += av[1] * bv[j];
            a2[j] += av[2] * bv[j];
            a3[j] += av[3] * bv[j];
        }
    }
    for (r, acc) in [a0, a1, a2, a3].iter().enumerate().take(rows) {
        let crow = &mut c[(i0 + r) * n + j0..][..cols];
        for j in 0..cols {
            crow[j] += acc[j];
        }
    }
}

/// Dot product with eight independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn random(len: usize, rng: &mut Rng) -> Vec<f64> {
        (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    const SHAPES: &[(usize, usize, usize)] = &[
        (1, 1, 1),
        (3, 4, 2),
        (7, 5, 9),
        (4, 8, 32),
        (8, 16, 33),
        (9, 17, 18),
        (64, 576, 300),
        (2, 300, 2),
        (65, 64, 64),
        (5, 1, 40),
    ];

    #[test]
    fn nn_matches_triple_loop() {
        let mut rng = Rng::new(1);
        for &(m, k, n) in SHAPES {
            let a = random(m * k, &mut rng);
            let b = random(k * n, &mut rng);
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            assert_close(&c, &naive_nn(m, k, n, &a, &b), 1e-11);
        }
    }

    #[test]
    fn nt_matches_triple_loop() {
        let mut rng = Rng::new(2);
        for &(m, k, n) in SHAPES {
            let a = random(m * k, &mut rng);
            let bt = random(n * k, &mut rng); // stored [n x k]
            let b = transpose(n, k, &bt); // logical [k x n]
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c);
            assert_close(&c, &naive_nn(m, k, n, &a, &b), 1e-11);
        }
    }

    #[test]
    fn tn_matches_triple_loop() {
        let mut rng = Rng::new(3);
        for &(m, k, n) in SHAPES {
            let at = random(k * m, &mut rng); // stored [k x m]
            let a = transpose(k, m, &at); // logical [m x k]
            let b = random(k * n, &mut rng);
            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, &at, &b, &mut c);
            assert_close(&c, &naive_nn(m, k, n, &a, &b), 1e-11);
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        let mut c = vec![10.0; 4];
        gemm_nn(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, vec![12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn dot_matches_naive() {
        let mut rng = Rng::new(4);
        for len in [0, 1, 7, 8, 9, 31, 64] {
            let a = random(len, &mut rng);
            let b = random(len, &mut rng);
            let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_inputs_same_bits() {
        let mut rng = Rng::new(5);
        let a = random(9 * 31, &mut rng);
        let b = random(31 * 17, &mut rng);
        let mut c1 = vec![0.0; 9 * 17];
        let mut c2 = vec![0.0; 9 * 17];
        gemm_nn(9, 31, 17, &a, &b, &mut c1);
        gemm_nn(9, 31, 17, &a, &b, &mut c2);
        assert_eq!(c1, c2);
    }
}
