//! Dense f64 matrix products, single-threaded, row-major.
//!
//! The three layout variants cover forward and backward products without
//! materializing transposes; transposition is expressed through strides. The
//! heavy lifting is delegated to `matrixmultiply`, which packs operands and
//! runs a register-tiled kernel; with fixed shapes and strides its results
//! are bit-reproducible across runs. All variants accumulate into `c`.

/// Dot product with eight independent accumulator lanes, fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let ai = &a[c * LANES..(c + 1) * LANES];
        let bi = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = ai[l].mul_add(bi[l], acc[l]);
        }
    }
    let mut s = 0.0;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

/// `c += a (m x k) * b (k x n)`, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a (m x k) * b^T`, with `b` stored row-major as `n x k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a^T * b`, with `a` stored row-major as `m x k`; result is `k x n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
