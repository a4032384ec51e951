//! Row-major matrix kernels. All accumulate into `c`.
//!
//! Operands here are small (a handful of graph nodes by a few hundred
//! columns), where packing BLAS-style kernels costs more than it saves.

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        s[0] += x[0] * y[0];
        s[1] += x[1] * y[1];
        s[2] += x[2] * y[2];
        s[3] += x[3] * y[3];
    }
    let mut t = (s[0] + s[1]) + (s[2] + s[3]);
    for (x, y) in ra.iter().zip(rb) {
        t += x * y;
    }
    t
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[kk * m..(kk + 1) * m], crow);
            }
        }
    }
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let brow = &b[r * m..(r + 1) * m];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut c[kk * m..(kk + 1) * m]);
            }
        }
    }
}
