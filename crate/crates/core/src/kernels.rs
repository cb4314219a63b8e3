//! Dense f32 kernels shared by the tape ops and the cached inference path.
//!
//! All matrices are row-major. Every kernel accumulates into `c`; callers zero
//! the output when they want plain assignment.

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + libm::tanhf(inner))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanhf(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm. Returns per-row (mean, 1/std) for the backward pass.
pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    n: usize,
) -> alloc::vec::Vec<(f32, f32)> {
    let rows = x.len() / n;
    let mut stats = alloc::vec::Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = (xr.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        let var = (xr
            .iter()
            .map(|&v| {
                let d = (v - mean) as f64;
                d * d
            })
            .sum::<f64>()
            / n as f64) as f32;
        let rstd = 1.0 / libm::sqrtf(var + LN_EPS);
        let orow = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            orow[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        stats.push((mean, rstd));
    }
    stats
}

/// In-place softmax of one row; entries at index > `limit` are forced to zero.
pub fn softmax_row(row: &mut [f32], limit: usize) {
    let valid = (limit + 1).min(row.len());
    let mut mx = f32::NEG_INFINITY;
    for &v in &row[..valid] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0f64;
    for v in &mut row[..valid] {
        *v = libm::expf(*v - mx);
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in &mut row[..valid] {
        *v *= inv;
    }
    for v in &mut row[valid..] {
        *v = 0.0;
    }
}
