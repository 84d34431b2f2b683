//! Dense float kernels behind the graph ops.
//!
//! All loops use fixed iteration orders so results are bit-reproducible.

/// c[m][n] += a[m][k] * b[k][n], row-major.
pub fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m][j] += sum_n a[m][n] * b[j][n]  (b used transposed).
pub fn gemm_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, j: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), j * n);
    debug_assert_eq!(c.len(), m * j);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * j..(i + 1) * j];
        for (q, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[q * n..(q + 1) * n]);
        }
    }
}

/// c[k][n] += sum_m a[m][k] * b[m][n]  (a used transposed).
pub fn gemm_at(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (q, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[q * n..(q + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Lane-parallel dot product; deterministic reduction order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (va, vb) in rem_a.iter().zip(rem_b) {
        s += va * vb;
    }
    s
}

/// y[o] = dot(w[o], x) + b[o].
pub fn affine(w: &[f32], b: &[f32], x: &[f32], y: &mut [f32]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), b.len() * cols);
    debug_assert_eq!(y.len(), b.len());
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = dot(&w[o * cols..(o + 1) * cols], x) + b[o];
    }
}

/// dx[j] += sum_o w[o][j] * dy[o].
pub fn affine_backward_input(w: &[f32], dy: &[f32], dx: &mut [f32]) {
    let cols = dx.len();
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &w[o * cols..(o + 1) * cols];
        for (xv, &wv) in dx.iter_mut().zip(row) {
            *xv += d * wv;
        }
    }
}

/// dw[o][j] += dy[o] * x[j]; db[o] += dy[o].
pub fn affine_backward_params(x: &[f32], dy: &[f32], dw: &mut [f32], db: &mut [f32]) {
    let cols = x.len();
    for (o, &d) in dy.iter().enumerate() {
        db[o] += d;
        if d == 0.0 {
            continue;
        }
        let row = &mut dw[o * cols..(o + 1) * cols];
        for (wv, &xv) in row.iter_mut().zip(x) {
            *wv += d * xv;
        }
    }
}

/// Numerically stable sigmoid.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + exp(x)).
#[inline]
pub fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stable softmax with max subtraction. Returns probs.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}
