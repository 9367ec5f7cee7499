//! Slice-level kernels shared by the tape and by no-grad code paths.
//!
//! Every reduction runs left to right over its index range so that results
//! are bit-reproducible.

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_it * b_tj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let nb = n / 4 * 4;
    let mb = m / 2 * 2;
    // 2×4 output tiles keep eight independent sums in flight.
    for i in (0..mb).step_by(2) {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        for j in (0..nb).step_by(4) {
            let bs = &b[j * k..(j + 4) * k];
            let (b0, rest) = bs.split_at(k);
            let (b1, rest) = rest.split_at(k);
            let (b2, b3) = rest.split_at(k);
            let mut s = [0.0; 8];
            for t in 0..k {
                let (x0, x1) = (a0[t], a1[t]);
                let (y0, y1, y2, y3) = (b0[t], b1[t], b2[t], b3[t]);
                s[0] += x0 * y0;
                s[1] += x0 * y1;
                s[2] += x0 * y2;
                s[3] += x0 * y3;
                s[4] += x1 * y0;
                s[5] += x1 * y1;
                s[6] += x1 * y2;
                s[7] += x1 * y3;
            }
            c[i * n + j..i * n + j + 4].copy_from_slice(&s[..4]);
            c[(i + 1) * n + j..(i + 1) * n + j + 4].copy_from_slice(&s[4..]);
        }
        for j in nb..n {
            let bj = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(a0, bj);
            c[(i + 1) * n + j] = dot(a1, bj);
        }
    }
    for i in mb..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let c_row = &mut c[t * n..(t + 1) * n];
            for (c_tj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_tj += a_it * b_ij;
            }
        }
    }
}

/// Four interleaved partial sums, combined pairwise at the end.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with an optional column mask (`false` = excluded).
/// Returns `None` when some row has no admissible column.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, keep: Option<&[bool]>) -> Option<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        let mut admissible = false;
        for (j, &v) in row.iter().enumerate() {
            if keep.map_or(true, |k| k[j]) {
                admissible = true;
                if v > max || v.is_nan() {
                    max = v;
                }
            }
        }
        if !admissible {
            return None;
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep.map_or(true, |k| k[j]) {
                let e = (v - max).exp();
                o[j] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Some(out)
}
