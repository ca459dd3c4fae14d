//! Tiny slice-based linear algebra helpers for the small, fixed dimensions
//! used throughout (row-major storage).

/// `out = A x` for a `rows x cols` matrix.
pub(crate) fn mat_vec(rows: usize, cols: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += a[r * cols + c] * x[c];
        }
        out[r] = s;
    }
}

/// `out = A^T x` for a `rows x cols` matrix (`x` has length `rows`).
pub(crate) fn mat_tvec(rows: usize, cols: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for c in 0..cols {
        let mut s = 0.0;
        for r in 0..rows {
            s += a[r * cols + c] * x[r];
        }
        out[c] = s;
    }
}

/// `x^T A y` for a square `n x n` matrix.
pub(crate) fn quad_form(n: usize, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in 0..n {
        let mut s = 0.0;
        for c in 0..n {
            s += a[r * n + c] * y[c];
        }
        total += x[r] * s;
    }
    total
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Frobenius norm of a flat matrix buffer.
pub(crate) fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Max absolute asymmetry of a square matrix.
pub(crate) fn asymmetry(n: usize, a: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..r {
            worst = worst.max((a[r * n + c] - a[c * n + r]).abs());
        }
    }
    worst
}
