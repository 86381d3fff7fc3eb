//! Shared test oracles, deliberately written as direct transcriptions of the
//! defining formulas, independent of the optimized implementation paths.

#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};

/// Serializes wall-clock-sensitive tests so timing budgets are not skewed by
/// parallel test execution.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Literal rigid-MLS transcription: weights, weighted centroids, per-node
/// 2x2 matrices A_i = w_i (rows q*_i, -q*_i-perp)(cols u, -u-perp), the
/// centered-row contraction s = sum q-hat*_i A_i, and the normalized result.
/// Row-vector convention throughout; 2D perp is (x, y) -> (-y, x).
pub fn mls_reference(
    v: (f64, f64),
    q: &[(f64, f64)],
    qhat: &[(f64, f64)],
    alpha: f64,
    eps_snap: f64,
) -> (f64, f64) {
    let n = q.len();
    let mut w = vec![0.0f64; n];
    for i in 0..n {
        let dx = v.0 - q[i].0;
        let dy = v.1 - q[i].1;
        let dist = (dx * dx + dy * dy).sqrt();
        if dist < eps_snap {
            return qhat[i];
        }
        w[i] = 1.0 / dist.powf(2.0 * alpha);
    }
    let sw: f64 = w.iter().sum();
    let mut c = (0.0f64, 0.0f64);
    let mut ch = (0.0f64, 0.0f64);
    for i in 0..n {
        c.0 += w[i] * q[i].0;
        c.1 += w[i] * q[i].1;
        ch.0 += w[i] * qhat[i].0;
        ch.1 += w[i] * qhat[i].1;
    }
    c = (c.0 / sw, c.1 / sw);
    ch = (ch.0 / sw, ch.1 / sw);

    let u = (v.0 - c.0, v.1 - c.1);
    let nu = (u.0 * u.0 + u.1 * u.1).sqrt();
    // Columns (u, -u_perp): u_perp = (-u.1, u.0).
    let ucols = [[u.0, u.1], [u.1, -u.0]]; // ucols[r][c]: row r, col c

    let mut s = (0.0f64, 0.0f64);
    for i in 0..n {
        let qs = (q[i].0 - c.0, q[i].1 - c.1);
        let qh = (qhat[i].0 - ch.0, qhat[i].1 - ch.1);
        // Rows (q*, -q*_perp): -q*_perp = (qs.1, -qs.0).
        let b = [[qs.0, qs.1], [qs.1, -qs.0]];
        // A = w * B * U.
        let mut a = [[0.0f64; 2]; 2];
        for r in 0..2 {
            for col in 0..2 {
                a[r][col] = w[i] * (b[r][0] * ucols[0][col] + b[r][1] * ucols[1][col]);
            }
        }
        // Row vector q-hat* times A.
        s.0 += qh.0 * a[0][0] + qh.1 * a[1][0];
        s.1 += qh.0 * a[0][1] + qh.1 * a[1][1];
    }
    let ns = (s.0 * s.0 + s.1 * s.1).sqrt();
    (nu * s.0 / ns + ch.0, nu * s.1 / ns + ch.1)
}

/// O(N^2) DFT energy spectrum |X_k|^2 for k = 0..N-1.
pub fn dft_energy(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    (0..n)
        .map(|k| {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for (t, &x) in series.iter().enumerate() {
                let phase = -std::f64::consts::TAU * (k * t) as f64 / n as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Least-squares line subtraction, mirroring the implementation's detrend.
pub fn detrend(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_x = series.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, &x) in series.iter().enumerate() {
        let dt = t as f64 - mean_t;
        cov += dt * (x - mean_x);
        var += dt * dt;
    }
    let b = if var > 0.0 { cov / var } else { 0.0 };
    series.iter().enumerate().map(|(t, &x)| x - mean_x - b * (t as f64 - mean_t)).collect()
}
