//! Independent reference implementations used as test oracles. None of them
//! call into the crate's numerical code.

#![allow(dead_code)]

use ndarray::Array2;

/// Dense system matrix built from tent-function interpolation: every integer
/// step along every ray, over a range far wider than the image, spreads unit
/// length onto all pixels within one pixel in x and y.
pub fn dense_system_matrix(n: usize, columns: usize, angles: &[f64]) -> Vec<Vec<f64>> {
    let c = (n as f64 - 1.0) / 2.0;
    let reach = 4 * n as i64;
    let mut a = Vec::with_capacity(angles.len() * columns);
    for &theta in angles {
        for k in 0..columns {
            let s = (k as f64 + 0.5) * n as f64 / columns as f64 - n as f64 / 2.0;
            let mut row = vec![0.0; n * n];
            for m in -reach..=reach {
                let t = m as f64;
                let x = s * theta.cos() - t * theta.sin();
                let y = s * theta.sin() + t * theta.cos();
                for i in 0..n {
                    for j in 0..n {
                        let wx = 1.0 - (x - (j as f64 - c)).abs();
                        let wy = 1.0 - (y - (i as f64 - c)).abs();
                        if wx > 0.0 && wy > 0.0 {
                            row[i * n + j] += wx * wy;
                        }
                    }
                }
            }
            a.push(row);
        }
    }
    a
}

pub fn inscribed_disc(n: usize) -> Vec<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    let r = n as f64 / 2.0;
    (0..n * n)
        .map(|p| {
            let (i, j) = ((p / n) as f64, (p % n) as f64);
            (i - c).hypot(j - c) <= r
        })
        .collect()
}

/// Textbook SIRT with explicit matrices: `x ← P(x + λ C Aᵀ R (y − A x))`
/// where `P` zeroes outside the disc and clamps negatives.
pub fn dense_sirt(a: &[Vec<f64>], y: &[f64], x0: &[f64], n: usize, iterations: usize, lambda: f64) -> Vec<f64> {
    let cols = a[0].len();
    let inv = |v: f64| if v.abs() < 1e-12 { 0.0 } else { 1.0 / v };
    let r: Vec<f64> = a.iter().map(|row| inv(row.iter().sum())).collect();
    let c: Vec<f64> = (0..cols).map(|j| inv(a.iter().map(|row| row[j]).sum())).collect();
    let mask = inscribed_disc(n);
    let mut x = x0.to_vec();
    for _ in 0..iterations {
        let weighted: Vec<f64> = a
            .iter()
            .zip(y)
            .zip(&r)
            .map(|((row, yi), ri)| ri * (yi - row.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>()))
            .collect();
        for j in 0..cols {
            let back: f64 = a.iter().zip(&weighted).map(|(row, w)| row[j] * w).sum();
            let v = x[j] + lambda * c[j] * back;
            x[j] = if mask[j] { v.max(0.0) } else { 0.0 };
        }
    }
    x
}

/// Modified Shepp-Logan, transcribed separately from the crate: centre,
/// semi-axes, tilt (degrees) and additive intensity.
const ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

/// Phantom value at pixel `(i, j)` of an `n`-pixel image, y pointing up.
pub fn shepp_logan_pixel(n: usize, i: usize, j: usize) -> f64 {
    let c = (n as f64 - 1.0) / 2.0;
    let x = (j as f64 - c) / (n as f64 / 2.0);
    let y = (c - i as f64) / (n as f64 / 2.0);
    if (j as f64 - c).hypot(i as f64 - c) > n as f64 / 2.0 {
        return 0.0;
    }
    let mut v = 0.0;
    for (x0, y0, a, b, deg, value) in ELLIPSES {
        // Quadratic form of the tilted ellipse.
        let phi = deg * std::f64::consts::PI / 180.0;
        let (px, py) = (x - x0, y - y0);
        let q = (px * phi.cos() + py * phi.sin()).powi(2) / (a * a)
            + (py * phi.cos() - px * phi.sin()).powi(2) / (b * b);
        if q <= 1.0 {
            v += value;
        }
    }
    v.clamp(0.0, 1.0)
}

/// Mean SSIM by direct 2-D summation of an 11×11 Gaussian window (σ = 1.5)
/// over every fully contained position.
pub fn ssim_direct(a: &Array2<f64>, b: &Array2<f64>, l: f64) -> f64 {
    let size = 11usize;
    let half = 5.0;
    let mut g = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (u, row) in g.iter_mut().enumerate() {
        for (v, w) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - half, v as f64 - half);
            *w = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
            total += *w;
        }
    }
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let (h, w) = a.dim();
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..=h - size {
        for j in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..size {
                for v in 0..size {
                    let k = g[u][v] / total;
                    let (p, q) = (a[[i + u, j + v]], b[[i + u, j + v]]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}

/// Chord length of a centred disc of radius `r` at signed offset `s`.
pub fn disc_chord(r: f64, s: f64) -> f64 {
    if s.abs() >= r {
        0.0
    } else {
        2.0 * (r * r - s * s).sqrt()
    }
}
