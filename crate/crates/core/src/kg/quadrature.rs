//! Product quadrature on the 2-sphere and real spherical harmonics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::spectrum::ModeId;

/// Gauss-Legendre nodes and weights on `[-1, 1]`, Newton-refined from Chebyshev guesses.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if m == 0 { 1.0 } else if m == 1 { z } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[m - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss-Legendre in `cos(colatitude)` times the trapezoid rule in longitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereQuadrature {
    /// `(colatitude, longitude)`.
    pub nodes: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    /// Exact for polynomials of this total degree in the ambient coordinates.
    pub degree: usize,
}

impl SphereQuadrature {
    pub fn new(degree: usize) -> Self {
        let nlat = (degree + 2) / 2;
        let nlon = degree + 1;
        let (xs, ws) = gauss_legendre(nlat);
        let mut nodes = Vec::with_capacity(nlat * nlon);
        let mut weights = Vec::with_capacity(nlat * nlon);
        for (x, w) in xs.iter().zip(&ws) {
            let colat = x.clamp(-1.0, 1.0).acos();
            for l in 0..nlon {
                nodes.push((colat, 2.0 * PI * l as f64 / nlon as f64));
                weights.push(w * 2.0 * PI / nlon as f64);
            }
        }
        Self {
            nodes,
            weights,
            degree,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Position of `(j, ell)` in the degree-major harmonic table.
pub fn harmonic_index(m: ModeId) -> usize {
    (m.j * m.j + m.ell - 1) as usize
}

/// Signed azimuthal order of a mode: `ell = m + j + 1`.
pub fn azimuthal_order(m: ModeId) -> i32 {
    m.ell as i32 - m.j as i32 - 1
}

/// Orthonormal real harmonics of degree `0..=j_max` at one point, indexed by
/// [`harmonic_index`]. Positive orders carry `cos(m phi)`, negative orders `sin(|m| phi)`.
pub fn real_harmonics(j_max: u32, colat: f64, lon: f64) -> Vec<f64> {
    let jm = j_max as usize;
    let (x, sn) = (colat.cos(), colat.sin());
    // normalized associated Legendre functions, no Condon-Shortley phase
    let mut p = vec![vec![0.0f64; jm + 1]; jm + 1];
    p[0][0] = 1.0 / (4.0 * PI).sqrt();
    for m in 1..=jm {
        let mf = m as f64;
        p[m][m] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * sn * p[m - 1][m - 1];
    }
    for m in 0..jm {
        p[m + 1][m] = (2.0 * m as f64 + 3.0).sqrt() * x * p[m][m];
    }
    for m in 0..=jm {
        for j in (m + 2)..=jm {
            let (jf, mf) = (j as f64, m as f64);
            let a = ((4.0 * jf * jf - 1.0) / (jf * jf - mf * mf)).sqrt();
            let a1 = ((4.0 * (jf - 1.0).powi(2) - 1.0) / ((jf - 1.0).powi(2) - mf * mf)).sqrt();
            p[j][m] = a * (x * p[j - 1][m] - p[j - 2][m] / a1);
        }
    }
    let mut out = vec![0.0; (jm + 1) * (jm + 1)];
    let r2 = 2f64.sqrt();
    for j in 0..=jm {
        for m in -(j as i32)..=(j as i32) {
            let ma = m.unsigned_abs() as usize;
            let v = match m.signum() {
                0 => p[j][0],
                1 => r2 * p[j][ma] * (ma as f64 * lon).cos(),
                _ => r2 * p[j][ma] * (ma as f64 * lon).sin(),
            };
            out[j * j + (m + j as i32) as usize] = v;
        }
    }
    out
}

/// Harmonic table: `values[node][harmonic_index]` for degrees up to `j_max`.
pub fn harmonic_table(quad: &SphereQuadrature, j_max: u32) -> Vec<Vec<f64>> {
    quad.nodes.iter().map(|&(c, l)| real_harmonics(j_max, c, l)).collect()
}

/// Largest `|int Y_a Y_b - delta_ab|` over degrees up to `j_max`.
pub fn orthonormality_defect(quad: &SphereQuadrature, j_max: u32) -> Result<f64> {
    if quad.degree < 2 * j_max as usize {
        return invalid(format!("quadrature degree {} below 2 j_max = {}", quad.degree, 2 * j_max));
    }
    let t = harmonic_table(quad, j_max);
    let nh = ((j_max + 1) * (j_max + 1)) as usize;
    let mut worst: f64 = 0.0;
    for a in 0..nh {
        for b in a..nh {
            let s: f64 = t.iter().zip(&quad.weights).map(|(y, w)| w * y[a] * y[b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((s - want).abs());
        }
    }
    Ok(worst)
}
