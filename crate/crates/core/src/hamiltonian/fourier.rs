//! Finite sets of Fourier wave vectors and the uniform angle grid used for products.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result};
use crate::spectrum::{l1, lattice_ball};

/// Wave vectors `k in Z^n` with `|k|_1 <= K`, in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBall {
    n: usize,
    k_max: usize,
    ks: Vec<Vec<i32>>,
    neg: Vec<usize>,
    l1: Vec<usize>,
    /// Dense lookup over the box `|k_i| <= K`; `usize::MAX` marks vectors outside the ball.
    lookup: Vec<usize>,
}

impl FourierBall {
    pub fn new(n: usize, k_max: usize) -> Result<Arc<Self>> {
        if n == 0 || n > 4 {
            return invalid("torus dimension must be between 1 and 4");
        }
        let ks = lattice_ball(n, k_max);
        let side = 2 * k_max + 1;
        let mut lookup = vec![usize::MAX; side.pow(n as u32)];
        let boxed = |k: &[i32]| -> usize {
            k.iter()
                .rev()
                .fold(0usize, |acc, &x| acc * side + (x + k_max as i32) as usize)
        };
        for (i, k) in ks.iter().enumerate() {
            lookup[boxed(k)] = i;
        }
        let neg = ks
            .iter()
            .map(|k| {
                let m: Vec<i32> = k.iter().map(|x| -x).collect();
                lookup[boxed(&m)]
            })
            .collect();
        let l1s = ks.iter().map(|k| l1(k)).collect();
        Ok(Arc::new(Self {
            n,
            k_max,
            ks,
            neg,
            l1: l1s,
            lookup,
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k_max(&self) -> usize {
        self.k_max
    }
    pub fn len(&self) -> usize {
        self.ks.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }
    pub fn k(&self, i: usize) -> &[i32] {
        &self.ks[i]
    }
    pub fn ks(&self) -> &[Vec<i32>] {
        &self.ks
    }
    /// Index of `-k`.
    pub fn neg(&self, i: usize) -> usize {
        self.neg[i]
    }
    pub fn norm1(&self, i: usize) -> usize {
        self.l1[i]
    }
    pub fn zero_index(&self) -> usize {
        self.index(&vec![0; self.n]).expect("zero is in every ball")
    }

    pub fn index(&self, k: &[i32]) -> Option<usize> {
        if k.len() != self.n || l1(k) > self.k_max {
            return None;
        }
        let side = 2 * self.k_max + 1;
        let b = k
            .iter()
            .rev()
            .fold(0usize, |acc, &x| acc * side + (x + self.k_max as i32) as usize);
        Some(self.lookup[b]).filter(|&i| i != usize::MAX)
    }

    /// `e^{i <k, theta>}` for every wave vector, for a real angle.
    pub fn phases(&self, theta: &[f64]) -> Vec<Complex64> {
        self.ks
            .iter()
            .map(|k| {
                let a: f64 = k.iter().zip(theta).map(|(&ki, &t)| ki as f64 * t).sum();
                Complex64::from_polar(1.0, a)
            })
            .collect()
    }
}

/// Uniform product grid on `T^n` with `L` points per angle, plus FFT plans.
pub struct ThetaGrid {
    n: usize,
    l: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ThetaGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ThetaGrid(n={}, L={})", self.n, self.l)
    }
}

impl ThetaGrid {
    pub fn new(n: usize, l: usize) -> Result<Self> {
        if n == 0 || l == 0 {
            return invalid("grid needs n >= 1 and L >= 1");
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            l,
            fwd: planner.plan_fft_forward(l),
            inv: planner.plan_fft_inverse(l),
        })
    }

    /// Smallest grid on which products of two series of the ball are resolved without aliasing
    /// on the ball itself.
    pub fn dealiased(ball: &FourierBall) -> Result<Self> {
        Self::new(ball.n(), 3 * ball.k_max() + 1)
    }

    /// Smallest grid that resolves a single series of the ball.
    pub fn minimal(ball: &FourierBall) -> Result<Self> {
        Self::new(ball.n(), 2 * ball.k_max() + 2)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn l(&self) -> usize {
        self.l
    }
    pub fn len(&self) -> usize {
        self.l.pow(self.n as u32)
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut rest = idx;
        (0..self.n)
            .map(|_| {
                let j = rest % self.l;
                rest /= self.l;
                2.0 * PI * j as f64 / self.l as f64
            })
            .collect()
    }

    fn slot(&self, k: &[i32]) -> usize {
        let l = self.l as i64;
        k.iter()
            .rev()
            .fold(0usize, |acc, &x| acc * self.l + (x as i64).rem_euclid(l) as usize)
    }

    fn transform_axes(&self, buf: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let l = self.l;
        let total = buf.len();
        let mut line = vec![Complex64::default(); l];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut stride = 1;
        for _ in 0..self.n {
            let block = stride * l;
            for base in (0..total).step_by(block) {
                for off in 0..stride {
                    for (j, x) in line.iter_mut().enumerate() {
                        *x = buf[base + off + j * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (j, x) in line.iter().enumerate() {
                        buf[base + off + j * stride] = *x;
                    }
                }
            }
            stride = block;
        }
    }

    /// Values `sum_k c_k e^{i<k,theta>}` at every grid point (real part).
    pub fn synthesize(&self, ball: &FourierBall, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = vec![Complex64::default(); self.len()];
        for (i, c) in coeffs.iter().enumerate() {
            buf[self.slot(ball.k(i))] += *c;
        }
        self.transform_axes(&mut buf, &self.inv);
        buf.into_iter().map(|z| z.re).collect()
    }

    /// Complex values of the synthesis, without taking the real part.
    pub fn synthesize_complex(&self, ball: &FourierBall, coeffs: &[Complex64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::default(); self.len()];
        for (i, c) in coeffs.iter().enumerate() {
            buf[self.slot(ball.k(i))] += *c;
        }
        self.transform_axes(&mut buf, &self.inv);
        buf
    }

    /// Fourier coefficients on the ball of real grid values.
    pub fn analyze(&self, ball: &FourierBall, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform_axes(&mut buf, &self.fwd);
        let norm = 1.0 / self.len() as f64;
        (0..ball.len()).map(|i| buf[self.slot(ball.k(i))] * norm).collect()
    }

    pub fn analyze_complex(&self, ball: &FourierBall, values: &[Complex64]) -> Vec<Complex64> {
        let mut buf = values.to_vec();
        self.transform_axes(&mut buf, &self.fwd);
        let norm = 1.0 / self.len() as f64;
        (0..ball.len()).map(|i| buf[self.slot(ball.k(i))] * norm).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_indexing() {
        let b = FourierBall::new(2, 3).unwrap();
        assert_eq!(b.len(), 25);
        for i in 0..b.len() {
            assert_eq!(b.index(b.k(i)), Some(i));
            let m: Vec<i32> = b.k(i).iter().map(|x| -x).collect();
            assert_eq!(b.k(b.neg(i)), m.as_slice());
        }
        assert_eq!(b.index(&[3, 1]), None);
        assert_eq!(b.k(b.zero_index()), &[0, 0]);
    }

    #[test]
    fn synthesis_and_analysis_invert() {
        let b = FourierBall::new(2, 4).unwrap();
        let g = ThetaGrid::minimal(&b).unwrap();
        let mut c = vec![Complex64::default(); b.len()];
        for i in 0..b.len() {
            let k = b.k(i);
            let v = Complex64::new((k[0] as f64 * 0.3).cos(), (k[1] as f64 * 0.7).sin());
            c[i] += v;
            c[b.neg(i)] += v.conj();
        }
        let vals = g.synthesize(&b, &c);
        // direct evaluation at one grid point
        let p = g.point(7);
        let ph = b.phases(&p);
        let direct: Complex64 = c.iter().zip(&ph).map(|(a, e)| a * e).sum();
        assert!((direct.re - vals[7]).abs() < 1e-12);
        assert!(direct.im.abs() < 1e-12);
        let back = g.analyze(&b, &vals);
        for i in 0..b.len() {
            assert!((back[i] - c[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn dealiased_products_are_exact() {
        let b = FourierBall::new(1, 3).unwrap();
        let g = ThetaGrid::dealiased(&b).unwrap();
        // cos(3t) * cos(3t) = 1/2 + cos(6t)/2; only the constant survives on the ball.
        let mut c = vec![Complex64::default(); b.len()];
        c[b.index(&[3]).unwrap()] = Complex64::new(0.5, 0.0);
        c[b.index(&[-3]).unwrap()] = Complex64::new(0.5, 0.0);
        let v = g.synthesize(&b, &c);
        let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
        let out = g.analyze(&b, &sq);
        for i in 0..b.len() {
            let expect = if b.k(i) == [0] { 0.5 } else { 0.0 };
            assert!((out[i].re - expect).abs() < 1e-14 && out[i].im.abs() < 1e-14);
        }
    }
}
