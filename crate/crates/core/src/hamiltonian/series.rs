//! Sparse Fourier-Taylor series in `(theta, r, zeta)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fourier::FourierBall;
use super::jet::{Domain, Jet, JetNorm, NormVariant};
use crate::blocks::{BlockMatrix, Flavor, ZetaLayout};
use crate::error::{invalid, KamError, Result};
use crate::spectrum::l1;

/// Exponents of one monomial `e^{i<k,theta>} r^alpha zeta_{c_1} ... zeta_{c_m}`.
///
/// `zeta` lists real coordinate indices (`2a` is `p_a`, `2a+1` is `q_a`) in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub k: Vec<i32>,
    pub alpha: Vec<u8>,
    pub zeta: Vec<u16>,
}

impl Monomial {
    pub fn new(k: Vec<i32>, alpha: Vec<u8>, mut zeta: Vec<u16>) -> Self {
        zeta.sort_unstable();
        Self { k, alpha, zeta }
    }
    pub fn r_degree(&self) -> usize {
        self.alpha.iter().map(|&a| a as usize).sum()
    }
    pub fn zeta_degree(&self) -> usize {
        self.zeta.len()
    }
    fn conj_key(&self) -> Monomial {
        Monomial {
            k: self.k.iter().map(|x| -x).collect(),
            alpha: self.alpha.clone(),
            zeta: self.zeta.clone(),
        }
    }
    /// True for the shapes a jet can hold.
    pub fn is_jet_shape(&self) -> bool {
        let (dr, dz) = (self.r_degree(), self.zeta_degree());
        (dr == 0 && dz <= 2) || (dr == 1 && dz == 0)
    }
}

/// Degree caps of a series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub k_max: usize,
    pub d_r: usize,
    pub d_zeta: usize,
}

/// Count and largest modulus of the terms dropped by a capped operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub dropped: usize,
    pub max_dropped: f64,
}

impl Truncation {
    fn note(&mut self, c: Complex64) {
        self.dropped += 1;
        self.max_dropped = self.max_dropped.max(c.norm());
    }
    fn merge(&mut self, o: Truncation) {
        self.dropped += o.dropped;
        self.max_dropped = self.max_dropped.max(o.max_dropped);
    }
}

/// Truncated Fourier-Taylor series; reality means `c(-k, alpha, zeta) = conj c(k, alpha, zeta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FTSeries {
    n: usize,
    layout: Arc<ZetaLayout>,
    caps: Caps,
    terms: BTreeMap<Monomial, Complex64>,
}

impl FTSeries {
    pub fn zero(n: usize, layout: &Arc<ZetaLayout>, caps: Caps) -> Self {
        Self {
            n,
            layout: layout.clone(),
            caps,
            terms: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        2 * self.layout.n_modes()
    }
    pub fn caps(&self) -> Caps {
        self.caps
    }
    pub fn layout(&self) -> &Arc<ZetaLayout> {
        &self.layout
    }
    pub fn terms(&self) -> &BTreeMap<Monomial, Complex64> {
        &self.terms
    }
    pub fn len(&self) -> usize {
        self.terms.len()
    }
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn fits(&self, m: &Monomial) -> bool {
        l1(&m.k) <= self.caps.k_max && m.r_degree() <= self.caps.d_r && m.zeta_degree() <= self.caps.d_zeta
    }

    fn validate(&self, m: &Monomial) -> Result<()> {
        if m.k.len() != self.n || m.alpha.len() != self.n {
            return invalid("monomial has the wrong torus dimension");
        }
        if m.zeta.iter().any(|&c| c as usize >= self.dim()) {
            return invalid("monomial refers to a missing zeta coordinate");
        }
        Ok(())
    }

    /// Adds `c` to the coefficient of `m`; returns `false` if the term exceeds the caps.
    pub fn add_term(&mut self, m: Monomial, c: Complex64) -> Result<bool> {
        self.validate(&m)?;
        if !self.fits(&m) {
            return Ok(false);
        }
        if c.norm() == 0.0 {
            return Ok(true);
        }
        let e = self.terms.entry(m).or_default();
        *e += c;
        Ok(true)
    }

    /// Adds a real term: `c e^{ik theta} + conj(c) e^{-ik theta}` (once for `k = 0`).
    pub fn add_real_term(&mut self, m: Monomial, c: Complex64) -> Result<bool> {
        if m.k.iter().all(|&x| x == 0) {
            return self.add_term(m, Complex64::new(c.re, 0.0));
        }
        let cm = m.conj_key();
        let ok = self.add_term(m, c)?;
        self.add_term(cm, c.conj())?;
        Ok(ok)
    }

    pub fn get(&self, m: &Monomial) -> Complex64 {
        self.terms.get(m).copied().unwrap_or_default()
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.norm() != 0.0);
    }

    fn check(&self, o: &FTSeries) -> Result<()> {
        if self.n != o.n || self.layout.n_modes() != o.layout.n_modes() {
            return Err(KamError::LayoutMismatch("series shapes differ".into()));
        }
        Ok(())
    }

    pub fn axpy(&mut self, c: f64, o: &FTSeries) -> Result<Truncation> {
        self.check(o)?;
        let mut t = Truncation::default();
        for (m, v) in &o.terms {
            if !self.add_term(m.clone(), v * c)? {
                t.note(*v);
            }
        }
        self.prune();
        Ok(t)
    }

    pub fn add(&self, o: &FTSeries) -> Result<FTSeries> {
        let mut out = self.clone();
        out.axpy(1.0, o)?;
        Ok(out)
    }

    pub fn sub(&self, o: &FTSeries) -> Result<FTSeries> {
        let mut out = self.clone();
        out.axpy(-1.0, o)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> FTSeries {
        let mut out = self.clone();
        for v in out.terms.values_mut() {
            *v *= c;
        }
        out.prune();
        out
    }

    /// Product, truncated to the caps of `self`.
    pub fn mul(&self, o: &FTSeries) -> Result<(FTSeries, Truncation)> {
        self.check(o)?;
        let mut out = FTSeries::zero(self.n, &self.layout, self.caps);
        let mut t = Truncation::default();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &o.terms {
                let m = Monomial::new(
                    ma.k.iter().zip(&mb.k).map(|(a, b)| a + b).collect(),
                    ma.alpha.iter().zip(&mb.alpha).map(|(a, b)| a + b).collect(),
                    ma.zeta.iter().chain(&mb.zeta).copied().collect(),
                );
                let c = ca * cb;
                if !out.add_term(m, c)? {
                    t.note(c);
                }
            }
        }
        out.prune();
        Ok((out, t))
    }

    pub fn d_theta(&self, i: usize) -> FTSeries {
        let mut out = FTSeries::zero(self.n, &self.layout, self.caps);
        for (m, c) in &self.terms {
            let ki = m.k[i];
            if ki != 0 {
                out.terms.insert(m.clone(), c * Complex64::new(0.0, ki as f64));
            }
        }
        out
    }

    pub fn d_r(&self, i: usize) -> FTSeries {
        let mut out = FTSeries::zero(self.n, &self.layout, self.caps);
        for (m, c) in &self.terms {
            let a = m.alpha[i];
            if a > 0 {
                let mut m2 = m.clone();
                m2.alpha[i] -= 1;
                out.terms.insert(m2, c * a as f64);
            }
        }
        out
    }

    pub fn d_zeta(&self, coord: usize) -> FTSeries {
        let mut out = FTSeries::zero(self.n, &self.layout, self.caps);
        for (m, c) in &self.terms {
            let mult = m.zeta.iter().filter(|&&x| x as usize == coord).count();
            if mult > 0 {
                let mut m2 = m.clone();
                let pos = m2.zeta.iter().position(|&x| x as usize == coord).expect("present");
                m2.zeta.remove(pos);
                *out.terms.entry(m2).or_default() += c * mult as f64;
            }
        }
        out
    }

    /// `{self, g} = grad_r f . grad_theta g - grad_theta f . grad_r g + <J grad_zeta f, grad_zeta g>`,
    /// truncated to the caps of `self`.
    pub fn poisson(&self, g: &FTSeries) -> Result<(FTSeries, Truncation)> {
        self.check(g)?;
        let mut out = FTSeries::zero(self.n, &self.layout, self.caps);
        let mut t = Truncation::default();
        let mut acc = |a: &FTSeries, b: &FTSeries, sign: f64, out: &mut FTSeries| -> Result<()> {
            if a.is_empty() || b.is_empty() {
                return Ok(());
            }
            let (p, tr) = a.mul(b)?;
            t.merge(tr);
            out.axpy(sign, &p)?;
            Ok(())
        };
        for i in 0..self.n {
            acc(&self.d_r(i), &g.d_theta(i), 1.0, &mut out)?;
            acc(&self.d_theta(i), &g.d_r(i), -1.0, &mut out)?;
        }
        for a in 0..self.layout.n_modes() {
            let (p, q) = (2 * a, 2 * a + 1);
            acc(&self.d_zeta(p), &g.d_zeta(q), 1.0, &mut out)?;
            acc(&self.d_zeta(q), &g.d_zeta(p), -1.0, &mut out)?;
        }
        out.prune();
        Ok((out, t))
    }

    /// Largest violation of conjugate symmetry.
    pub fn reality_defect(&self) -> f64 {
        self.terms
            .iter()
            .map(|(m, c)| (c - self.get(&m.conj_key()).conj()).norm())
            .fold(0.0, f64::max)
    }

    pub fn eval_complex(&self, theta: &[Complex64], r: &[Complex64], zeta: &[Complex64]) -> Complex64 {
        let i = Complex64::i();
        self.terms
            .iter()
            .map(|(m, c)| {
                let arg: Complex64 = m.k.iter().zip(theta).map(|(&k, t)| t * k as f64).sum();
                let mut v = c * (i * arg).exp();
                for (a, x) in m.alpha.iter().zip(r) {
                    v *= x.powu(*a as u32);
                }
                for &z in &m.zeta {
                    v *= zeta[z as usize];
                }
                v
            })
            .sum()
    }

    pub fn eval(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> f64 {
        let t: Vec<Complex64> = theta.iter().map(|&x| x.into()).collect();
        let rr: Vec<Complex64> = r.iter().map(|&x| x.into()).collect();
        let z: Vec<Complex64> = zeta.iter().map(|&x| x.into()).collect();
        self.eval_complex(&t, &rr, &z).re
    }

    /// Gradient in `zeta` at a complex point.
    pub fn grad_zeta_at(&self, theta: &[Complex64], r: &[Complex64], zeta: &[Complex64]) -> DVector<Complex64> {
        DVector::from_fn(self.dim(), |c, _| self.d_zeta(c).eval_complex(theta, r, zeta))
    }

    /// Hessian in `zeta` at a complex point.
    pub fn hess_zeta_at(&self, theta: &[Complex64], r: &[Complex64], zeta: &[Complex64]) -> DMatrix<Complex64> {
        let d = self.dim();
        let firsts: Vec<FTSeries> = (0..d).map(|c| self.d_zeta(c)).collect();
        let mut h = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = firsts[i].d_zeta(j).eval_complex(theta, r, zeta);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        h
    }

    /// Splits off the jet (Taylor polynomial affine in `r`, quadratic in `zeta`).
    pub fn extract_jet(&self, ball: &Arc<FourierBall>) -> Result<(Jet, FTSeries)> {
        if ball.n() != self.n {
            return invalid("Fourier ball has the wrong dimension");
        }
        let mut jet = Jet::zero(ball, &self.layout);
        let mut rem = FTSeries::zero(self.n, &self.layout, self.caps);
        for (m, c) in &self.terms {
            if !m.is_jet_shape() {
                rem.terms.insert(m.clone(), *c);
                continue;
            }
            let k = ball.index(&m.k).ok_or_else(|| {
                KamError::InvalidInput(format!("jet term with k = {:?} lies outside the Fourier ball", m.k))
            })?;
            match (m.r_degree(), m.zeta.as_slice()) {
                (1, _) => {
                    let i = m.alpha.iter().position(|&a| a == 1).expect("degree one");
                    jet.r[i][k] += c;
                }
                (0, []) => jet.theta[k] += c,
                (0, [a]) => jet.zeta[k][*a as usize] += c,
                (0, [a, b]) => {
                    let (a, b) = (*a as usize, *b as usize);
                    let (ma, ca, mb, cb) = (a / 2, a % 2, b / 2, b % 2);
                    let zz = &mut jet.zz[k];
                    if a == b {
                        let v = zz.get(ma, ca, ma, ca) + c * 2.0;
                        zz.set(ma, ca, ma, ca, v)?;
                    } else {
                        let v = zz.get(ma, ca, mb, cb) + c;
                        zz.set(ma, ca, mb, cb, v)?;
                        zz.set(mb, cb, ma, ca, v)?;
                    }
                }
                _ => unreachable!("jet shapes are exhausted"),
            }
        }
        Ok((jet, rem))
    }

    /// The series of a jet.
    pub fn from_jet(jet: &Jet, caps: Caps) -> Result<FTSeries> {
        let n = jet.n();
        let mut out = FTSeries::zero(n, jet.layout(), caps);
        let ball = jet.ball();
        let z = vec![0u8; n];
        for k in 0..ball.len() {
            let kv = ball.k(k).to_vec();
            out.add_term(Monomial::new(kv.clone(), z.clone(), vec![]), jet.theta[k])?;
            for i in 0..n {
                let mut a = z.clone();
                a[i] = 1;
                out.add_term(Monomial::new(kv.clone(), a, vec![]), jet.r[i][k])?;
            }
            for c in 0..jet.dim() {
                out.add_term(Monomial::new(kv.clone(), z.clone(), vec![c as u16]), jet.zeta[k][c])?;
            }
            let d = jet.dim();
            for a in 0..d {
                for b in a..d {
                    let v = jet.zz[k].get(a / 2, a % 2, b / 2, b % 2);
                    let coef = if a == b { v * 0.5 } else { v };
                    out.add_term(Monomial::new(kv.clone(), z.clone(), vec![a as u16, b as u16]), coef)?;
                }
            }
        }
        out.prune();
        Ok(out)
    }

    /// Terms grouped by wave vector.
    fn by_k(&self) -> BTreeMap<Vec<i32>, FTSeries> {
        let mut map: BTreeMap<Vec<i32>, FTSeries> = BTreeMap::new();
        for (m, c) in &self.terms {
            let mut m0 = m.clone();
            m0.k = vec![0; self.n];
            map.entry(m.k.clone())
                .or_insert_with(|| FTSeries::zero(self.n, &self.layout, self.caps))
                .terms
                .insert(m0, *c);
        }
        map
    }
}

/// Sample points in `{|r| < mu^2} x {||zeta||_s < mu}` for sampled norms.
pub fn ball_samples(layout: &ZetaLayout, n: usize, dom: &Domain, count: usize, seed: u64) -> Vec<(Vec<f64>, DVector<f64>)> {
    let cs = layout.clusters();
    let dim = 2 * layout.n_modes();
    let s = dom.params.s;
    let mu = dom.mu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![(vec![0.0; n], DVector::zeros(dim))];
    for c in 0..dim {
        let mut z = DVector::zeros(dim);
        z[c] = mu * (cs.weight(c / 2) as f64).powf(-s);
        out.push((vec![0.0; n], z));
    }
    for _ in 0..count {
        let r: Vec<f64> = (0..n).map(|_| mu * mu * rng.gen_range(-1.0..1.0)).collect();
        let mut z = DVector::from_fn(dim, |c, _| rng.gen_range(-1.0..1.0) * (cs.weight(c / 2) as f64).powf(-s));
        let nz = z
            .iter()
            .enumerate()
            .map(|(c, x)| x * x * (cs.weight(c / 2) as f64).powf(2.0 * s))
            .sum::<f64>()
            .sqrt();
        if nz > 0.0 {
            z *= mu * rng.gen_range(0.5..1.0) / nz;
        }
        out.push((r, z));
    }
    out
}

/// Sampled surrogate of `[f]` for a general series: Fourier majorant in `theta`, sampled
/// supremum over `(r, zeta)` (see [`ball_samples`]).
pub fn series_norm(f: &FTSeries, dom: &Domain, variant: NormVariant, samples: usize, seed: u64) -> JetNorm {
    let pts = ball_samples(&f.layout, f.n, dom, samples, seed);
    let ball_layout = f.layout.clone();
    let (s, beta) = (dom.params.s, dom.params.beta);
    let cs = ball_layout.clusters();
    let zero_t = vec![Complex64::default(); f.n];
    let (mut sup, mut grad, mut hess) = (0.0, 0.0, 0.0);
    for (k, part) in f.by_k() {
        let e = (dom.sigma * l1(&k) as f64).exp();
        let (mut ps, mut pg, mut ph) = (0.0f64, 0.0f64, 0.0f64);
        for (r, z) in &pts {
            let rc: Vec<Complex64> = r.iter().map(|&x| x.into()).collect();
            let zc: Vec<Complex64> = z.iter().map(|&x| x.into()).collect();
            ps = ps.max(part.eval_complex(&zero_t, &rc, &zc).norm());
            let g = part.grad_zeta_at(&zero_t, &rc, &zc);
            let gn = g
                .iter()
                .enumerate()
                .map(|(c, x)| x.norm_sqr() * (cs.weight(c / 2) as f64).powf(2.0 * (s + beta)))
                .sum::<f64>()
                .sqrt();
            pg = pg.max(gn);
            if part.caps.d_zeta >= 2 {
                let h = part.hess_zeta_at(&zero_t, &rc, &zc);
                if let Ok(bm) = BlockMatrix::from_dense(&ball_layout, Flavor::Real, &h) {
                    let v = match variant {
                        NormVariant::Beta => bm.norm_s_beta(dom.params).value,
                        NormVariant::BetaPlus => bm.norm_s_beta_plus(dom.params).value,
                    };
                    ph = ph.max(v);
                }
            }
        }
        sup += e * ps;
        grad += e * dom.mu * pg;
        hess += e * dom.mu * dom.mu * ph;
    }
    JetNorm::from_parts(sup, grad, hess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::NormParams;
    use crate::hamiltonian::fourier::ThetaGrid;
    use crate::spectrum::ClusterSet;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn layout() -> Arc<ZetaLayout> {
        ZetaLayout::single(ClusterSet::from_sizes(&[1], 0.0, 1.0).unwrap())
    }

    fn caps(k: usize) -> Caps {
        Caps { k_max: k, d_r: 2, d_zeta: 3 }
    }

    fn mono(k: &[i32], a: &[u8], z: &[u16]) -> Monomial {
        Monomial::new(k.to_vec(), a.to_vec(), z.to_vec())
    }

    fn random_series(seed: u64, k_max: i32) -> FTSeries {
        let l = ZetaLayout::single(ClusterSet::from_sizes(&[1], 0.0, 1.0).unwrap());
        let mut f = FTSeries::zero(1, &l, Caps { k_max: 8, d_r: 3, d_zeta: 4 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..6 {
            let k = rng.gen_range(-k_max..=k_max);
            let a = rng.gen_range(0..2u8);
            let nz = rng.gen_range(0..3usize);
            let z: Vec<u16> = (0..nz).map(|_| rng.gen_range(0..2u16)).collect();
            let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            f.add_real_term(mono(&[k], &[a], &z), c).unwrap();
        }
        f
    }

    #[test]
    fn bracket_of_action_and_cosine() {
        let l = layout();
        let mut f = FTSeries::zero(1, &l, caps(2));
        f.add_term(mono(&[0], &[1], &[]), 1.0.into()).unwrap();
        let mut g = FTSeries::zero(1, &l, caps(2));
        g.add_real_term(mono(&[1], &[0], &[]), 0.5.into()).unwrap();
        let (b, t) = f.poisson(&g).unwrap();
        assert_eq!(t.dropped, 0);
        let th = 0.9;
        assert!((b.eval(&[th], &[0.0], &DVector::zeros(2)) + th.sin()).abs() < 1e-14);
    }

    #[test]
    fn quadratic_forms_of_identity_commute() {
        let l = layout();
        let mut f = FTSeries::zero(1, &l, caps(2));
        f.add_term(mono(&[0], &[0], &[0, 0]), 0.5.into()).unwrap();
        f.add_term(mono(&[0], &[0], &[1, 1]), 0.5.into()).unwrap();
        let (b, _) = f.poisson(&f.clone()).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn extract_jet_shapes() {
        let l = layout();
        let ball = FourierBall::new(1, 2).unwrap();
        let mut f = FTSeries::zero(1, &l, caps(2));
        f.add_term(mono(&[0], &[2], &[]), 1.0.into()).unwrap();
        let (j, rem) = f.extract_jet(&ball).unwrap();
        assert!(j.is_zero());
        assert_eq!(rem, f);

        let mut g = FTSeries::zero(1, &l, caps(2));
        g.add_real_term(mono(&[1], &[0], &[]), 0.5.into()).unwrap();
        g.add_term(mono(&[0], &[1], &[]), 3.0.into()).unwrap();
        let (j, rem) = g.extract_jet(&ball).unwrap();
        assert!(rem.is_empty());
        let back = FTSeries::from_jet(&j, caps(2)).unwrap();
        assert!(back.sub(&g).unwrap().is_empty());

        let mut h = FTSeries::zero(1, &l, caps(2));
        h.add_term(mono(&[0], &[0], &[0, 1, 1]), 1.0.into()).unwrap();
        let (j, rem) = h.extract_jet(&ball).unwrap();
        assert!(j.is_zero());
        assert_eq!(rem, h);
    }

    #[test]
    fn jet_bracket_agrees_with_series_bracket() {
        let l = ZetaLayout::single(ClusterSet::from_sizes(&[1, 1], 1.0, 3.0).unwrap());
        let ball = FourierBall::new(2, 2).unwrap();
        let grid = ThetaGrid::dealiased(&ball).unwrap();
        let c = Caps { k_max: 2, d_r: 2, d_zeta: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mk = || {
            let mut f = FTSeries::zero(2, &l, c);
            for _ in 0..10 {
                let k = vec![rng.gen_range(-1..=1), rng.gen_range(-1..=1)];
                let shape = rng.gen_range(0..4);
                let (a, z): (Vec<u8>, Vec<u16>) = match shape {
                    0 => (vec![0, 0], vec![]),
                    1 => (vec![rng.gen_range(0..2), 0], vec![]).clone(),
                    2 => (vec![0, 0], vec![rng.gen_range(0..4)]),
                    _ => (vec![0, 0], vec![rng.gen_range(0..4), rng.gen_range(0..4)]),
                };
                let a = if a.iter().sum::<u8>() > 0 { vec![0, 1] } else { a };
                let cc = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                f.add_real_term(Monomial::new(k, a, z), cc).unwrap();
            }
            f
        };
        let (f, g) = (mk(), mk());
        let (jf, _) = f.extract_jet(&ball).unwrap();
        let (jg, _) = g.extract_jet(&ball).unwrap();
        let jb = jf.bracket(&jg, &grid).unwrap();
        let big = Caps { k_max: 4, d_r: 2, d_zeta: 4 };
        let fs = FTSeries { caps: big, ..f };
        let (sb, _) = fs.poisson(&g).unwrap();
        let (sj, rem) = {
            let mut trimmed = FTSeries::zero(2, &l, c);
            for (m, v) in sb.terms() {
                if l1(&m.k) <= 2 {
                    trimmed.add_term(m.clone(), *v).unwrap();
                }
            }
            trimmed.extract_jet(&ball).unwrap()
        };
        assert!(rem.is_empty());
        assert!(sj.sub(&jb).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn quadratic_norm_against_dense_oracle() {
        let l = ZetaLayout::single(ClusterSet::from_sizes(&[1, 1], 1.0, 3.0).unwrap());
        let mut f = FTSeries::zero(1, &l, Caps { k_max: 0, d_r: 0, d_zeta: 2 });
        // 1/2 <zeta, A zeta> with A = [[2, 1], [1, 3]] on the p-coordinates of the two modes.
        f.add_term(mono(&[0], &[0], &[0, 0]), 1.0.into()).unwrap();
        f.add_term(mono(&[0], &[0], &[0, 2]), 1.0.into()).unwrap();
        f.add_term(mono(&[0], &[0], &[2, 2]), 1.5.into()).unwrap();
        let p = NormParams::new(2.0, 0.5);
        let dom = Domain::new(0.5, 0.5, p).unwrap();
        let nrm = series_norm(&f, &dom, NormVariant::Beta, 200, 1);
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25]));
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let oracle = 0.5 * dom.mu * dom.mu * (&w * a * &w).symmetric_eigen().eigenvalues.amax();
        assert!(nrm.sup <= oracle * (1.0 + 1e-12));
        assert!(nrm.sup >= 0.5 * oracle);
        assert!(nrm.hess >= oracle);
        assert!(nrm.value >= nrm.hess);
    }

    proptest! {
        #[test]
        fn jacobi_identity(s1 in 0u64..500, s2 in 0u64..500, s3 in 0u64..500) {
            let (f, g, h) = (random_series(s1, 2), random_series(s2, 2), random_series(s3, 2));
            let br = |a: &FTSeries, b: &FTSeries| a.poisson(b).unwrap().0;
            let j = br(&br(&f, &g), &h).add(&br(&br(&g, &h), &f)).unwrap().add(&br(&br(&h, &f), &g)).unwrap();
            // caps are large enough that nothing is dropped in the inner brackets for these degrees
            let worst = j.terms().values().map(|c| c.norm()).fold(0.0, f64::max);
            prop_assert!(worst < 1e-10, "Jacobi defect {}", worst);
        }

        #[test]
        fn bracket_is_bilinear_and_antisymmetric(s1 in 0u64..500, s2 in 0u64..500) {
            let (f, g) = (random_series(s1, 2), random_series(s2, 2));
            let fg = f.poisson(&g).unwrap().0;
            let gf = g.poisson(&f).unwrap().0;
            let sum = fg.add(&gf).unwrap();
            prop_assert!(sum.terms().values().all(|c| c.norm() < 1e-12));
            let two = f.scale(2.0).poisson(&g).unwrap().0;
            prop_assert!(two.sub(&fg.scale(2.0)).unwrap().terms().values().all(|c| c.norm() < 1e-12));
            prop_assert!(fg.reality_defect() < 1e-12);
        }
    }
}
