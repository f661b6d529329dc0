//! Jets: functions affine in `r` and quadratic in `zeta` with trigonometric dependence on `theta`,
//!
//! `f(theta, r, zeta) = f_theta + <f_r, r> + <f_zeta, zeta> + 1/2 <f_zz zeta, zeta>`.
//!
//! Coefficients live on a Fourier ball; products are formed pointwise on a de-aliased grid.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fourier::{FourierBall, ThetaGrid};
use crate::blocks::{spectral_norm, BlockMatrix, Flavor, NormParams, ZetaLayout};
use crate::error::{KamError, Result};

/// Fourier coefficients of the four components of a jet.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    ball: Arc<FourierBall>,
    layout: Arc<ZetaLayout>,
    /// `[k]`
    pub theta: Vec<Complex64>,
    /// `[i][k]`
    pub r: Vec<Vec<Complex64>>,
    /// `[k]`, real coordinates `(p, q)` per mode.
    pub zeta: Vec<DVector<Complex64>>,
    /// `[k]`, real-flavor symmetric matrices with complex coefficients.
    pub zz: Vec<BlockMatrix<Complex64>>,
}

/// Real values of the jet components at one angle.
#[derive(Clone, Debug, PartialEq)]
pub struct JetPoint {
    pub theta: f64,
    pub r: DVector<f64>,
    pub zeta: DVector<f64>,
    /// Per sector.
    pub zz: Vec<DMatrix<f64>>,
}

impl JetPoint {
    pub fn zeros(n: usize, layout: &ZetaLayout) -> Self {
        Self {
            theta: 0.0,
            r: DVector::zeros(n),
            zeta: DVector::zeros(2 * layout.n_modes()),
            zz: (0..layout.n_sectors())
                .map(|s| {
                    let d = 2 * layout.sector_modes(s).len();
                    DMatrix::zeros(d, d)
                })
                .collect(),
        }
    }
}

/// `J v` with `J = [[0,-1],[1,0]]` on each mode.
pub fn apply_j(v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for a in (0..v.len()).step_by(2) {
        out[a] = -v[a + 1];
        out[a + 1] = v[a];
    }
    out
}

/// `J M` (row operation).
pub fn j_times(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for a in (0..m.nrows()).step_by(2) {
        for c in 0..m.ncols() {
            out[(a, c)] = -m[(a + 1, c)];
            out[(a + 1, c)] = m[(a, c)];
        }
    }
    out
}

/// Gathers the sector-local part of a global vector.
pub fn sector_slice(layout: &ZetaLayout, s: usize, v: &DVector<f64>) -> DVector<f64> {
    let modes = layout.sector_modes(s);
    DVector::from_fn(2 * modes.len(), |i, _| v[2 * modes[i / 2] + i % 2])
}

/// Scatters a sector-local vector into a global one (adding).
pub fn sector_scatter_add(layout: &ZetaLayout, s: usize, local: &DVector<f64>, out: &mut DVector<f64>) {
    let modes = layout.sector_modes(s);
    for (i, x) in local.iter().enumerate() {
        out[2 * modes[i / 2] + i % 2] += *x;
    }
}

/// Sector-diagonal matrix times a global vector.
pub fn sector_apply(layout: &ZetaLayout, m: &[DMatrix<f64>], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (s, ms) in m.iter().enumerate() {
        if ms.nrows() == 0 {
            continue;
        }
        let y = ms * sector_slice(layout, s, v);
        sector_scatter_add(layout, s, &y, &mut out);
    }
    out
}

/// Values of a jet and of its angle derivatives at every grid point.
#[derive(Clone, Debug)]
pub struct JetGrid {
    pub points: Vec<JetPoint>,
}

impl Jet {
    pub fn zero(ball: &Arc<FourierBall>, layout: &Arc<ZetaLayout>) -> Self {
        let nk = ball.len();
        let dim = 2 * layout.n_modes();
        Self {
            ball: ball.clone(),
            layout: layout.clone(),
            theta: vec![Complex64::default(); nk],
            r: vec![vec![Complex64::default(); nk]; ball.n()],
            zeta: vec![DVector::zeros(dim); nk],
            zz: vec![BlockMatrix::zeros(layout, Flavor::Real); nk],
        }
    }

    pub fn ball(&self) -> &Arc<FourierBall> {
        &self.ball
    }
    pub fn layout(&self) -> &Arc<ZetaLayout> {
        &self.layout
    }
    pub fn n(&self) -> usize {
        self.ball.n()
    }
    pub fn dim(&self) -> usize {
        2 * self.layout.n_modes()
    }

    fn check(&self, o: &Jet) -> Result<()> {
        if *self.ball != *o.ball {
            return Err(KamError::InvalidInput("jets have different Fourier caps".into()));
        }
        if !Arc::ptr_eq(&self.layout, &o.layout) && *self.layout != *o.layout {
            return Err(KamError::LayoutMismatch("jets live on different layouts".into()));
        }
        Ok(())
    }

    /// `self += c * o`.
    pub fn axpy(&mut self, c: f64, o: &Jet) -> Result<()> {
        self.check(o)?;
        for (a, b) in self.theta.iter_mut().zip(&o.theta) {
            *a += b * c;
        }
        for (ra, rb) in self.r.iter_mut().zip(&o.r) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b * c;
            }
        }
        for (a, b) in self.zeta.iter_mut().zip(&o.zeta) {
            a.axpy(Complex64::new(c, 0.0), b, Complex64::new(1.0, 0.0));
        }
        for (a, b) in self.zz.iter_mut().zip(&o.zz) {
            a.axpy(Complex64::new(c, 0.0), b)?;
        }
        Ok(())
    }

    pub fn add(&self, o: &Jet) -> Result<Jet> {
        let mut out = self.clone();
        out.axpy(1.0, o)?;
        Ok(out)
    }

    pub fn sub(&self, o: &Jet) -> Result<Jet> {
        let mut out = self.clone();
        out.axpy(-1.0, o)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Jet {
        let mut out = Jet::zero(&self.ball, &self.layout);
        out.axpy(c, self).expect("same shape");
        out
    }

    /// Largest coefficient modulus over all components.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..self.ball.len() {
            m = m.max(self.theta[k].norm());
            for ri in &self.r {
                m = m.max(ri[k].norm());
            }
            m = m.max(self.zeta[k].iter().map(|z| z.norm()).fold(0.0, f64::max));
            m = m.max(self.zz[k].max_abs());
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }

    /// Largest violation of `c(-k) = conj c(k)` and of symmetry of `f_zz`.
    pub fn reality_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for k in 0..self.ball.len() {
            let m = self.ball.neg(k);
            d = d.max((self.theta[k] - self.theta[m].conj()).norm());
            for ri in &self.r {
                d = d.max((ri[k] - ri[m].conj()).norm());
            }
            for (a, b) in self.zeta[k].iter().zip(self.zeta[m].iter()) {
                d = d.max((a - b.conj()).norm());
            }
            let diff = self.zz[k].sub(&self.zz[m].conj()).expect("same layout");
            d = d.max(diff.max_abs());
            d = d.max(self.zz[k].symmetry_defect());
        }
        d
    }

    /// Projects onto real jets: `c(k) <- (c(k) + conj c(-k)) / 2`, `f_zz <- (f_zz + f_zz^T) / 2`.
    pub fn realify(&mut self) {
        let nk = self.ball.len();
        let old = self.clone();
        for k in 0..nk {
            let m = self.ball.neg(k);
            self.theta[k] = (old.theta[k] + old.theta[m].conj()) * 0.5;
            for i in 0..self.r.len() {
                self.r[i][k] = (old.r[i][k] + old.r[i][m].conj()) * 0.5;
            }
            self.zeta[k] = (&old.zeta[k] + old.zeta[m].map(|z| z.conj())) * Complex64::new(0.5, 0.0);
            let avg = old.zz[k].add(&old.zz[m].conj()).expect("same layout");
            let sym = avg.add(&avg.transpose()).expect("same layout");
            self.zz[k] = sym.scale(Complex64::new(0.25, 0.0));
        }
    }

    /// Splits into the part with `|k|_1 <= n_cut` and the tail.
    pub fn split(&self, n_cut: usize) -> (Jet, Jet) {
        let mut low = self.clone();
        let mut high = self.clone();
        for k in 0..self.ball.len() {
            let target = if self.ball.norm1(k) <= n_cut { &mut high } else { &mut low };
            target.clear_mode(k);
        }
        (low, high)
    }

    fn clear_mode(&mut self, k: usize) {
        self.theta[k] = Complex64::default();
        for ri in &mut self.r {
            ri[k] = Complex64::default();
        }
        self.zeta[k].fill(Complex64::default());
        for m in self.zz[k].sectors_mut() {
            m.fill(Complex64::default());
        }
    }

    /// Largest coefficient with `|k|_1 <= n_cut`.
    pub fn max_abs_within(&self, n_cut: usize) -> f64 {
        self.split(n_cut).0.max_abs()
    }

    /// Angle average: the `k = 0` components.
    pub fn mean(&self) -> (f64, Vec<f64>, DVector<f64>, BlockMatrix<f64>) {
        let z = self.ball.zero_index();
        (
            self.theta[z].re,
            self.r.iter().map(|ri| ri[z].re).collect(),
            self.zeta[z].map(|c| c.re),
            self.zz[z].re(),
        )
    }

    /// `d/d theta_i`.
    pub fn d_theta(&self, i: usize) -> Jet {
        let mut out = self.clone();
        for k in 0..self.ball.len() {
            let f = Complex64::new(0.0, self.ball.k(k)[i] as f64);
            out.theta[k] *= f;
            for ri in &mut out.r {
                ri[k] *= f;
            }
            out.zeta[k] *= f;
            out.zz[k] = out.zz[k].scale(f);
        }
        out
    }

    /// Sets the jet from a constant (angle independent) normal-form-like quadratic part.
    pub fn set_constant(&mut self, theta: f64, r: &[f64], zeta: &DVector<f64>, zz: &BlockMatrix<f64>) {
        let z = self.ball.zero_index();
        self.theta[z] = Complex64::new(theta, 0.0);
        for (i, v) in r.iter().enumerate() {
            self.r[i][z] = Complex64::new(*v, 0.0);
        }
        self.zeta[z] = zeta.map(|x| Complex64::new(x, 0.0));
        self.zz[z] = zz.to_c64();
    }

    /// Component values at a real angle. Assumes the jet is real.
    pub fn at(&self, theta: &[f64]) -> JetPoint {
        let ph = self.ball.phases(theta);
        self.at_with_phases(&ph, false).0
    }

    /// Component values and their angle gradients at a real angle: `(value, [d_i value])`.
    pub fn at_with_gradient(&self, theta: &[f64]) -> (JetPoint, Vec<JetPoint>) {
        let ph = self.ball.phases(theta);
        self.at_with_phases(&ph, true)
    }

    // Sums over half of the ball using `c_{-k} = conj c_k`.
    fn at_with_phases(&self, ph: &[Complex64], grad: bool) -> (JetPoint, Vec<JetPoint>) {
        let n = self.n();
        let mut out = JetPoint::zeros(n, &self.layout);
        let mut grads: Vec<JetPoint> = if grad {
            (0..n).map(|_| JetPoint::zeros(n, &self.layout)).collect()
        } else {
            Vec::new()
        };
        let add = |o: &mut JetPoint, k: usize, e: Complex64| {
            o.theta += (self.theta[k] * e).re;
            for (i, ri) in self.r.iter().enumerate() {
                o.r[i] += (ri[k] * e).re;
            }
            for (x, c) in o.zeta.iter_mut().zip(self.zeta[k].iter()) {
                *x += (c * e).re;
            }
            for (x, c) in o.zz.iter_mut().zip(self.zz[k].sectors()) {
                x.zip_apply(c, |x, y| *x += y.re * e.re - y.im * e.im);
            }
        };
        for k in 0..self.ball.len() {
            let nk = self.ball.neg(k);
            if nk < k {
                continue;
            }
            let e = if nk == k { ph[k] } else { ph[k] * 2.0 };
            add(&mut out, k, e);
            for (i, g) in grads.iter_mut().enumerate() {
                let ki = self.ball.k(k)[i];
                if ki != 0 {
                    add(g, k, e * Complex64::new(0.0, ki as f64));
                }
            }
        }
        (out, grads)
    }

    /// Value of the jet at a real point.
    pub fn eval(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> f64 {
        let p = self.at(theta);
        eval_point(&self.layout, &p, r, zeta)
    }

    pub fn to_grid(&self, grid: &ThetaGrid) -> JetGrid {
        let np = grid.len();
        let mut points: Vec<JetPoint> = (0..np).map(|_| JetPoint::zeros(self.n(), &self.layout)).collect();
        let b = &self.ball;
        for (p, v) in grid.synthesize(b, &self.theta).into_iter().enumerate() {
            points[p].theta = v;
        }
        for (i, ri) in self.r.iter().enumerate() {
            for (p, v) in grid.synthesize(b, ri).into_iter().enumerate() {
                points[p].r[i] = v;
            }
        }
        let mut buf = vec![Complex64::default(); b.len()];
        for c in 0..self.dim() {
            for k in 0..b.len() {
                buf[k] = self.zeta[k][c];
            }
            for (p, v) in grid.synthesize(b, &buf).into_iter().enumerate() {
                points[p].zeta[c] = v;
            }
        }
        for s in 0..self.layout.n_sectors() {
            let d = 2 * self.layout.sector_modes(s).len();
            for i in 0..d {
                for j in i..d {
                    for k in 0..b.len() {
                        buf[k] = self.zz[k].sectors()[s][(i, j)];
                    }
                    for (p, v) in grid.synthesize(b, &buf).into_iter().enumerate() {
                        points[p].zz[s][(i, j)] = v;
                        points[p].zz[s][(j, i)] = v;
                    }
                }
            }
        }
        JetGrid { points }
    }

    /// Truncated Fourier coefficients of grid values. The result is exactly real.
    pub fn from_grid(
        ball: &Arc<FourierBall>,
        layout: &Arc<ZetaLayout>,
        grid: &ThetaGrid,
        g: &JetGrid,
    ) -> Jet {
        let mut out = Jet::zero(ball, layout);
        let np = g.points.len();
        let mut vals = vec![0.0; np];
        let fill = |vals: &mut Vec<f64>, f: &dyn Fn(&JetPoint) -> f64| {
            for (v, p) in vals.iter_mut().zip(&g.points) {
                *v = f(p);
            }
        };
        fill(&mut vals, &|p| p.theta);
        out.theta = grid.analyze(ball, &vals);
        for i in 0..ball.n() {
            fill(&mut vals, &|p| p.r[i]);
            out.r[i] = grid.analyze(ball, &vals);
        }
        for c in 0..2 * layout.n_modes() {
            fill(&mut vals, &|p| p.zeta[c]);
            for (k, v) in grid.analyze(ball, &vals).into_iter().enumerate() {
                out.zeta[k][c] = v;
            }
        }
        for s in 0..layout.n_sectors() {
            let d = 2 * layout.sector_modes(s).len();
            for i in 0..d {
                for j in i..d {
                    fill(&mut vals, &|p| 0.5 * (p.zz[s][(i, j)] + p.zz[s][(j, i)]));
                    for (k, v) in grid.analyze(ball, &vals).into_iter().enumerate() {
                        out.zz[k].sectors_mut()[s][(i, j)] = v;
                        out.zz[k].sectors_mut()[s][(j, i)] = v;
                    }
                }
            }
        }
        out.realify();
        out
    }

    /// Poisson bracket `{self, g}` of two jets, truncated to the Fourier ball.
    ///
    /// `{f, g} = grad_r f . grad_theta g - grad_theta f . grad_r g + <J grad_zeta f, grad_zeta g>`.
    pub fn bracket(&self, g: &Jet, grid: &ThetaGrid) -> Result<Jet> {
        self.check(g)?;
        let s_grid = self.to_grid(grid);
        let g_grid = g.to_grid(grid);
        let ds: Vec<JetGrid> = (0..self.n()).map(|i| self.d_theta(i).to_grid(grid)).collect();
        let dg: Vec<JetGrid> = (0..self.n()).map(|i| g.d_theta(i).to_grid(grid)).collect();
        let points = (0..grid.len())
            .map(|p| {
                let dsp: Vec<&JetPoint> = ds.iter().map(|d| &d.points[p]).collect();
                let dgp: Vec<&JetPoint> = dg.iter().map(|d| &d.points[p]).collect();
                bracket_point(&self.layout, &s_grid.points[p], &dsp, &g_grid.points[p], &dgp)
            })
            .collect();
        Ok(Jet::from_grid(&self.ball, &self.layout, grid, &JetGrid { points }))
    }
}

/// Value of the jet with components `p` at `(r, zeta)`.
pub fn eval_point(layout: &ZetaLayout, p: &JetPoint, r: &[f64], zeta: &DVector<f64>) -> f64 {
    let mut v = p.theta;
    for (a, b) in p.r.iter().zip(r) {
        v += a * b;
    }
    v += p.zeta.dot(zeta);
    v += 0.5 * zeta.dot(&sector_apply(layout, &p.zz, zeta));
    v
}

/// Pointwise bracket of jet values; `ds[i]`, `dg[i]` hold `d/d theta_i` of the components.
pub fn bracket_point(
    layout: &ZetaLayout,
    s: &JetPoint,
    ds: &[&JetPoint],
    g: &JetPoint,
    dg: &[&JetPoint],
) -> JetPoint {
    let n = s.r.len();
    let mut out = JetPoint::zeros(n, layout);
    let js = apply_j(&s.zeta);
    out.theta = js.dot(&g.zeta);
    for i in 0..n {
        out.theta += s.r[i] * dg[i].theta - ds[i].theta * g.r[i];
        for j in 0..n {
            out.r[j] += s.r[i] * dg[i].r[j] - g.r[i] * ds[i].r[j];
        }
        out.zeta.axpy(s.r[i], &dg[i].zeta, 1.0);
        out.zeta.axpy(-g.r[i], &ds[i].zeta, 1.0);
    }
    // g_zz J s_zeta - s_zz J g_zeta
    out.zeta += sector_apply(layout, &g.zz, &js);
    out.zeta -= sector_apply(layout, &s.zz, &apply_j(&g.zeta));
    for sec in 0..layout.n_sectors() {
        let gm = &g.zz[sec];
        if gm.nrows() == 0 {
            continue;
        }
        let gjs = gm * j_times(&s.zz[sec]);
        let mut m = &gjs + gjs.transpose();
        for i in 0..n {
            m += &dg[i].zz[sec] * s.r[i];
            m -= &ds[i].zz[sec] * g.r[i];
        }
        out.zz[sec] = m;
    }
    out
}

/// The four parts of the sup-norm `[f]` of a jet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JetNorm {
    pub value: f64,
    /// `sup |f|`
    pub sup: f64,
    /// `mu sup ||grad_zeta f||_{s+beta}`
    pub grad: f64,
    /// `mu^2 sup |grad_zeta^2 f|_{s,beta}` (or the `beta+` variant).
    pub hess: f64,
}

impl JetNorm {
    pub fn max(self, o: JetNorm) -> JetNorm {
        JetNorm {
            value: self.value.max(o.value),
            sup: self.sup.max(o.sup),
            grad: self.grad.max(o.grad),
            hess: self.hess.max(o.hess),
        }
    }

    fn finish(sup: f64, grad: f64, hess: f64) -> JetNorm {
        JetNorm {
            value: sup.max(grad).max(hess),
            sup,
            grad,
            hess,
        }
    }

    pub fn from_parts(sup: f64, grad: f64, hess: f64) -> JetNorm {
        Self::finish(sup, grad, hess)
    }
}

/// Which Hessian norm enters `[f]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormVariant {
    Beta,
    BetaPlus,
}

/// Norm domain: strip width `sigma`, radius `mu`, norm exponents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub sigma: f64,
    pub mu: f64,
    pub params: NormParams,
}

impl Domain {
    pub fn new(sigma: f64, mu: f64, params: NormParams) -> Result<Self> {
        if !(sigma > 0.0 && sigma <= 1.0 && mu > 0.0 && mu <= 1.0) {
            return Err(KamError::InvalidInput(format!(
                "sigma and mu must lie in (0, 1], got {sigma}, {mu}"
            )));
        }
        Ok(Self { sigma, mu, params })
    }
}

fn coord_weights(layout: &ZetaLayout, s: usize, e: f64) -> Vec<f64> {
    let cs = layout.clusters();
    layout
        .sector_modes(s)
        .iter()
        .flat_map(|&m| {
            let w = (cs.weight(m) as f64).powf(e);
            [w, w]
        })
        .collect()
}

/// Fourier majorant of `[f]` over `T^n_sigma x {|r| < mu^2} x {||zeta||_s < mu}`; an upper
/// bound of the supremum norm. `|r|` is the max norm.
pub fn jet_norm(f: &Jet, dom: &Domain, variant: NormVariant) -> JetNorm {
    let layout = f.layout();
    let cs = layout.clusters();
    let ball = f.ball();
    let (s, beta) = (dom.params.s, dom.params.beta);
    let mu = dom.mu;
    let wneg: Vec<f64> = (0..f.dim()).map(|c| (cs.weight(c / 2) as f64).powf(-s)).collect();
    let wgr: Vec<f64> = (0..f.dim()).map(|c| (cs.weight(c / 2) as f64).powf(s + beta)).collect();
    let sector_w: Vec<(Vec<f64>, Vec<f64>)> = (0..layout.n_sectors())
        .map(|sec| (coord_weights(layout, sec, -s), coord_weights(layout, sec, s + beta)))
        .collect();
    let (mut sup, mut grad, mut hess) = (0.0, 0.0, 0.0);
    for k in 0..ball.len() {
        let m = ball.neg(k);
        if m < k {
            continue;
        }
        let mult = if m == k { 1.0 } else { 2.0 };
        let e = (dom.sigma * ball.norm1(k) as f64).exp() * mult;
        let zneg = f.zeta[k]
            .iter()
            .zip(&wneg)
            .map(|(z, w)| z.norm_sqr() * w * w)
            .sum::<f64>()
            .sqrt();
        let zgr = f.zeta[k]
            .iter()
            .zip(&wgr)
            .map(|(z, w)| z.norm_sqr() * w * w)
            .sum::<f64>()
            .sqrt();
        let (mut quad, mut lin) = (0.0f64, 0.0f64);
        for (sec, mat) in f.zz[k].sectors().iter().enumerate() {
            if mat.nrows() == 0 || mat.iter().all(|z| z.norm() == 0.0) {
                continue;
            }
            let (wl, wr) = &sector_w[sec];
            let q = DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| mat[(i, j)] * (wl[i] * wl[j]));
            quad = quad.max(spectral_norm(&q));
            let g = DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| mat[(i, j)] * (wr[i] * wl[j]));
            lin = lin.max(spectral_norm(&g));
        }
        let rsum: f64 = f.r.iter().map(|ri| ri[k].norm()).sum();
        sup += e * (f.theta[k].norm() + mu * mu * rsum + mu * zneg + 0.5 * mu * mu * quad);
        grad += e * mu * (zgr + mu * lin);
        let h = match variant {
            NormVariant::Beta => f.zz[k].norm_s_beta(dom.params).value,
            NormVariant::BetaPlus => f.zz[k].norm_s_beta_plus(dom.params).value,
        };
        hess += e * mu * mu * h;
    }
    JetNorm::finish(sup, grad, hess)
}
