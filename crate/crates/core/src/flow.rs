//! Time-t maps of jet Hamiltonians and pullbacks along chains of such maps.
//!
//! For a jet generator `S` the equations of motion are
//! `theta' = S_r(theta)`, `r' = -grad_theta S`, `zeta' = J grad_zeta S`.
//! The angle flow is autonomous, `zeta` evolves affinely and `r` picks up terms up to quadratic
//! order in the initial `zeta`. For a fixed initial angle the time-t map is therefore
//!
//! `theta -> theta(t)`, `zeta -> z + V zeta`, `r -> c + M r + L zeta + 1/2 <zeta, Q_i zeta>`,
//!
//! which is what [`PointMap`] stores. Such maps are closed under composition.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::blocks::ZetaLayout;
use crate::error::{KamError, Result};
use crate::hamiltonian::jet::{apply_j, j_times, sector_apply, sector_scatter_add, sector_slice};
use crate::hamiltonian::{assemble_sectors, FourierBall, Jet, JetGrid, JetPoint, PerturbationModel, PointDerivs, ThetaGrid};
use rayon::prelude::*;

/// Gauss-Legendre collocation on `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Collocation {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `integ[(j, l)] = int_0^{nodes[j]} ell_l`, with `ell_l` the Lagrange basis on the nodes.
    pub integ: DMatrix<f64>,
}

impl Collocation {
    pub fn gauss_legendre(m: usize) -> Self {
        // Golub-Welsch on [-1, 1], then mapped to [0, 1].
        let jac = DMatrix::from_fn(m, m, |i, j| {
            if i + 1 == j || j + 1 == i {
                let k = i.max(j) as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = jac.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..m)
            .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let nodes: Vec<f64> = pairs.iter().map(|p| 0.5 * (p.0 + 1.0)).collect();
        let weights: Vec<f64> = pairs.iter().map(|p| 0.5 * p.1).collect();
        let lagrange = |l: usize, x: f64| -> f64 {
            (0..m)
                .filter(|&q| q != l)
                .map(|q| (x - nodes[q]) / (nodes[l] - nodes[q]))
                .product()
        };
        let integ = DMatrix::from_fn(m, m, |j, l| {
            let tj = nodes[j];
            (0..m).map(|q| tj * weights[q] * lagrange(l, tj * nodes[q])).sum()
        });
        Self { nodes, weights, integ }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSettings {
    pub nodes: usize,
    /// Relative tolerance of the fixed-point iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            nodes: 8,
            tol: 1e-14,
            max_iter: 30,
            max_halvings: 24,
        }
    }
}

/// Phase-space map of the affine-quadratic form above, at one base angle.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub theta: Vec<f64>,
    pub r_shift: DVector<f64>,
    pub r_lin: DMatrix<f64>,
    /// `n x dim`.
    pub r_zeta: DMatrix<f64>,
    /// `[i][sector]`.
    pub r_quad: Vec<Vec<DMatrix<f64>>>,
    pub z_shift: DVector<f64>,
    /// Per sector.
    pub z_lin: Vec<DMatrix<f64>>,
}

fn sector_dims(layout: &ZetaLayout) -> Vec<usize> {
    (0..layout.n_sectors()).map(|s| 2 * layout.sector_modes(s).len()).collect()
}

/// Columns of a dense `rows x dim` matrix that belong to sector `s`.
fn sector_cols(layout: &ZetaLayout, s: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let modes = layout.sector_modes(s);
    DMatrix::from_fn(m.nrows(), 2 * modes.len(), |i, j| m[(i, 2 * modes[j / 2] + j % 2)])
}

fn scatter_cols(layout: &ZetaLayout, s: usize, local: &DMatrix<f64>, out: &mut DMatrix<f64>) {
    let modes = layout.sector_modes(s);
    for i in 0..local.nrows() {
        for j in 0..local.ncols() {
            out[(i, 2 * modes[j / 2] + j % 2)] += local[(i, j)];
        }
    }
}

/// `sum_s v_s^T m_s v_s` style transposed application of a sector-diagonal matrix to a vector.
fn sector_apply_t(layout: &ZetaLayout, m: &[DMatrix<f64>], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (s, ms) in m.iter().enumerate() {
        if ms.nrows() == 0 {
            continue;
        }
        let y = ms.tr_mul(&sector_slice(layout, s, v));
        sector_scatter_add(layout, s, &y, &mut out);
    }
    out
}

/// `L V` for dense `L` (rows x dim) and sector-diagonal `V`.
fn dense_times_sectors(layout: &ZetaLayout, l: &DMatrix<f64>, v: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(l.nrows(), l.ncols());
    for (s, vs) in v.iter().enumerate() {
        if vs.nrows() == 0 {
            continue;
        }
        let local = sector_cols(layout, s, l) * vs;
        scatter_cols(layout, s, &local, &mut out);
    }
    out
}

/// `V^T H V` for dense `H` and sector-diagonal `V`.
fn sector_congruence(layout: &ZetaLayout, v: &[DMatrix<f64>], h: &DMatrix<f64>) -> DMatrix<f64> {
    let ns = layout.n_sectors();
    let idx: Vec<Vec<usize>> = (0..ns)
        .map(|s| layout.sector_modes(s).iter().flat_map(|&m| [2 * m, 2 * m + 1]).collect())
        .collect();
    let mut out = DMatrix::zeros(h.nrows(), h.ncols());
    for s in 0..ns {
        for t in 0..ns {
            let (is, it) = (&idx[s], &idx[t]);
            if is.is_empty() || it.is_empty() {
                continue;
            }
            let blk = DMatrix::from_fn(is.len(), it.len(), |a, b| h[(is[a], it[b])]);
            if blk.iter().all(|x| *x == 0.0) {
                continue;
            }
            let c = v[s].tr_mul(&(blk * &v[t]));
            for a in 0..is.len() {
                for b in 0..it.len() {
                    out[(is[a], it[b])] = c[(a, b)];
                }
            }
        }
    }
    out
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

impl PointMap {
    pub fn identity(theta: &[f64], layout: &ZetaLayout) -> Self {
        let n = theta.len();
        let dim = 2 * layout.n_modes();
        let dims = sector_dims(layout);
        let zeros: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        Self {
            theta: theta.to_vec(),
            r_shift: DVector::zeros(n),
            r_lin: DMatrix::identity(n, n),
            r_zeta: DMatrix::zeros(n, dim),
            r_quad: vec![zeros; n],
            z_shift: DVector::zeros(dim),
            z_lin: dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    /// Image of `(r, zeta)`; the image angle is `self.theta`.
    pub fn apply(&self, layout: &ZetaLayout, r: &DVector<f64>, zeta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let z = &self.z_shift + sector_apply(layout, &self.z_lin, zeta);
        let mut rr = &self.r_shift + &self.r_lin * r + &self.r_zeta * zeta;
        for (i, q) in self.r_quad.iter().enumerate() {
            rr[i] += 0.5 * zeta.dot(&sector_apply(layout, q, zeta));
        }
        (rr, z)
    }

    /// `outer o self`, where `outer` is the data of the second map at the angle `self.theta`.
    pub fn then(&self, layout: &ZetaLayout, outer: &PointMap) -> PointMap {
        let n = self.n();
        let za = &self.z_shift;
        let z_shift = &outer.z_shift + sector_apply(layout, &outer.z_lin, za);
        let z_lin: Vec<DMatrix<f64>> = outer.z_lin.iter().zip(&self.z_lin).map(|(b, a)| b * a).collect();

        let mut r_shift = &outer.r_shift + &outer.r_lin * &self.r_shift + &outer.r_zeta * za;
        let mut r_zeta = &outer.r_lin * &self.r_zeta + dense_times_sectors(layout, &outer.r_zeta, &self.z_lin);
        for i in 0..n {
            let qz = sector_apply(layout, &outer.r_quad[i], za);
            r_shift[i] += 0.5 * za.dot(&qz);
            let row = sector_apply_t(layout, &self.z_lin, &qz);
            for c in 0..row.len() {
                r_zeta[(i, c)] += row[c];
            }
        }
        let r_quad = (0..n)
            .map(|i| {
                (0..self.z_lin.len())
                    .map(|s| {
                        let va = &self.z_lin[s];
                        let mut q = va.tr_mul(&(&outer.r_quad[i][s] * va));
                        for j in 0..n {
                            q += &self.r_quad[j][s] * outer.r_lin[(i, j)];
                        }
                        q
                    })
                    .collect()
            })
            .collect();
        PointMap {
            theta: outer.theta.clone(),
            r_shift,
            r_lin: &outer.r_lin * &self.r_lin,
            r_zeta,
            r_quad,
            z_shift,
            z_lin,
        }
    }

    /// Jet of `f o self` at `r = 0`, `zeta = 0`, given the derivatives of `f` at the image point
    /// `(self.theta, self.r_shift, self.z_shift)`.
    pub fn pull_jet(&self, layout: &ZetaLayout, d: &PointDerivs) -> JetPoint {
        let grad_r = self.r_lin.tr_mul(&d.grad_r);
        let zeta = self.r_zeta.tr_mul(&d.grad_r) + sector_apply_t(layout, &self.z_lin, &d.grad_zeta);
        let zz = (0..self.z_lin.len())
            .map(|s| {
                let v = &self.z_lin[s];
                let l = sector_cols(layout, s, &self.r_zeta);
                let hrz = sector_cols(layout, s, &d.hess_rz);
                let cross = hrz.tr_mul(&l);
                let mut h = v.tr_mul(&(&d.hess_zz[s] * v)) + l.tr_mul(&(&d.hess_rr * &l));
                let vc = v.tr_mul(&cross);
                h += &vc + vc.transpose();
                for (i, q) in self.r_quad.iter().enumerate() {
                    h += &q[s] * d.grad_r[i];
                }
                h
            })
            .collect();
        JetPoint {
            theta: d.value,
            r: grad_r,
            zeta,
            zz,
        }
    }

    /// Value, `zeta`-gradient and (if `hess_full` is given) dense `zeta`-Hessian of `f o self`
    /// at `(r0, z0)`, given the derivatives of `f` at the image of that point.
    pub fn pull_point(
        &self,
        layout: &ZetaLayout,
        z0: &DVector<f64>,
        d: &PointDerivs,
        hess_full: Option<&DMatrix<f64>>,
    ) -> (f64, DVector<f64>, Option<DMatrix<f64>>) {
        let mut lt = self.r_zeta.clone();
        for (i, q) in self.r_quad.iter().enumerate() {
            let row = sector_apply(layout, q, z0);
            for c in 0..row.len() {
                lt[(i, c)] += row[c];
            }
        }
        let grad = lt.tr_mul(&d.grad_r) + sector_apply_t(layout, &self.z_lin, &d.grad_zeta);
        let hess = hess_full.map(|hf| {
            let cross = dense_times_sectors(layout, &d.hess_rz, &self.z_lin).tr_mul(&lt);
            let mut h = sector_congruence(layout, &self.z_lin, hf) + lt.tr_mul(&(&d.hess_rr * &lt));
            h += &cross + cross.transpose();
            for (i, q) in self.r_quad.iter().enumerate() {
                h += assemble_sectors(layout, q) * d.grad_r[i];
            }
            h
        });
        (d.value, grad, hess)
    }

    fn max_abs(&self) -> f64 {
        let mut m = self.r_shift.amax().max(max_abs(&self.r_lin)).max(max_abs(&self.r_zeta));
        m = m.max(self.z_shift.amax());
        for q in self.r_quad.iter().flatten().chain(&self.z_lin) {
            m = m.max(max_abs(q));
        }
        m
    }

    fn diff(&self, o: &PointMap) -> f64 {
        let mut m = (&self.r_shift - &o.r_shift).amax();
        m = m.max(max_abs(&(&self.r_lin - &o.r_lin)));
        m = m.max(max_abs(&(&self.r_zeta - &o.r_zeta)));
        m = m.max((&self.z_shift - &o.z_shift).amax());
        for (a, b) in self.r_quad.iter().flatten().zip(o.r_quad.iter().flatten()) {
            m = m.max(max_abs(&(a - b)));
        }
        for (a, b) in self.z_lin.iter().zip(&o.z_lin) {
            m = m.max(max_abs(&(a - b)));
        }
        m
    }
}

/// Hamiltonian flow of a real jet.
#[derive(Clone, Debug)]
pub struct JetFlow {
    generator: Jet,
    coll: Collocation,
    settings: FlowSettings,
    /// Bound on the size of the linearised vector field; caps the step length.
    rate: f64,
}

impl JetFlow {
    pub fn new(generator: &Jet, settings: FlowSettings) -> Result<Self> {
        if settings.nodes == 0 {
            return Err(KamError::InvalidInput("collocation needs at least one node".into()));
        }
        let ball = generator.ball();
        let rate = (0..ball.len())
            .map(|k| {
                let zz = generator.zz[k]
                    .sectors()
                    .iter()
                    .flat_map(|m| m.row_iter().map(|r| r.iter().map(|x| x.norm()).sum::<f64>()).collect::<Vec<_>>())
                    .fold(0.0, f64::max);
                let r: f64 = generator.r.iter().map(|ri| ri[k].norm()).sum();
                zz + r * (1.0 + ball.norm1(k) as f64)
            })
            .sum::<f64>();
        Ok(Self {
            generator: generator.clone(),
            coll: Collocation::gauss_legendre(settings.nodes),
            settings,
            rate,
        })
    }

    pub fn generator(&self) -> &Jet {
        &self.generator
    }

    pub fn layout(&self) -> &Arc<ZetaLayout> {
        self.generator.layout()
    }

    fn angle_velocity(&self, theta: &[f64]) -> Vec<f64> {
        let g = &self.generator;
        let ball = g.ball();
        let ph = ball.phases(theta);
        let mut v = vec![0.0; g.n()];
        for k in 0..ball.len() {
            let nk = ball.neg(k);
            if nk < k {
                continue;
            }
            let e = if nk == k { ph[k] } else { ph[k] * 2.0 };
            for (i, ri) in g.r.iter().enumerate() {
                v[i] += (ri[k] * e).re;
            }
        }
        v
    }

    /// The time-`t` map at base angle `theta0`.
    pub fn point_map(&self, theta0: &[f64], t: f64) -> Result<PointMap> {
        let layout = self.layout().clone();
        let mut state = PointMap::identity(theta0, &layout);
        let mut done = 0.0;
        let cap = if self.rate > 0.0 { 0.5 / self.rate } else { f64::INFINITY };
        let mut h = if t.abs() > cap { t.signum() * cap } else { t };
        let mut halvings = 0;
        while (t - done).abs() > 1e-15 * t.abs().max(1.0) {
            let step = if (t - done).abs() < h.abs() { t - done } else { h };
            match self.substep(&state, step)? {
                Some(next) => {
                    state = next;
                    done += step;
                }
                None => {
                    halvings += 1;
                    if halvings > self.settings.max_halvings {
                        return Err(KamError::NoConvergence(format!(
                            "flow collocation did not converge from angle {theta0:?}"
                        )));
                    }
                    h *= 0.5;
                }
            }
        }
        Ok(state)
    }

    /// Full image of a phase-space point under the time-`t` map.
    pub fn apply(&self, theta: &[f64], r: &DVector<f64>, zeta: &DVector<f64>, t: f64) -> Result<(Vec<f64>, DVector<f64>, DVector<f64>)> {
        let m = self.point_map(theta, t)?;
        let (rr, z) = m.apply(self.layout(), r, zeta);
        Ok((m.theta, rr, z))
    }

    fn converged(&self, change: f64, size: f64) -> bool {
        change <= self.settings.tol * size.max(1.0)
    }

    // One collocation step of length `h` from `x0`; `None` if the iterations stall.
    fn substep(&self, x0: &PointMap, h: f64) -> Result<Option<PointMap>> {
        let lay = self.layout().clone();
        let c = &self.coll;
        let m = c.len();
        let n = x0.n();
        let w = &c.integ;

        // angle
        let v0 = self.angle_velocity(&x0.theta);
        let mut th: Vec<Vec<f64>> = c
            .nodes
            .iter()
            .map(|&tau| x0.theta.iter().zip(&v0).map(|(a, b)| a + h * tau * b).collect())
            .collect();
        let mut vel: Vec<Vec<f64>> = th.iter().map(|x| self.angle_velocity(x)).collect();
        let mut ok = false;
        for _ in 0..self.settings.max_iter {
            let mut change: f64 = 0.0;
            let mut size: f64 = 0.0;
            for j in 0..m {
                for i in 0..n {
                    let x = x0.theta[i] + h * (0..m).map(|l| w[(j, l)] * vel[l][i]).sum::<f64>();
                    change = change.max((x - th[j][i]).abs());
                    size = size.max(x.abs());
                    th[j][i] = x;
                }
            }
            vel = th.iter().map(|x| self.angle_velocity(x)).collect();
            if self.converged(change, size) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Ok(None);
        }
        let theta_end: Vec<f64> = (0..n)
            .map(|i| x0.theta[i] + h * (0..m).map(|l| c.weights[l] * vel[l][i]).sum::<f64>())
            .collect();

        let pts: Vec<(JetPoint, Vec<JetPoint>)> = th.iter().map(|x| self.generator.at_with_gradient(x)).collect();
        let b: Vec<Vec<DMatrix<f64>>> = pts.iter().map(|(p, _)| p.zz.iter().map(j_times).collect()).collect();
        let forcing: Vec<DVector<f64>> = pts.iter().map(|(p, _)| apply_j(&p.zeta)).collect();

        // zeta part: U' = B U, a' = B a + J S_zeta
        let mut us: Vec<Vec<DMatrix<f64>>> = vec![x0.z_lin.clone(); m];
        let mut az: Vec<DVector<f64>> = vec![x0.z_shift.clone(); m];
        ok = false;
        for _ in 0..self.settings.max_iter {
            let du: Vec<Vec<DMatrix<f64>>> = (0..m)
                .map(|l| b[l].iter().zip(&us[l]).map(|(bb, u)| bb * u).collect())
                .collect();
            let da: Vec<DVector<f64>> = (0..m).map(|l| sector_apply(&lay, &b[l], &az[l]) + &forcing[l]).collect();
            let mut change: f64 = 0.0;
            let mut size: f64 = 0.0;
            for j in 0..m {
                for s in 0..x0.z_lin.len() {
                    let mut u = x0.z_lin[s].clone();
                    for l in 0..m {
                        u += &du[l][s] * (h * w[(j, l)]);
                    }
                    change = change.max(max_abs(&(&u - &us[j][s])));
                    size = size.max(max_abs(&u));
                    us[j][s] = u;
                }
                let mut a = x0.z_shift.clone();
                for l in 0..m {
                    a += &da[l] * (h * w[(j, l)]);
                }
                change = change.max((&a - &az[j]).amax());
                size = size.max(a.amax());
                az[j] = a;
            }
            if self.converged(change, size) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Ok(None);
        }

        // action part: y' = -Lambda y - alpha
        let lambda: Vec<DMatrix<f64>> = pts
            .iter()
            .map(|(_, g)| DMatrix::from_fn(n, n, |i, j| g[i].r[j]))
            .collect();
        let alpha0: Vec<DVector<f64>> = (0..m)
            .map(|l| {
                let g = &pts[l].1;
                let a = &az[l];
                DVector::from_fn(n, |i, _| {
                    g[i].theta + g[i].zeta.dot(a) + 0.5 * a.dot(&sector_apply(&lay, &g[i].zz, a))
                })
            })
            .collect();
        let alpha1: Vec<DMatrix<f64>> = (0..m)
            .map(|l| {
                let g = &pts[l].1;
                let a = &az[l];
                let mut out = DMatrix::zeros(n, a.len());
                for i in 0..n {
                    let v = &g[i].zeta + sector_apply(&lay, &g[i].zz, a);
                    let row = sector_apply_t(&lay, &us[l], &v);
                    out.row_mut(i).copy_from(&row.transpose());
                }
                out
            })
            .collect();
        let alpha2: Vec<Vec<Vec<DMatrix<f64>>>> = (0..m)
            .map(|l| {
                let g = &pts[l].1;
                (0..n)
                    .map(|i| {
                        g[i].zz
                            .iter()
                            .zip(&us[l])
                            .map(|(q, u)| u.tr_mul(&(q * u)))
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut ys: Vec<PointMap> = vec![x0.clone(); m];
        let rhs = |l: usize, y: &PointMap| -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, Vec<Vec<DMatrix<f64>>>) {
            let lam = &lambda[l];
            let dp = -(lam * &y.r_shift) - &alpha0[l];
            let dg = -(lam * &y.r_lin);
            let dl = -(lam * &y.r_zeta) - &alpha1[l];
            let dq = (0..n)
                .map(|i| {
                    (0..y.z_lin.len())
                        .map(|s| {
                            let mut q = -&alpha2[l][i][s];
                            for j in 0..n {
                                q -= &y.r_quad[j][s] * lam[(i, j)];
                            }
                            q
                        })
                        .collect()
                })
                .collect();
            (dp, dg, dl, dq)
        };
        ok = false;
        for _ in 0..self.settings.max_iter {
            let d: Vec<_> = (0..m).map(|l| rhs(l, &ys[l])).collect();
            let mut change: f64 = 0.0;
            let mut size: f64 = 0.0;
            for j in 0..m {
                let mut y = x0.clone();
                for (l, (dp, dg, dl, dq)) in d.iter().enumerate() {
                    let f = h * w[(j, l)];
                    y.r_shift += dp * f;
                    y.r_lin += dg * f;
                    y.r_zeta += dl * f;
                    for (qi, dqi) in y.r_quad.iter_mut().zip(dq) {
                        for (q, dq) in qi.iter_mut().zip(dqi) {
                            *q += dq * f;
                        }
                    }
                }
                change = change.max(y.diff(&ys[j]));
                size = size.max(y.max_abs());
                ys[j] = y;
            }
            if self.converged(change, size) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Ok(None);
        }

        // endpoint
        let d: Vec<_> = (0..m).map(|l| rhs(l, &ys[l])).collect();
        let mut out = x0.clone();
        out.theta = theta_end;
        for (l, (dp, dg, dl, dq)) in d.iter().enumerate() {
            let f = h * c.weights[l];
            out.r_shift += dp * f;
            out.r_lin += dg * f;
            out.r_zeta += dl * f;
            for (qi, dqi) in out.r_quad.iter_mut().zip(dq) {
                for (q, dq) in qi.iter_mut().zip(dqi) {
                    *q += dq * f;
                }
            }
            for s in 0..out.z_lin.len() {
                out.z_lin[s] += &(&b[l][s] * &us[l][s]) * f;
            }
            out.z_shift += (sector_apply(&lay, &b[l], &az[l]) + &forcing[l]) * f;
        }
        Ok(Some(out))
    }
}

/// Maps of a chain `Phi_1 o Phi_2 o ... o Phi_k` (listed outermost first) at a base angle.
pub fn chain_map(chain: &[&JetFlow], layout: &ZetaLayout, theta0: &[f64]) -> Result<PointMap> {
    let mut m = PointMap::identity(theta0, layout);
    for flow in chain.iter().rev() {
        let outer = flow.point_map(&m.theta, 1.0)?;
        m = m.then(layout, &outer);
    }
    Ok(m)
}

/// Jet of `f o Phi_1 o ... o Phi_k`, computed pointwise on the angle grid.
pub fn pullback_grid(
    model: &dyn PerturbationModel,
    chain: &[&JetFlow],
    ball: &Arc<FourierBall>,
    grid: &ThetaGrid,
) -> Result<Jet> {
    let maps = grid_maps(chain, model.layout(), grid)?;
    pullback_from_maps(model, &maps, ball, grid)
}

/// Chain maps at every grid angle.
pub fn grid_maps(chain: &[&JetFlow], layout: &ZetaLayout, grid: &ThetaGrid) -> Result<Vec<PointMap>> {
    (0..grid.len()).into_par_iter().map(|p| chain_map(chain, layout, &grid.point(p))).collect()
}

/// Jet of `f o Psi` from precomputed grid maps of `Psi`.
pub fn pullback_from_maps(
    model: &dyn PerturbationModel,
    maps: &[PointMap],
    ball: &Arc<FourierBall>,
    grid: &ThetaGrid,
) -> Result<Jet> {
    let layout = model.layout().clone();
    let points = maps
        .par_iter()
        .map(|m| {
            let d = model.derivs(&m.theta, m.r_shift.as_slice(), &m.z_shift)?;
            Ok(m.pull_jet(&layout, &d))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Jet::from_grid(ball, &layout, grid, &JetGrid { points }))
}

/// `f o Phi^1` for a jet `f` via the Lie series `sum_k ad_S^k f / k!`, `ad_S f = {S, f}`.
///
/// Stops once a term falls below `tol` times the size of `f` (plus one).
pub fn lie_pullback(f: &Jet, generator: &Jet, grid: &ThetaGrid, tol: f64, max_terms: usize) -> Result<Jet> {
    let scale = f.max_abs().max(1.0);
    let mut out = f.clone();
    let mut term = f.clone();
    for k in 1..=max_terms {
        term = generator.bracket(&term, grid)?.scale(1.0 / k as f64);
        if term.max_abs() > 1e12 * scale {
            break;
        }
        out.axpy(1.0, &term)?;
        if term.max_abs() <= tol * scale {
            return Ok(out);
        }
    }
    Err(KamError::LieDivergence(format!(
        "Lie series did not reach {tol:e} within {max_terms} terms"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockMatrix, Flavor};
    use num_complex::Complex64;
    use crate::hamiltonian::jet::tests::random_jet;
    use crate::spectrum::ClusterSet;

    fn layout2() -> Arc<ZetaLayout> {
        ZetaLayout::single(ClusterSet::from_sizes(&[1, 1], 1.0, 3.0).unwrap())
    }

    fn full_apply(f: &JetFlow, x: &DVector<f64>, n: usize, t: f64) -> DVector<f64> {
        let th: Vec<f64> = x.rows(0, n).iter().copied().collect();
        let r = x.rows(n, n).into_owned();
        let z = x.rows(2 * n, x.len() - 2 * n).into_owned();
        let (a, b, c) = f.apply(&th, &r, &z, t).unwrap();
        let mut out = DVector::zeros(x.len());
        for i in 0..n {
            out[i] = a[i];
            out[n + i] = b[i];
        }
        out.rows_mut(2 * n, c.len()).copy_from(&c);
        out
    }

    fn poisson_matrix(n: usize, dim: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(2 * n + dim, 2 * n + dim);
        for i in 0..n {
            p[(i, n + i)] = 1.0;
            p[(n + i, i)] = -1.0;
        }
        for a in (0..dim).step_by(2) {
            p[(2 * n + a, 2 * n + a + 1)] = -1.0;
            p[(2 * n + a + 1, 2 * n + a)] = 1.0;
        }
        p
    }

    #[test]
    fn quadrature_integrates_polynomials() {
        let c = Collocation::gauss_legendre(6);
        let s: f64 = c.weights.iter().zip(&c.nodes).map(|(w, x)| w * x.powi(11)).sum();
        assert!((s - 1.0 / 12.0).abs() < 1e-15);
        for j in 0..6 {
            let t = c.nodes[j];
            let v: f64 = (0..6).map(|l| c.integ[(j, l)] * c.nodes[l].powi(4)).sum();
            assert!((v - t.powi(5) / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rotation_of_a_single_mode() {
        let lay = ZetaLayout::single(ClusterSet::from_sizes(&[1], 0.0, 1.0).unwrap());
        let ball = FourierBall::new(1, 1).unwrap();
        let lam = 1.7;
        let mut s = Jet::zero(&ball, &lay);
        let z = ball.zero_index();
        s.zz[z] = BlockMatrix::identity(&lay, Flavor::Real).scale(Complex64::new(lam, 0.0));
        let flow = JetFlow::new(&s, FlowSettings::default()).unwrap();
        let zeta = DVector::from_vec(vec![0.3, -0.8]);
        for &t in &[0.25, 1.0, 2.5] {
            let (_, _, out) = flow.apply(&[0.4], &DVector::zeros(1), &zeta, t).unwrap();
            let (c, sn) = ((lam * t).cos(), (lam * t).sin());
            let want = DVector::from_vec(vec![c * zeta[0] - sn * zeta[1], sn * zeta[0] + c * zeta[1]]);
            assert!((&out - &want).amax() < 1e-13, "{out} vs {want}");
        }
    }

    #[test]
    fn generic_flow_is_symplectic_and_conserves_energy() {
        let lay = layout2();
        let ball = FourierBall::new(2, 2).unwrap();
        let s = random_jet(&ball, &lay, 11, 0.3);
        let flow = JetFlow::new(&s, FlowSettings::default()).unwrap();
        let n = 2;
        let dim = 4;
        let x = DVector::from_vec(vec![0.3, 1.1, 0.05, -0.02, 0.1, -0.2, 0.15, 0.05]);
        let y = full_apply(&flow, &x, n, 1.0);
        let e0 = s.eval(&[x[0], x[1]], &[x[2], x[3]], &x.rows(4, 4).into_owned());
        let e1 = s.eval(&[y[0], y[1]], &[y[2], y[3]], &y.rows(4, 4).into_owned());
        assert!((e0 - e1).abs() < 1e-9, "energy drift {}", (e0 - e1).abs());

        let hstep = 1e-5;
        let mut jac = DMatrix::zeros(x.len(), x.len());
        for c in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += hstep;
            xm[c] -= hstep;
            let d = (full_apply(&flow, &xp, n, 1.0) - full_apply(&flow, &xm, n, 1.0)) / (2.0 * hstep);
            jac.set_column(c, &d);
        }
        let p = poisson_matrix(n, dim);
        let defect = max_abs(&(&jac * &p * jac.transpose() - &p));
        assert!(defect < 1e-8, "symplectic defect {defect}");
    }

    #[test]
    fn pulled_point_derivatives_match_finite_differences() {
        use crate::hamiltonian::{Caps, FTSeries, Monomial, PerturbationModel};
        let lay = layout2();
        let ball = FourierBall::new(2, 2).unwrap();
        let s = random_jet(&ball, &lay, 9, 0.3);
        let flow = JetFlow::new(&s, FlowSettings::default()).unwrap();
        let m = flow.point_map(&[0.4, -0.9], 1.0).unwrap();
        let mut f = FTSeries::zero(2, &lay, Caps { k_max: 1, d_r: 2, d_zeta: 4 });
        let terms: [(&[i32], &[u8], &[u16], f64); 6] = [
            (&[1, 0], &[2, 0], &[], 0.7),
            (&[0, 1], &[1, 1], &[], -0.4),
            (&[1, 1], &[1, 0], &[0], 0.5),
            (&[0, 0], &[0, 1], &[1, 2], 0.9),
            (&[1, 0], &[0, 0], &[0, 1, 3], 0.3),
            (&[0, 1], &[0, 0], &[0, 0, 2, 3], -0.6),
        ];
        for (k, a, z, c) in terms {
            let mono = Monomial { k: k.to_vec(), alpha: a.to_vec(), zeta: z.to_vec() };
            f.add_real_term(mono, Complex64::new(c, 0.0)).unwrap();
        }
        let r0 = DVector::from_vec(vec![0.05, -0.03]);
        let z0 = DVector::from_vec(vec![0.1, -0.2, 0.15, 0.05]);
        let pulled = |z: &DVector<f64>| {
            let (r, zz) = m.apply(&lay, &r0, z);
            f.value(&m.theta, r.as_slice(), &zz).unwrap()
        };
        let (r1, z1) = m.apply(&lay, &r0, &z0);
        let (d, hf) = f.derivs_full(&m.theta, r1.as_slice(), &z1).unwrap();
        let (v, g, h) = m.pull_point(&lay, &z0, &d, Some(&hf));
        let h = h.unwrap();
        assert!((v - pulled(&z0)).abs() < 1e-14);
        let e = 1e-4;
        for a in 0..4 {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[a] += e;
            zm[a] -= e;
            let fd = (pulled(&zp) - pulled(&zm)) / (2.0 * e);
            assert!((g[a] - fd).abs() < 1e-7, "grad {a}: {} vs {fd}", g[a]);
            for b in 0..4 {
                let shift = |x: &mut DVector<f64>, sa: f64, sb: f64| {
                    x[a] += sa * e;
                    x[b] += sb * e;
                };
                let mut pts = [z0.clone(), z0.clone(), z0.clone(), z0.clone()];
                shift(&mut pts[0], 1.0, 1.0);
                shift(&mut pts[1], 1.0, -1.0);
                shift(&mut pts[2], -1.0, 1.0);
                shift(&mut pts[3], -1.0, -1.0);
                let fd = (pulled(&pts[0]) - pulled(&pts[1]) - pulled(&pts[2]) + pulled(&pts[3])) / (4.0 * e * e);
                assert!((h[(a, b)] - fd).abs() < 1e-5, "hess {a}{b}: {} vs {fd}", h[(a, b)]);
            }
        }
    }

    #[test]
    fn group_property() {
        let lay = layout2();
        let ball = FourierBall::new(2, 2).unwrap();
        let s = random_jet(&ball, &lay, 4, 0.4);
        let flow = JetFlow::new(&s, FlowSettings::default()).unwrap();
        let th = [0.7, -1.2];
        let a = flow.point_map(&th, 0.3).unwrap();
        let b = flow.point_map(&a.theta, 0.5).unwrap();
        let ab = a.then(&lay, &b);
        let direct = flow.point_map(&th, 0.8).unwrap();
        assert!(ab.diff(&direct) < 1e-12);
        for i in 0..2 {
            assert!((ab.theta[i] - direct.theta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_pullback_of_a_jet_matches_lie_series() {
        let lay = layout2();
        let ball = FourierBall::new(2, 8).unwrap();
        let small = FourierBall::new(2, 2).unwrap();
        let s_small = random_jet(&small, &lay, 21, 0.002);
        let g_small = random_jet(&small, &lay, 22, 1.0);
        let embed = |j: &Jet| {
            let mut out = Jet::zero(&ball, &lay);
            for k in 0..small.len() {
                let t = ball.index(small.k(k)).unwrap();
                out.theta[t] = j.theta[k];
                for i in 0..2 {
                    out.r[i][t] = j.r[i][k];
                }
                out.zeta[t] = j.zeta[k].clone();
                out.zz[t] = j.zz[k].clone();
            }
            out
        };
        let (s, g) = (embed(&s_small), embed(&g_small));
        let grid = ThetaGrid::dealiased(&ball).unwrap();
        let lie = lie_pullback(&g, &s, &grid, 1e-16, 40).unwrap();
        let flow = JetFlow::new(&s, FlowSettings::default()).unwrap();
        let pulled = pullback_grid(&g, &[&flow], &ball, &grid).unwrap();
        let (low_l, _) = lie.split(4);
        let (low_p, _) = pulled.split(4);
        let err = low_l.sub(&low_p).unwrap().max_abs();
        assert!(err < 1e-10, "pullback mismatch {err}");
    }
}
