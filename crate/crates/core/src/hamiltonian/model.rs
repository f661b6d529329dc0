//! Pointwise access to a perturbation through its first and second derivatives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::series::FTSeries;
use crate::blocks::ZetaLayout;
use crate::error::Result;

/// Value and derivatives of a function at one phase-space point.
///
/// `hess_zz` is kept per sector; cross-sector second derivatives are assumed to vanish at the
/// points where a model is queried.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDerivs {
    pub value: f64,
    pub grad_r: DVector<f64>,
    pub grad_zeta: DVector<f64>,
    pub hess_rr: DMatrix<f64>,
    /// `n x dim`: `d^2 f / d r_i d zeta_c`.
    pub hess_rz: DMatrix<f64>,
    pub hess_zz: Vec<DMatrix<f64>>,
}

/// A real perturbation `f(theta, r, zeta)` that can report derivatives at points.
pub trait PerturbationModel: Send + Sync {
    fn n(&self) -> usize;
    fn layout(&self) -> &Arc<ZetaLayout>;
    fn value(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<f64>;
    fn derivs(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<PointDerivs>;

    /// Derivatives together with the full `zeta` Hessian, cross-sector entries included.
    /// The default assembles the per-sector blocks, which is exact for sector-diagonal models.
    fn derivs_full(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<(PointDerivs, DMatrix<f64>)> {
        let d = self.derivs(theta, r, zeta)?;
        let full = assemble_sectors(self.layout(), &d.hess_zz);
        Ok((d, full))
    }
}

/// Dense matrix from per-sector blocks.
pub fn assemble_sectors(layout: &ZetaLayout, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let dim = 2 * layout.n_modes();
    let mut out = DMatrix::zeros(dim, dim);
    for (s, b) in blocks.iter().enumerate() {
        let modes = layout.sector_modes(s);
        let g = |i: usize| 2 * modes[i / 2] + i % 2;
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                out[(g(i), g(j))] = b[(i, j)];
            }
        }
    }
    out
}

impl PerturbationModel for FTSeries {
    fn n(&self) -> usize {
        FTSeries::n(self)
    }
    fn layout(&self) -> &Arc<ZetaLayout> {
        FTSeries::layout(self)
    }
    fn value(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<f64> {
        Ok(self.eval(theta, r, zeta))
    }
    fn derivs(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<PointDerivs> {
        let n = FTSeries::n(self);
        let dim = self.dim();
        let t: Vec<Complex64> = theta.iter().map(|&x| x.into()).collect();
        let rr: Vec<Complex64> = r.iter().map(|&x| x.into()).collect();
        let z: Vec<Complex64> = zeta.iter().map(|&x| x.into()).collect();
        let ev = |f: &FTSeries| f.eval_complex(&t, &rr, &z).re;
        let dr: Vec<FTSeries> = (0..n).map(|i| self.d_r(i)).collect();
        let dz: Vec<FTSeries> = (0..dim).map(|c| self.d_zeta(c)).collect();
        let grad_r = DVector::from_fn(n, |i, _| ev(&dr[i]));
        let grad_zeta = DVector::from_fn(dim, |c, _| ev(&dz[c]));
        let hess_rr = DMatrix::from_fn(n, n, |i, j| ev(&dr[i].d_r(j)));
        let hess_rz = DMatrix::from_fn(n, dim, |i, c| ev(&dr[i].d_zeta(c)));
        let lay = FTSeries::layout(self);
        let hess_zz = (0..lay.n_sectors())
            .map(|s| {
                let modes = lay.sector_modes(s);
                let d = 2 * modes.len();
                let g = |i: usize| 2 * modes[i / 2] + i % 2;
                DMatrix::from_fn(d, d, |i, j| ev(&dz[g(i)].d_zeta(g(j))))
            })
            .collect();
        Ok(PointDerivs {
            value: ev(self),
            grad_r,
            grad_zeta,
            hess_rr,
            hess_rz,
            hess_zz,
        })
    }
    fn derivs_full(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<(PointDerivs, DMatrix<f64>)> {
        let d = PerturbationModel::derivs(self, theta, r, zeta)?;
        let t: Vec<Complex64> = theta.iter().map(|&x| x.into()).collect();
        let rr: Vec<Complex64> = r.iter().map(|&x| x.into()).collect();
        let z: Vec<Complex64> = zeta.iter().map(|&x| x.into()).collect();
        let h = self.hess_zeta_at(&t, &rr, &z).map(|x| x.re);
        Ok((d, h))
    }
}

impl PerturbationModel for super::jet::Jet {
    fn n(&self) -> usize {
        super::jet::Jet::n(self)
    }
    fn layout(&self) -> &Arc<ZetaLayout> {
        super::jet::Jet::layout(self)
    }
    fn value(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<f64> {
        Ok(self.eval(theta, r, zeta))
    }
    fn derivs(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<PointDerivs> {
        let p = self.at(theta);
        let lay = super::jet::Jet::layout(self);
        let n = super::jet::Jet::n(self);
        let zz_zeta = super::jet::sector_apply(lay, &p.zz, zeta);
        Ok(PointDerivs {
            value: super::jet::eval_point(lay, &p, r, zeta),
            grad_r: p.r.clone(),
            grad_zeta: &p.zeta + zz_zeta,
            hess_rr: DMatrix::zeros(n, n),
            hess_rz: DMatrix::zeros(n, zeta.len()),
            hess_zz: p.zz,
        })
    }
}
