//! The Klein-Gordon perturbation `eps * int G(x, u(theta, r, zeta)(x)) dx` evaluated by
//! quadrature, with exact pointwise derivatives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::quadrature::{harmonic_index, harmonic_table, SphereQuadrature};
use crate::blocks::{BlockMatrix, Flavor, ZetaLayout};
use crate::error::{invalid, KamError, Result};
use crate::hamiltonian::{PerturbationModel, PointDerivs};
use crate::spectrum::{AdmissibleSet, ModeId};

/// One power of the nonlinearity: `G` gains `g_p(x) u^p / p`, with
/// `g_p = constant + sum coef * Y_(j, ell)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTerm {
    pub p: u32,
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub harmonics: Vec<(u32, u32, f64)>,
}

/// `G(x, u) = sum_p g_p(x) u^p / p`, so that `g = dG/du = sum_p g_p u^(p-1)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    pub terms: Vec<PowerTerm>,
}

impl Nonlinearity {
    /// `u^p / p` with unit coefficient.
    pub fn power(p: u32) -> Self {
        Self {
            terms: vec![PowerTerm {
                p,
                constant: 1.0,
                harmonics: vec![],
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.iter().all(|t| t.constant == 0.0 && t.harmonics.iter().all(|h| h.2 == 0.0))
    }

    pub fn max_power(&self) -> u32 {
        self.terms.iter().map(|t| t.p).max().unwrap_or(0)
    }

    /// Largest harmonic degree among the coefficient fields.
    pub fn coefficient_degree(&self) -> u32 {
        self.terms.iter().flat_map(|t| t.harmonics.iter().map(|h| h.0)).max().unwrap_or(0)
    }

    /// True if every coefficient field is invariant under rotations about the polar axis.
    pub fn is_zonal(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.harmonics.iter().all(|&(j, ell, c)| c == 0.0 || ell == j + 1))
    }

    /// `G` must vanish to order three at `u = 0`.
    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if t.p < 3 {
                return invalid(format!("power {} too low: G must vanish to order 3", t.p));
            }
            for &(j, ell, _) in &t.harmonics {
                if ell < 1 || ell > 2 * j + 1 {
                    return invalid(format!("harmonic ({j},{ell}) does not exist on the 2-sphere"));
                }
            }
        }
        Ok(())
    }

    /// Values `g_p(x_i)` per term and node.
    fn fields(&self, quad: &SphereQuadrature) -> Vec<Vec<f64>> {
        let jm = self.coefficient_degree();
        let table = harmonic_table(quad, jm);
        self.terms
            .iter()
            .map(|t| {
                table
                    .iter()
                    .map(|y| t.constant + t.harmonics.iter().map(|&(j, ell, c)| c * y[harmonic_index(ModeId::new(j, ell))]).sum::<f64>())
                    .collect()
            })
            .collect()
    }
}

/// Quadrature tables shared by every parameter sample of one problem.
#[derive(Clone, Debug)]
pub struct KgTables {
    pub quad: SphereQuadrature,
    pub layout: Arc<ZetaLayout>,
    /// `nodes x n`: internal harmonics, unscaled.
    pub internal: DMatrix<f64>,
    /// `nodes x modes`: external harmonics scaled by `lambda^{-1/2}`, in layout order.
    pub external: DMatrix<f64>,
    /// Per sector: the columns of `external` it holds.
    pub sector_cols: Vec<DMatrix<f64>>,
    pub powers: Vec<u32>,
    /// `[term][node]`.
    pub fields: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
}

/// `P * W + deg g`: the polynomial degree of the integrands.
pub fn required_degree(nl: &Nonlinearity, w_max: u32) -> usize {
    (nl.max_power().max(2) * w_max + nl.coefficient_degree()) as usize
}

impl KgTables {
    pub fn new(
        nl: &Nonlinearity,
        admissible: &AdmissibleSet,
        layout: &Arc<ZetaLayout>,
        lambdas: &[f64],
        quad: SphereQuadrature,
    ) -> Result<Self> {
        let cs = layout.clusters();
        let w_max = cs.w_max().max(admissible.max_weight());
        let need = required_degree(nl, w_max);
        if quad.degree < need {
            return invalid(format!("quadrature degree {} below the required {need}", quad.degree));
        }
        if nl.terms.iter().any(|t| t.p < 2) {
            return invalid("powers below 2 are not supported");
        }
        if lambdas.len() != cs.n_modes() {
            return invalid("one eigenvalue per external mode is required");
        }
        let table = harmonic_table(&quad, w_max);
        let nodes = quad.len();
        let internal = DMatrix::from_fn(nodes, admissible.len(), |i, a| table[i][harmonic_index(admissible.modes()[a])]);
        let external = DMatrix::from_fn(nodes, cs.n_modes(), |i, b| table[i][harmonic_index(cs.modes()[b])] / lambdas[b].sqrt());
        let sector_cols = (0..layout.n_sectors())
            .map(|s| {
                let modes = layout.sector_modes(s);
                DMatrix::from_fn(nodes, modes.len(), |i, c| external[(i, modes[c])])
            })
            .collect();
        Ok(Self {
            fields: nl.fields(&quad),
            powers: nl.terms.iter().map(|t| t.p).collect(),
            quad,
            layout: layout.clone(),
            internal,
            external,
            sector_cols,
            actions: admissible.actions().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.actions.len()
    }

    /// `(G, G', G'')` times the quadrature weight, per node.
    fn weighted_g(&self, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let m = u.len();
        let (mut g0, mut g1, mut g2) = (DVector::zeros(m), DVector::zeros(m), DVector::zeros(m));
        for (t, &p) in self.powers.iter().enumerate() {
            let pf = p as f64;
            for i in 0..m {
                let c = self.fields[t][i] * self.quad.weights[i];
                if c == 0.0 {
                    continue;
                }
                let x = u[i];
                let up2 = if p >= 2 { x.powi(p as i32 - 2) } else { 0.0 };
                g0[i] += c * up2 * x * x / pf;
                g1[i] += c * up2 * x;
                g2[i] += c * (pf - 1.0) * up2;
            }
        }
        (g0, g1, g2)
    }
}

/// Exactly symmetric copy: quadrature sums of `x_a x_b g` round differently in the two orders.
fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// The perturbation at one parameter value: internal amplitudes carry `lambda_a(rho)^{-1/2}`.
#[derive(Clone, Debug)]
pub struct KgModel {
    pub tables: Arc<KgTables>,
    /// `lambda_a^{-1/2}` for the internal modes.
    pub internal_scale: Vec<f64>,
    pub eps: f64,
}

impl KgModel {
    pub fn new(tables: Arc<KgTables>, internal_lambdas: &[f64], eps: f64) -> Result<Self> {
        if internal_lambdas.len() != tables.n() {
            return invalid("one frequency per internal mode is required");
        }
        Ok(Self {
            internal_scale: internal_lambdas.iter().map(|l| 1.0 / l.sqrt()).collect(),
            tables,
            eps,
        })
    }

    /// Internal amplitudes `sqrt(2(I + r)) cos theta` and their first two `r`-derivatives.
    fn amplitudes(&self, theta: &[f64], r: &[f64]) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let n = self.tables.n();
        if theta.len() != n || r.len() != n {
            return invalid("angle or action dimension mismatch");
        }
        let (mut c, mut d1, mut d2) = (DVector::zeros(n), DVector::zeros(n), DVector::zeros(n));
        for a in 0..n {
            let x = 2.0 * (self.tables.actions[a] + r[a]);
            if !(x > 0.0) {
                return Err(KamError::InvalidInput(format!("action I + r = {} not positive", x / 2.0)));
            }
            let (s, cs) = (x.sqrt(), theta[a].cos());
            c[a] = s * cs * self.internal_scale[a];
            d1[a] = cs / s * self.internal_scale[a];
            d2[a] = -cs / (s * x) * self.internal_scale[a];
        }
        Ok((c, d1, d2))
    }

    fn field(&self, c: &DVector<f64>, zeta: &DVector<f64>) -> DVector<f64> {
        let p = DVector::from_fn(self.tables.external.ncols(), |b, _| zeta[2 * b]);
        &self.tables.internal * c + &self.tables.external * p
    }

    /// `eps * Phi^T diag(G'') Phi` on the `p` coordinates, dense in ambient order.
    pub fn hessian_dense(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (c, _, _) = self.amplitudes(theta, r)?;
        let u = self.field(&c, zeta);
        let (_, _, g2) = self.tables.weighted_g(&u);
        let e = &self.tables.external;
        let scaled = DMatrix::from_fn(e.nrows(), e.ncols(), |i, b| e[(i, b)] * g2[i]);
        let m = symmetrized(e.tr_mul(&scaled)) * self.eps;
        let dim = 2 * e.ncols();
        let mut out = DMatrix::zeros(dim, dim);
        for a in 0..e.ncols() {
            for b in 0..e.ncols() {
                out[(2 * a, 2 * b)] = m[(a, b)];
            }
        }
        Ok(out)
    }

    /// The `zeta zeta` Hessian as a block matrix.
    /// Cross-sector entries at quadrature roundoff are cleared; larger ones are an error.
    pub fn hessian_blocks(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<BlockMatrix<f64>> {
        let mut h = self.hessian_dense(theta, r, zeta)?;
        let lay = &self.tables.layout;
        if !lay.is_single() {
            let tol = 1e-12 * h.amax();
            for a in 0..h.nrows() {
                for b in 0..h.ncols() {
                    if lay.locate(a / 2).0 != lay.locate(b / 2).0 && h[(a, b)].abs() <= tol {
                        h[(a, b)] = 0.0;
                    }
                }
            }
        }
        BlockMatrix::from_dense(lay, Flavor::Real, &h)
    }
}

impl PerturbationModel for KgModel {
    fn n(&self) -> usize {
        self.tables.n()
    }
    fn layout(&self) -> &Arc<ZetaLayout> {
        &self.tables.layout
    }
    fn value(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<f64> {
        let (c, _, _) = self.amplitudes(theta, r)?;
        let (g0, _, _) = self.tables.weighted_g(&self.field(&c, zeta));
        Ok(self.eps * g0.sum())
    }
    fn derivs(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<PointDerivs> {
        let t = &self.tables;
        let n = t.n();
        let nm = t.external.ncols();
        let (c, d1, d2) = self.amplitudes(theta, r)?;
        let u = self.field(&c, zeta);
        let (g0, g1, g2) = t.weighted_g(&u);
        let e = self.eps;
        let int_g1 = t.internal.tr_mul(&g1);
        let ext_g1 = t.external.tr_mul(&g1);
        let int_w = DMatrix::from_fn(t.internal.nrows(), n, |i, a| t.internal[(i, a)] * g2[i]);
        let ii = symmetrized(t.internal.tr_mul(&int_w));
        let ie = int_w.tr_mul(&t.external);
        let grad_r = DVector::from_fn(n, |a, _| e * int_g1[a] * d1[a]);
        let mut grad_zeta = DVector::zeros(2 * nm);
        for b in 0..nm {
            grad_zeta[2 * b] = e * ext_g1[b];
        }
        let hess_rr = DMatrix::from_fn(n, n, |a, b| {
            let diag = if a == b { int_g1[a] * d2[a] } else { 0.0 };
            e * (ii[(a, b)] * d1[a] * d1[b] + diag)
        });
        let mut hess_rz = DMatrix::zeros(n, 2 * nm);
        for a in 0..n {
            for b in 0..nm {
                hess_rz[(a, 2 * b)] = e * d1[a] * ie[(a, b)];
            }
        }
        let hess_zz = t
            .sector_cols
            .iter()
            .map(|cols| {
                let w = DMatrix::from_fn(cols.nrows(), cols.ncols(), |i, b| cols[(i, b)] * g2[i]);
                let m = symmetrized(cols.tr_mul(&w));
                let d = 2 * cols.ncols();
                DMatrix::from_fn(d, d, |i, j| if i % 2 == 0 && j % 2 == 0 { e * m[(i / 2, j / 2)] } else { 0.0 })
            })
            .collect();
        Ok(PointDerivs {
            value: e * g0.sum(),
            grad_r,
            grad_zeta,
            hess_rr,
            hess_rz,
            hess_zz,
        })
    }
    fn derivs_full(&self, theta: &[f64], r: &[f64], zeta: &DVector<f64>) -> Result<(PointDerivs, DMatrix<f64>)> {
        Ok((self.derivs(theta, r, zeta)?, self.hessian_dense(theta, r, zeta)?))
    }
}
