//! Problem assembly: configuration, normal form, perturbation and the structural checks.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::model::{required_degree, KgModel, KgTables, Nonlinearity};
use super::quadrature::{azimuthal_order, SphereQuadrature};
use crate::blocks::{BlockMatrix, NormParams, ZetaLayout};
use crate::error::{invalid, KamError, Result};
use crate::hamiltonian::{Caps, FTSeries, Monomial};
use crate::homological::NormalFormHam;
use crate::kam::{kappa_exponent, GatePolicy, KamProblem, KamSample};
use crate::spectrum::{build_kg_clusters, delta0_kg, kg_spectrum, AdmissibleSet, ClusterSet, KgFrequencies, ModeId, RhoGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgCaps {
    #[serde(rename = "K_max", alias = "k_max")]
    pub k_max: usize,
    #[serde(rename = "D_r", alias = "d_r")]
    pub d_r: usize,
    #[serde(rename = "D_zeta", alias = "d_zeta")]
    pub d_zeta: usize,
}

impl From<KgCaps> for Caps {
    fn from(c: KgCaps) -> Caps {
        Caps {
            k_max: c.k_max,
            d_r: c.d_r,
            d_zeta: c.d_zeta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgGridConfig {
    pub samples_per_axis: usize,
}

fn default_d() -> u32 {
    2
}

/// Problem description, read from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgConfig {
    #[serde(default = "default_d")]
    pub d: u32,
    pub m: f64,
    pub delta: f64,
    pub eps: f64,
    /// `(j, ell, action)`.
    pub admissible: Vec<(u32, u32, f64)>,
    #[serde(rename = "W_max", alias = "w_max")]
    pub w_max: u32,
    pub caps: KgCaps,
    #[serde(default)]
    pub nonlinearity: Vec<super::model::PowerTerm>,
    pub grid: KgGridConfig,
    /// Overrides the quadrature degree (default: the smallest exact one).
    #[serde(default)]
    pub quad_degree: Option<usize>,
}

/// `eps^{1/(24(2 + d*/2 beta))} <= delta0 / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCheck {
    pub exponent: f64,
    pub lhs: f64,
    pub bound: f64,
    pub satisfied: bool,
}

pub fn gate_check(eps: f64, beta: f64, d_star: f64, delta0: f64) -> GateCheck {
    let exponent = kappa_exponent(beta, d_star);
    let lhs = eps.powf(exponent);
    GateCheck {
        exponent,
        lhs,
        bound: 0.5 * delta0,
        satisfied: lhs <= 0.5 * delta0,
    }
}

#[derive(Clone, Debug)]
pub struct KgProblem {
    pub config: KgConfig,
    pub admissible: AdmissibleSet,
    pub clusters: ClusterSet,
    pub layout: Arc<ZetaLayout>,
    pub frequencies: KgFrequencies,
    /// External eigenvalues in layout order.
    pub lambdas: Vec<f64>,
    pub nonlinearity: Nonlinearity,
    pub tables: Arc<KgTables>,
    pub delta0: f64,
    pub gate: GateCheck,
    pub rho_grid: RhoGrid,
    /// True if the problem is invariant under rotations about the polar axis, in which case
    /// the external modes are split into sectors of equal signed order.
    pub zonal: bool,
}

/// Regularity exponent `beta` of the Klein-Gordon problem.
pub const KG_BETA: f64 = 0.5;

/// Validates the configuration and assembles tables, normal form data and `delta0`.
/// Under [`GatePolicy::Enforce`] a violated smallness gate is an error; otherwise it is
/// recorded in [`KgProblem::gate`].
pub fn build_problem(config: &KgConfig, gate: GatePolicy) -> Result<KgProblem> {
    if config.d != 2 {
        return Err(KamError::Unsupported(format!("quadrature is implemented on the 2-sphere only, got d = {}", config.d)));
    }
    if !(config.eps >= 0.0 && config.eps < 1.0) {
        return invalid("eps must lie in [0, 1)");
    }
    let entries: Vec<(ModeId, f64)> = config.admissible.iter().map(|&(j, ell, i)| (ModeId::new(j, ell), i)).collect();
    let admissible = AdmissibleSet::new(config.d, &entries)?;
    if admissible.max_weight() > config.w_max {
        return invalid("admissible modes must lie below W_max");
    }
    let nonlinearity = Nonlinearity {
        terms: config.nonlinearity.clone(),
    };
    nonlinearity.validate()?;
    let clusters = build_kg_clusters(config.d, config.w_max, &admissible)?;
    let zonal = nonlinearity.is_zonal() && admissible.modes().iter().all(|m| azimuthal_order(*m) == 0);
    let layout = if zonal {
        let labels: Vec<usize> = clusters.modes().iter().map(|m| (azimuthal_order(*m) + config.w_max as i32) as usize).collect();
        ZetaLayout::with_sectors(clusters.clone(), &labels)?
    } else {
        ZetaLayout::single(clusters.clone())
    };
    let lambdas = kg_spectrum(&clusters, config.d, config.m)?.lambdas().to_vec();
    let degree = config.quad_degree.unwrap_or_else(|| required_degree(&nonlinearity, config.w_max));
    let tables = Arc::new(KgTables::new(&nonlinearity, &admissible, &layout, &lambdas, SphereQuadrature::new(degree))?);
    let frequencies = KgFrequencies::new(&admissible, config.d, config.m, config.delta);
    let delta0 = delta0_kg(config.delta, config.d, config.m, &admissible)?;
    let d_star = clusters.d_star();
    let check = gate_check(config.eps, KG_BETA, d_star, delta0);
    if gate == GatePolicy::Enforce && config.eps > 0.0 && !check.satisfied {
        return Err(KamError::Gate(format!(
            "delta0 = {delta0:.3e} too small for eps = {:.3e}: eps^{:.5} = {:.5} > delta0/2",
            config.eps, check.exponent, check.lhs
        )));
    }
    let rho_grid = RhoGrid::new(admissible.len(), config.grid.samples_per_axis)?;
    Ok(KgProblem {
        config: config.clone(),
        admissible,
        clusters,
        layout,
        frequencies,
        lambdas,
        nonlinearity,
        tables,
        delta0,
        gate: check,
        rho_grid,
        zonal,
    })
}

impl KgProblem {
    pub fn n(&self) -> usize {
        self.admissible.len()
    }

    pub fn omega0(&self, rho: &[f64]) -> Result<Vec<f64>> {
        self.frequencies.omega(rho)
    }

    pub fn h0(&self, rho: &[f64]) -> Result<NormalFormHam> {
        NormalFormHam::diagonal(self.omega0(rho)?, &self.layout, &self.lambdas)
    }

    /// The perturbation at `rho`, scaled by `eps`.
    pub fn model(&self, rho: &[f64]) -> Result<KgModel> {
        KgModel::new(self.tables.clone(), &self.omega0(rho)?, self.config.eps)
    }

    pub fn sample(&self, rho: &[f64]) -> Result<KamSample> {
        Ok(KamSample {
            rho: rho.to_vec(),
            h0: self.h0(rho)?,
            f0: Some(Arc::new(self.model(rho)?)),
        })
    }

    /// The problem restricted to the given parameter values.
    pub fn kam_problem(&self, rhos: &[Vec<f64>]) -> Result<KamProblem> {
        if rhos.is_empty() {
            return invalid("no parameter samples");
        }
        let samples = rhos.iter().map(|r| self.sample(r)).collect::<Result<Vec<_>>>()?;
        Ok(KamProblem {
            f0: Arc::new(self.model(&rhos[0])?),
            samples,
            eps_nominal: self.config.eps,
            delta0: self.delta0,
            d_star: self.clusters.d_star(),
            gamma: 1.0,
        })
    }

    /// `f` at `rho` as a truncated series with the configured caps.
    pub fn perturbation_series(&self, rho: &[f64]) -> Result<FTSeries> {
        let lam = self.omega0(rho)?;
        assemble_perturbation(&self.tables, &lam, self.config.eps, self.config.caps.into())
    }

    /// `zeta zeta` Hessian of `f` at a point.
    pub fn hessian_blocks(&self, rho: &[f64], theta: &[f64], r: &[f64], zeta: &nalgebra::DVector<f64>) -> Result<BlockMatrix<f64>> {
        self.model(rho)?.hessian_blocks(theta, r, zeta)
    }
}

fn binom_real(a: f64, t: usize) -> f64 {
    (0..t).fold(1.0, |acc, i| acc * (a - i as f64) / (i as f64 + 1.0))
}

fn binom(n: usize, k: usize) -> f64 {
    binom_real(n as f64, k)
}

/// Expansion of `eps * int G(x, u) dx` into monomials in `(theta, r, p)`:
/// multisets of internal and external factors, the `r`-Taylor series of the square roots and
/// `cos^m theta` in exponentials. Coefficients are quadrature sums of `g_p` times harmonics.
pub fn assemble_perturbation(tables: &KgTables, internal_lambdas: &[f64], eps: f64, caps: Caps) -> Result<FTSeries> {
    let n = tables.n();
    let nm = tables.external.ncols();
    if internal_lambdas.len() != n {
        return invalid("one frequency per internal mode is required");
    }
    let mut f = FTSeries::zero(n, &tables.layout, caps);
    let nodes = tables.quad.len();
    let nv = n + nm;
    let column = |v: usize, i: usize| if v < n { tables.internal[(i, v)] } else { tables.external[(i, v - n)] };
    for (t, &p) in tables.powers.iter().enumerate() {
        let p = p as usize;
        let base: Vec<f64> = (0..nodes).map(|i| tables.fields[t][i] * tables.quad.weights[i]).collect();
        // depth-first over nondecreasing variable sequences
        let mut stack: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), base)];
        while let Some((seq, prod)) = stack.pop() {
            if seq.len() == p {
                let integral: f64 = prod.iter().sum();
                if integral == 0.0 {
                    continue;
                }
                let mut mult = vec![0usize; nv];
                for &v in &seq {
                    mult[v] += 1;
                }
                let multinom = (1..=p).map(|x| x as f64).product::<f64>() / mult.iter().map(|&m| (1..=m).map(|x| x as f64).product::<f64>()).product::<f64>();
                let coef = eps * integral * multinom / p as f64;
                let zeta: Vec<u16> = seq.iter().filter(|&&v| v >= n).map(|&v| (2 * (v - n)) as u16).collect();
                // internal factors: c_a^m = lambda^{-m/2} (2I)^{m/2} (1 + r/I)^{m/2} cos^m theta
                let mut parts: Vec<(Vec<i32>, Vec<u8>, f64)> = vec![(vec![0; n], vec![0; n], coef)];
                for a in 0..n {
                    let m = mult[a];
                    if m == 0 {
                        continue;
                    }
                    let (ia, la) = (tables.actions[a], internal_lambdas[a]);
                    let amp = (2.0 * ia / la).powf(0.5 * m as f64) * 0.5f64.powi(m as i32);
                    let mut next = Vec::new();
                    for (k, al, c) in &parts {
                        let used: usize = al.iter().map(|&x| x as usize).sum();
                        for tr in 0..=caps.d_r.saturating_sub(used) {
                            let cr = binom_real(0.5 * m as f64, tr) * ia.powi(-(tr as i32));
                            if cr == 0.0 {
                                continue;
                            }
                            for s in 0..=m {
                                let mut k2 = k.clone();
                                k2[a] = (m as i32) - 2 * s as i32;
                                let mut al2 = al.clone();
                                al2[a] = tr as u8;
                                next.push((k2, al2, c * amp * cr * binom(m, s)));
                            }
                        }
                    }
                    parts = next;
                }
                for (k, al, c) in parts {
                    f.add_term(Monomial::new(k, al, zeta.clone()), Complex64::new(c, 0.0))?;
                }
                continue;
            }
            let start = seq.last().copied().unwrap_or(0);
            let ext_used = seq.iter().filter(|&&v| v >= n).count();
            for v in start..nv {
                if v >= n && ext_used >= caps.d_zeta {
                    break;
                }
                let mut s2 = seq.clone();
                s2.push(v);
                let p2: Vec<f64> = prod.iter().enumerate().map(|(i, x)| x * column(v, i)).collect();
                stack.push((s2, p2));
            }
        }
    }
    Ok(f)
}

/// Fitted off-diagonal decay of a Hessian and its weighted norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// `None` when every off-diagonal block vanishes.
    pub exponent: Option<f64>,
    pub required: f64,
    pub passes: bool,
    pub norm: f64,
    pub blocks_used: usize,
    pub blocks_zero: usize,
    /// `(w_a, w_b, |M_ab|)` of the fitted blocks.
    pub points: Vec<(u32, u32, f64)>,
}

/// Fits `ln|M_ab| + beta ln(w_a w_b) = c - e ln((w + |w_a^2 - w_b^2|)/w)`, `w = min(w_a, w_b)`,
/// over nonzero blocks with `w_a != w_b`; passes if `e >= 0.9 (s/2 + 1/4)`.
pub fn verify_decay(m: &BlockMatrix<f64>, p: NormParams) -> Result<DecayReport> {
    let cs = m.layout().clusters();
    let blocks = m.block_norms();
    let top = blocks.iter().map(|b| b.2).fold(0.0, f64::max);
    let required = 0.5 * p.s + 0.25;
    let norm = m.norm_s_beta(p).value;
    let (mut xs, mut ys, mut points) = (Vec::new(), Vec::new(), Vec::new());
    let mut zero = 0;
    for &(a, b, v) in &blocks {
        let (wa, wb) = (cs.clusters()[a].weight, cs.clusters()[b].weight);
        if wa == wb {
            continue;
        }
        if v <= 1e-13 * top {
            zero += 1;
            continue;
        }
        let (fa, fb) = (wa as f64, wb as f64);
        let w = fa.min(fb);
        xs.push(((w + (fa * fa - fb * fb).abs()) / w).ln());
        ys.push(v.ln() + p.beta * (fa * fb).ln());
        points.push((wa, wb, v));
    }
    if xs.is_empty() {
        return Ok(DecayReport {
            exponent: None,
            required,
            passes: true,
            norm,
            blocks_used: 0,
            blocks_zero: zero,
            points,
        });
    }
    let distinct = {
        let mut v = xs.clone();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        v.len()
    };
    if xs.len() < 3 || distinct < 2 {
        return invalid(format!("too few nonzero off-diagonal blocks to fit ({})", xs.len()));
    }
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let e = -sxy / sxx;
    Ok(DecayReport {
        exponent: Some(e),
        required,
        passes: e >= 0.9 * required,
        norm,
        blocks_used: xs.len(),
        blocks_zero: zero,
        points,
    })
}
