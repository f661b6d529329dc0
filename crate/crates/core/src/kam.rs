//! The KAM iteration: parameter schedule, the step `(h, f) -> (h+, f+)`, the loop over steps
//! and the limit objects.
//!
//! Each retained parameter sample is iterated on its own. The perturbation at step `k` is kept
//! as `f_k = (h_0 o Psi_k - h_k - e_k) + f_0 o Psi_k`, where `Psi_k = Phi_1 o ... o Phi_k` is the
//! chain of jet flows, `e_k` the accumulated energy constant and the first bracket is a jet
//! transported by Lie series. `f_0 o Psi_k` is evaluated pointwise through the chain, which is
//! exact because jet flows act polynomially on `(r, zeta)` at every base angle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockMatrix, Flavor, NormParams, ZetaLayout};
use crate::error::{invalid, KamError, Result};
use crate::flow::{grid_maps, lie_pullback, pullback_from_maps, FlowSettings, JetFlow, PointMap};
use crate::hamiltonian::jet::{eval_point, sector_apply};
use crate::hamiltonian::series::ball_samples;
use crate::hamiltonian::{assemble_sectors, jet_norm, Domain, FourierBall, Jet, JetNorm, NormVariant, PerturbationModel, ThetaGrid};
use crate::homological::{residual, solve_jet, NormalFormHam};

/// What to do when `eps^{1/(24(2 + d*/2 beta))} <= delta0 / 2` fails.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePolicy {
    /// Refuse the schedule.
    Enforce,
    /// Keep the decay law of `kappa_j` but start it at `delta0 / 2`.
    Rescale,
}

/// Parameter sequences of the iteration, indexed by step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamSchedule {
    pub eps: Vec<f64>,
    pub kappa: Vec<f64>,
    /// One entry longer than the others.
    pub sigma: Vec<f64>,
    pub mu: Vec<f64>,
    /// `2 ln(1/eps_j) / (sigma_j - sigma_{j+1})` before rounding and capping.
    pub n_raw: Vec<f64>,
    #[serde(rename = "N")]
    pub n_cut: Vec<usize>,
    #[serde(rename = "M_const")]
    pub m_const: f64,
    #[serde(rename = "C_star")]
    pub c_star: f64,
    pub beta: f64,
    pub d_star: f64,
    pub delta0: f64,
    pub gate: GatePolicy,
    pub k_max: usize,
}

/// `1 / (24 (2 + d*/(2 beta)))`.
pub fn kappa_exponent(beta: f64, d_star: f64) -> f64 {
    1.0 / (24.0 * (2.0 + d_star / (2.0 * beta)))
}

/// `C*` with `1/C* = 2 sum_j j^{-2} = pi^2 / 3`.
pub const C_STAR: f64 = 3.0 / (std::f64::consts::PI * std::f64::consts::PI);

impl KamSchedule {
    /// Sequences for steps `0..=j_max`, with the smallest step constant `M` that keeps
    /// `2 mu_{j+1} <= mu_j`.
    pub fn new(
        eps0: f64,
        sigma0: f64,
        mu0: f64,
        beta: f64,
        d_star: f64,
        delta0: f64,
        j_max: usize,
        gate: GatePolicy,
        k_max: usize,
    ) -> Result<Self> {
        if !(eps0 > 0.0 && eps0 < 1.0) {
            return invalid(format!("eps0 must lie in (0, 1), got {eps0}"));
        }
        if !(sigma0 > 0.0 && sigma0 <= 1.0 && mu0 > 0.0 && mu0 <= 1.0) {
            return invalid("sigma0 and mu0 must lie in (0, 1]");
        }
        if !(beta > 0.0 && d_star >= 0.0 && delta0 > 0.0) {
            return invalid("beta and delta0 must be positive, d* non-negative");
        }
        let e = kappa_exponent(beta, d_star);
        if gate == GatePolicy::Enforce && eps0.powf(e) > delta0 / 2.0 {
            return Err(KamError::Gate(format!(
                "delta0 = {delta0} too small for eps = {eps0}: eps^{e:.5} = {:.5} > delta0/2",
                eps0.powf(e)
            )));
        }
        let len = j_max + 1;
        let mut eps = vec![eps0];
        for j in 1..=len {
            eps.push(eps[j - 1].powf(1.25));
        }
        let mut sigma = vec![sigma0];
        for j in 1..=len {
            sigma.push(sigma[j - 1] - C_STAR * sigma0 / (j * j) as f64);
        }
        let kappa = (0..len)
            .map(|j| match gate {
                GatePolicy::Enforce => eps[j].powf(e),
                GatePolicy::Rescale => 0.5 * delta0 * (eps[j] / eps0).powf(e),
            })
            .collect();
        let n_raw: Vec<f64> = (0..len).map(|j| 2.0 * (1.0 / eps[j]).ln() / (sigma[j] - sigma[j + 1])).collect();
        let n_cut = n_raw.iter().map(|&x| (x.ceil() as usize).clamp(1, k_max)).collect();
        let mut out = Self {
            eps: eps[..len].to_vec(),
            kappa,
            sigma,
            mu: vec![mu0; len],
            n_raw,
            n_cut,
            m_const: 0.0,
            c_star: C_STAR,
            beta,
            d_star,
            delta0,
            gate,
            k_max,
        };
        out.set_step_constant(out.min_step_constant());
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    fn eps_at(&self, j: usize) -> f64 {
        self.eps[0].powf(1.25f64.powi(j as i32))
    }

    /// Smallest `M` with `2 mu_{j+1} <= mu_j` for all `j`.
    pub fn min_step_constant(&self) -> f64 {
        let (e0, e1) = (self.eps[0], self.eps_at(1));
        let mu0 = self.mu[0];
        (4.0 * e1 / (e0.powf(1.2) * mu0.powi(3))).max(4.0 * e1.powf(0.25))
    }

    /// Fixes `M` (raised to the minimum if needed) and recomputes `mu_j` for `j >= 1`.
    pub fn set_step_constant(&mut self, m: f64) {
        let m = m.max(self.min_step_constant());
        self.m_const = m;
        let e0 = self.eps[0];
        for j in 1..self.mu.len() {
            self.mu[j] = (self.eps[j] / ((2.0 * m).powi(j as i32) * e0.powf(1.2))).powf(1.0 / 3.0);
        }
    }

    /// `mu_{j}` for any step, including one past the end.
    pub fn mu_at(&self, j: usize) -> f64 {
        if j == 0 {
            return self.mu[0];
        }
        (self.eps_at(j) / ((2.0 * self.m_const).powi(j as i32) * self.eps[0].powf(1.2))).powf(1.0 / 3.0)
    }

    /// `eps_j` for any step, including one past the end.
    pub fn eps_target(&self, j: usize) -> f64 {
        self.eps_at(j)
    }

    /// Largest defect of the defining relations.
    pub fn identity_defect(&self) -> f64 {
        let e = kappa_exponent(self.beta, self.d_star);
        let mut d: f64 = 0.0;
        for j in 1..self.len() {
            d = d.max((self.eps[j] - self.eps[j - 1].powf(1.25)).abs() / self.eps[j]);
            d = d.max(((self.sigma[j - 1] - self.sigma[j]) - C_STAR * self.sigma[0] / (j * j) as f64).abs());
            if 2.0 * self.mu[j] > self.mu[j - 1] * (1.0 + 1e-14) {
                d = d.max(2.0 * self.mu[j] / self.mu[j - 1] - 1.0);
            }
        }
        for j in 0..self.len() {
            let want = match self.gate {
                GatePolicy::Enforce => self.eps[j].powf(e),
                GatePolicy::Rescale => 0.5 * self.delta0 * (self.eps[j] / self.eps[0]).powf(e),
            };
            d = d.max((self.kappa[j] - want).abs());
        }
        d
    }

    /// The three terms of the step bound with unit constant, relative to `[f]`.
    pub fn step_bound_terms(&self, j: usize, n: usize, gamma: f64, f_norm: f64) -> [f64; 3] {
        let gap = self.sigma[j] - self.sigma[j + 1];
        let nn = self.n_cut[j] as f64;
        let (mu, mu1) = (self.mu_at(j), self.mu_at(j + 1));
        [
            (-0.5 * gap * nn).exp() / gap.powi(n as i32),
            (mu1 / mu).powi(3),
            nn.powf(1.0 + self.d_star / gamma) / (self.kappa[j].powf(2.0 + self.d_star / (2.0 * self.beta)) * mu * mu * gap.powi(n as i32 + 1))
                * f_norm,
        ]
    }
}

/// Free-function form of [`KamSchedule::new`].
pub fn make_schedule(
    eps0: f64,
    sigma0: f64,
    mu0: f64,
    beta: f64,
    d_star: f64,
    delta0: f64,
    j_max: usize,
    gate: GatePolicy,
    k_max: usize,
) -> Result<KamSchedule> {
    KamSchedule::new(eps0, sigma0, mu0, beta, d_star, delta0, j_max, gate, k_max)
}

/// One parameter sample of a problem.
#[derive(Clone)]
pub struct KamSample {
    pub rho: Vec<f64>,
    pub h0: NormalFormHam,
    /// Replaces the problem's perturbation for this sample.
    pub f0: Option<Arc<dyn PerturbationModel>>,
}

/// `h_0(rho) + f_0` over a set of parameter samples.
#[derive(Clone)]
pub struct KamProblem {
    pub f0: Arc<dyn PerturbationModel>,
    pub samples: Vec<KamSample>,
    /// The size `eps` the perturbation was scaled with.
    pub eps_nominal: f64,
    pub delta0: f64,
    pub d_star: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamSettings {
    pub sigma0: f64,
    pub mu0: f64,
    pub params: NormParams,
    pub k_max: usize,
    pub gate: GatePolicy,
    /// Overrides the measured `[f_0]` as the schedule's `eps_0`.
    pub eps0: Option<f64>,
    /// Random `(r, zeta)` points of the sampled norm; the first `hess_samples` also carry Hessians.
    pub norm_samples: usize,
    pub hess_samples: usize,
    pub seed: u64,
    /// Stop once `[f_k]` falls below this.
    pub floor: f64,
    pub lie_tol: f64,
    pub lie_max_terms: usize,
    /// Exclude samples whose generator violates `[S] <= mu^2 (sigma - sigma') / 16`.
    pub exclude_on_smallness: bool,
    /// Angles at which flow displacement and pullback consistency are checked.
    pub check_angles: usize,
}

impl Default for KamSettings {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            mu0: 0.1,
            params: NormParams::new(2.0, 0.5),
            k_max: 6,
            gate: GatePolicy::Rescale,
            eps0: None,
            norm_samples: 12,
            hess_samples: 3,
            seed: 0,
            floor: 1e-14,
            lie_tol: 1e-16,
            lie_max_terms: 40,
            exclude_on_smallness: false,
            check_angles: 6,
        }
    }
}

/// The iteration state of one parameter sample.
#[derive(Clone)]
pub struct SampleRun {
    pub index: usize,
    pub h: NormalFormHam,
    pub energy: f64,
    /// `h_0 o Psi_k` as a jet.
    pub transported: Jet,
    /// `Phi_1, ..., Phi_k`, outermost first.
    pub chain: Vec<JetFlow>,
    maps: Vec<PointMap>,
    /// `f_k^T`.
    pub jet: Jet,
    /// `[f_k]` on the current domain, with its jet and non-jet parts.
    pub norm: NormSplit,
    pub excluded_at: Option<usize>,
    /// Jet norms of the generators, per step.
    pub generator_norms: Vec<f64>,
}

/// `[f] <= [f^T] + [f - f^T]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSplit {
    pub total: f64,
    pub jet: f64,
    pub nonjet: f64,
}

pub struct KamState {
    pub k: usize,
    pub runs: Vec<SampleRun>,
    pub ball: Arc<FourierBall>,
    pub grid: ThetaGrid,
    pub schedule: Option<KamSchedule>,
    pub total_samples: usize,
}

impl KamState {
    pub fn retained(&self) -> impl Iterator<Item = &SampleRun> {
        self.runs.iter().filter(|r| r.excluded_at.is_none())
    }
    pub fn retained_fraction(&self) -> f64 {
        self.retained().count() as f64 / self.total_samples.max(1) as f64
    }
    /// Max of `[f_k]` over retained samples.
    pub fn eps_measured(&self) -> f64 {
        self.retained().map(|r| r.norm.total).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub eps_target: f64,
    pub eps_measured: f64,
    pub eps_jet: f64,
    pub eps_nonjet: f64,
    pub kappa: Option<f64>,
    #[serde(rename = "N")]
    pub n_cut: Option<usize>,
    pub sigma: f64,
    pub mu: f64,
    pub excluded_fraction: f64,
    pub min_divisor: Option<f64>,
    pub min_divisor_ratio: Option<f64>,
    #[serde(rename = "S_norm")]
    pub s_norm: Option<f64>,
    pub smallness_ok: Option<bool>,
    pub residual: Option<f64>,
    /// `[f_k] / [f_{k-1}]^{5/4}`.
    pub contraction: Option<f64>,
    /// `|| Phi_k - id ||` at sampled points and its bound `eps^{4/5} eps_{k-1}^{1/4}`.
    pub displacement: Option<f64>,
    pub displacement_bound: Option<f64>,
    /// `|(h_0 o Psi_k)(x) - (h_0 o Psi_{k-1})(Phi_k(x))|` at sampled points.
    pub pullback_defect: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LimitObjects {
    pub omega_shift: f64,
    #[serde(rename = "A_shift")]
    pub a_shift: f64,
    /// Largest `|Re|` of the eigenvalues of `J A` over cluster blocks.
    pub stability: f64,
    pub omega_within: bool,
    pub a_within: bool,
    pub stable: bool,
    pub per_sample: Vec<SampleLimit>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLimit {
    pub index: usize,
    pub rho: Vec<f64>,
    pub omega: Vec<f64>,
    pub omega_shift: f64,
    #[serde(rename = "A_shift")]
    pub a_shift: f64,
    pub stability: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KamReport {
    pub eps_nominal: f64,
    pub eps0_measured: f64,
    pub m_measured: Option<f64>,
    pub schedule: Option<KamSchedule>,
    pub steps: Vec<StepRow>,
    pub limits: LimitObjects,
    pub retained: Vec<usize>,
    /// `ok`, `floor`, `non_contraction` or `all_excluded`.
    pub status: String,
}

impl KamProblem {
    /// The perturbation of sample `i`.
    pub fn model(&self, i: usize) -> &dyn PerturbationModel {
        self.samples[i].f0.as_deref().unwrap_or(self.f0.as_ref())
    }
}

impl KamReport {
    /// Successive `[f_k] <= [f_{k-1}]^{5/4}` on every pair of recorded steps.
    pub fn contracts(&self) -> bool {
        self.steps.iter().filter_map(|s| s.contraction).all(|c| c <= 1.0)
    }
}

fn dom(settings: &KamSettings, sigma: f64, mu: f64) -> Result<Domain> {
    Domain::new(sigma, mu, settings.params)
}

/// `(f_0 o Psi)^T + (h_0 o Psi - h - e)`.
fn current_jet(problem: &KamProblem, run: &SampleRun, ball: &Arc<FourierBall>, grid: &ThetaGrid) -> Result<Jet> {
    let mut jet = pullback_from_maps(problem.model(run.index), &run.maps, ball, grid)?;
    jet.axpy(1.0, &run.transported)?;
    let mut h = run.h.as_jet(ball);
    h.theta[ball.zero_index()] += run.energy;
    jet.axpy(-1.0, &h)?;
    Ok(jet)
}

/// Sampled `[f_0 o Psi - (f_0 o Psi)^T]` over the domain: Fourier majorant over the ball in
/// `theta`, supremum over seeded points in `(r, zeta)`.
pub fn nonjet_norm(
    model: &dyn PerturbationModel,
    maps: &[PointMap],
    ball: &FourierBall,
    grid: &ThetaGrid,
    dom: &Domain,
    samples: usize,
    hess_samples: usize,
    seed: u64,
) -> Result<JetNorm> {
    let layout = model.layout().clone();
    let n = model.n();
    let dim = 2 * layout.n_modes();
    let pts: Vec<(Vec<f64>, DVector<f64>)> = ball_samples(&layout, n, dom, samples, seed).into_iter().skip(1 + dim).collect();
    if pts.is_empty() {
        return Ok(JetNorm::default());
    }
    let hs = hess_samples.min(pts.len());
    type Cell = (f64, DVector<f64>, Option<DMatrix<f64>>);
    let cells: Vec<Vec<Cell>> = maps
        .par_iter()
        .map(|m| {
            let d0 = model.derivs(&m.theta, m.r_shift.as_slice(), &m.z_shift)?;
            let jp = m.pull_jet(&layout, &d0);
            let jzz = assemble_sectors(&layout, &jp.zz);
            pts.iter()
                .enumerate()
                .map(|(i, (r, z))| {
                    let rv = DVector::from_column_slice(r);
                    let (ri, zi) = m.apply(&layout, &rv, z);
                    let (v, g, h) = if i < hs {
                        let (d, hf) = model.derivs_full(&m.theta, ri.as_slice(), &zi)?;
                        m.pull_point(&layout, z, &d, Some(&hf))
                    } else {
                        let d = model.derivs(&m.theta, ri.as_slice(), &zi)?;
                        m.pull_point(&layout, z, &d, None)
                    };
                    let v = v - eval_point(&layout, &jp, r, z);
                    let g = g - (&jp.zeta + sector_apply(&layout, &jp.zz, z));
                    Ok((v, g, h.map(|h| h - &jzz)))
                })
                .collect::<Result<Vec<Cell>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let cs = layout.clusters();
    // sampled Hessians couple sectors; the norm only sees clusters
    let dense_layout = ZetaLayout::single(cs.clone());
    let (s, beta) = (dom.params.s, dom.params.beta);
    let wgr: Vec<f64> = (0..dim).map(|c| (cs.weight(c / 2) as f64).powf(s + beta)).collect();
    let nk = ball.len();
    let (mut sup_k, mut grad_k, mut hess_k) = (vec![0.0f64; nk], vec![0.0f64; nk], vec![0.0f64; nk]);
    for (i, _) in pts.iter().enumerate() {
        let vals: Vec<f64> = cells.iter().map(|c| c[i].0).collect();
        for (k, c) in grid.analyze(ball, &vals).iter().enumerate() {
            sup_k[k] = sup_k[k].max(c.norm());
        }
        let mut g2 = vec![0.0f64; nk];
        for c in 0..dim {
            let col: Vec<f64> = cells.iter().map(|cell| cell[i].1[c]).collect();
            if col.iter().all(|x| *x == 0.0) {
                continue;
            }
            for (k, x) in grid.analyze(ball, &col).iter().enumerate() {
                g2[k] += x.norm_sqr() * wgr[c] * wgr[c];
            }
        }
        for k in 0..nk {
            grad_k[k] = grad_k[k].max(g2[k].sqrt());
        }
        if i < hs {
            let mut mats = vec![DMatrix::<Complex64>::zeros(dim, dim); nk];
            for a in 0..dim {
                for b in a..dim {
                    let col: Vec<f64> = cells.iter().map(|cell| cell[i].2.as_ref().map_or(0.0, |h| h[(a, b)])).collect();
                    if col.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    for (k, x) in grid.analyze(ball, &col).iter().enumerate() {
                        mats[k][(a, b)] = *x;
                        mats[k][(b, a)] = *x;
                    }
                }
            }
            for (k, m) in mats.iter().enumerate() {
                if m.iter().all(|x| x.norm() == 0.0) {
                    continue;
                }
                let bm = BlockMatrix::from_dense(&dense_layout, Flavor::Real, m)?;
                hess_k[k] = hess_k[k].max(bm.norm_s_beta(dom.params).value);
            }
        }
    }
    let (mut sup, mut grad, mut hess) = (0.0, 0.0, 0.0);
    for k in 0..nk {
        let e = (dom.sigma * ball.norm1(k) as f64).exp();
        sup += e * sup_k[k];
        grad += e * dom.mu * grad_k[k];
        hess += e * dom.mu * dom.mu * hess_k[k];
    }
    Ok(JetNorm::from_parts(sup, grad, hess))
}

fn measure(problem: &KamProblem, settings: &KamSettings, run: &SampleRun, ball: &FourierBall, grid: &ThetaGrid, d: &Domain) -> Result<NormSplit> {
    let jet = jet_norm(&run.jet, d, NormVariant::Beta);
    let nj = nonjet_norm(
        problem.model(run.index),
        &run.maps,
        ball,
        grid,
        d,
        settings.norm_samples,
        settings.hess_samples,
        settings.seed ^ (run.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    )?;
    let total = JetNorm::from_parts(jet.sup + nj.sup, jet.grad + nj.grad, jet.hess + nj.hess).value;
    Ok(NormSplit {
        total,
        jet: jet.value,
        nonjet: nj.value,
    })
}

/// Initial state: every sample at step 0, `[f_0]` measured on `(sigma0, mu0)`.
pub fn initial_state(problem: &KamProblem, settings: &KamSettings) -> Result<KamState> {
    let n = problem.f0.n();
    if problem.samples.is_empty() {
        return invalid("no parameter samples");
    }
    for s in &problem.samples {
        if s.h0.n() != n || s.h0.layout().n_modes() != problem.f0.layout().n_modes() {
            return Err(KamError::LayoutMismatch("sample normal form does not match the perturbation".into()));
        }
    }
    let ball = FourierBall::new(n, settings.k_max)?;
    let grid = ThetaGrid::dealiased(&ball)?;
    let layout = problem.f0.layout().clone();
    let d0 = dom(settings, settings.sigma0, settings.mu0)?;
    let runs = problem
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let maps: Vec<PointMap> = (0..grid.len()).map(|p| PointMap::identity(&grid.point(p), &layout)).collect();
            let mut run = SampleRun {
                index,
                h: s.h0.clone(),
                energy: 0.0,
                transported: s.h0.as_jet(&ball),
                chain: Vec::new(),
                maps,
                jet: Jet::zero(&ball, &layout),
                norm: NormSplit::default(),
                excluded_at: None,
                generator_norms: Vec::new(),
            };
            run.jet = current_jet(problem, &run, &ball, &grid)?;
            run.norm = measure(problem, settings, &run, &ball, &grid, &d0)?;
            Ok(run)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KamState {
        k: 0,
        total_samples: runs.len(),
        runs,
        ball,
        grid,
        schedule: None,
    })
}

/// Result of solving and transporting one sample, before the new norm is measured.
struct Solved {
    min_divisor: f64,
    min_ratio: f64,
    s_norm: f64,
    smallness_ok: bool,
    residual: f64,
    excluded: bool,
}

fn advance(
    problem: &KamProblem,
    settings: &KamSettings,
    run: &mut SampleRun,
    sched: &KamSchedule,
    j: usize,
    ball: &Arc<FourierBall>,
    grid: &ThetaGrid,
) -> Result<Solved> {
    let (kappa, n_cut) = (sched.kappa[j], sched.n_cut[j]);
    let mut sol = solve_jet(&run.jet, &run.h, kappa, n_cut)?;
    let res = residual(&sol, &run.jet, &run.h, grid)?;
    sol.residual = Some(res);
    let half = 0.5 * (sched.sigma[j] + sched.sigma[j + 1]);
    let s_norm = jet_norm(&sol.s, &dom(settings, half, sched.mu[j])?, NormVariant::BetaPlus).value;
    let smallness_ok = s_norm <= sched.mu[j].powi(2) * (sched.sigma[j] - sched.sigma[j + 1]) / 16.0;
    let mut min_divisor = f64::INFINITY;
    for r in sol.ledger.families.values() {
        min_divisor = min_divisor.min(r.min_abs);
    }
    let excluded = sol.ledger.excluded() || (settings.exclude_on_smallness && !smallness_ok);
    let out = Solved {
        min_divisor,
        min_ratio: sol.ledger.min_ratio(),
        s_norm,
        smallness_ok,
        residual: res,
        excluded,
    };
    if excluded {
        run.excluded_at = Some(j);
        return Ok(out);
    }
    let flow = JetFlow::new(&sol.s, FlowSettings::default())?;
    run.transported = lie_pullback(&run.transported, &sol.s, grid, settings.lie_tol, settings.lie_max_terms)?;
    run.h = run.h.corrected(&sol.hhat)?;
    run.energy += sol.hhat.c;
    run.generator_norms.push(sol.s.max_abs());
    run.chain.push(flow);
    let chain: Vec<&JetFlow> = run.chain.iter().collect();
    run.maps = grid_maps(&chain, problem.f0.layout(), grid)?;
    run.jet = current_jet(problem, run, ball, grid)?;
    Ok(out)
}

/// Displacement of `Phi_k` and consistency of the transported jet at sampled points.
fn step_checks(run: &SampleRun, prev_transported: &Jet, settings: &KamSettings, grid: &ThetaGrid, d: &Domain) -> Result<(f64, f64)> {
    let Some(flow) = run.chain.last() else {
        return Ok((0.0, 0.0));
    };
    let layout = flow.layout().clone();
    let n = run.h.n();
    let dim = 2 * layout.n_modes();
    let cs = layout.clusters();
    let s = d.params.s;
    let pts: Vec<(Vec<f64>, DVector<f64>)> = ball_samples(&layout, n, d, 4, settings.seed.wrapping_add(17)).into_iter().skip(1 + dim).collect();
    let stride = (grid.len() / settings.check_angles.max(1)).max(1);
    let (mut disp, mut defect) = (0.0f64, 0.0f64);
    for p in (0..grid.len()).step_by(stride) {
        let th = grid.point(p);
        for (r, z) in &pts {
            let rv = DVector::from_column_slice(r);
            let (t2, r2, z2) = flow.apply(&th, &rv, z, 1.0)?;
            let dth = th.iter().zip(&t2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let dr = (&r2 - &rv).amax();
            let dz = (&z2 - z)
                .iter()
                .enumerate()
                .map(|(c, x)| x * x * (cs.weight(c / 2) as f64).powf(2.0 * s))
                .sum::<f64>()
                .sqrt();
            disp = disp.max(dth.max(dr).max(dz));
            let lhs = run.transported.eval(&th, r, z);
            let rhs = prev_transported.eval(&t2, r2.as_slice(), &z2);
            defect = defect.max((lhs - rhs).abs());
        }
    }
    Ok((disp, defect))
}

/// One step for every retained sample; returns the row of step `j` (its input norms and the
/// solve data) and leaves the state at step `j + 1` with norms measured at `(sigma_{j+1}, mu_{j+1})`.
pub fn kam_step(problem: &KamProblem, settings: &KamSettings, state: &mut KamState, j: usize) -> Result<StepRow> {
    let sched = state.schedule.clone().ok_or_else(|| KamError::InvalidInput("state has no schedule".into()))?;
    if j + 1 >= sched.sigma.len() {
        return invalid("step index beyond the schedule");
    }
    let ball = state.ball.clone();
    let grid = &state.grid;
    let mut row = StepRow {
        step: j,
        eps_target: sched.eps[j],
        eps_measured: state.eps_measured(),
        eps_jet: state.retained().map(|r| r.norm.jet).fold(0.0, f64::max),
        eps_nonjet: state.retained().map(|r| r.norm.nonjet).fold(0.0, f64::max),
        kappa: Some(sched.kappa[j]),
        n_cut: Some(sched.n_cut[j]),
        sigma: sched.sigma[j],
        mu: sched.mu[j],
        ..Default::default()
    };
    let prev: Vec<Jet> = state.runs.iter().map(|r| r.transported.clone()).collect();
    let solved: Vec<Option<Solved>> = state
        .runs
        .par_iter_mut()
        .map(|run| {
            if run.excluded_at.is_some() {
                return Ok(None);
            }
            advance(problem, settings, run, &sched, j, &ball, grid).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let done: Vec<&Solved> = solved.iter().flatten().collect();
    row.min_divisor = done.iter().map(|s| s.min_divisor).reduce(f64::min);
    row.min_divisor_ratio = done.iter().map(|s| s.min_ratio).reduce(f64::min);
    row.s_norm = done.iter().filter(|s| !s.excluded).map(|s| s.s_norm).reduce(f64::max);
    row.smallness_ok = Some(done.iter().filter(|s| !s.excluded).all(|s| s.smallness_ok));
    row.residual = done.iter().filter(|s| !s.excluded).map(|s| s.residual).reduce(f64::max);
    row.excluded_fraction = 1.0 - state.retained_fraction();
    state.k = j + 1;
    if state.retained().next().is_none() {
        return Ok(row);
    }
    let d1 = dom(settings, sched.sigma[j + 1], sched.mu_at(j + 1))?;
    let norms: Vec<Option<(NormSplit, (f64, f64))>> = state
        .runs
        .par_iter()
        .map(|run| {
            if run.excluded_at.is_some() {
                return Ok(None);
            }
            let nrm = measure(problem, settings, run, &ball, &state.grid, &d1)?;
            let checks = step_checks(run, &prev[run.index], settings, &state.grid, &d1)?;
            Ok(Some((nrm, checks)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut disp: f64 = 0.0;
    let mut defect: f64 = 0.0;
    for (run, v) in state.runs.iter_mut().zip(norms) {
        if let Some((nrm, (dp, df))) = v {
            run.norm = nrm;
            disp = disp.max(dp);
            defect = defect.max(df);
        }
    }
    row.displacement = Some(disp);
    row.displacement_bound = Some(sched.eps[0].powf(0.8) * sched.eps[j].powf(0.25));
    row.pullback_defect = Some(defect);
    Ok(row)
}

fn final_row(state: &KamState, sched: &KamSchedule, k: usize) -> StepRow {
    StepRow {
        step: k,
        eps_target: sched.eps_target(k),
        eps_measured: state.eps_measured(),
        eps_jet: state.retained().map(|r| r.norm.jet).fold(0.0, f64::max),
        eps_nonjet: state.retained().map(|r| r.norm.nonjet).fold(0.0, f64::max),
        sigma: sched.sigma[k.min(sched.sigma.len() - 1)],
        mu: sched.mu_at(k),
        excluded_fraction: 1.0 - state.retained_fraction(),
        ..Default::default()
    }
}

/// Runs up to `k_steps` steps. Non-contraction stops the run and is recorded in the report's
/// status; other failures are returned as errors.
pub fn iterate(problem: &KamProblem, settings: &KamSettings, k_steps: usize) -> Result<(KamState, KamReport)> {
    let mut state = initial_state(problem, settings)?;
    let eps0_measured = state.eps_measured();
    let mut report = KamReport {
        eps_nominal: problem.eps_nominal,
        eps0_measured,
        status: "ok".into(),
        ..Default::default()
    };
    let eps0 = settings.eps0.unwrap_or(if eps0_measured > 0.0 { eps0_measured } else { problem.eps_nominal });
    let mut sched = KamSchedule::new(
        eps0,
        settings.sigma0,
        settings.mu0,
        settings.params.beta,
        problem.d_star,
        problem.delta0,
        k_steps.max(1),
        settings.gate,
        settings.k_max,
    )?;
    state.schedule = Some(sched.clone());
    let n = problem.f0.n();
    let mut rows: Vec<StepRow> = Vec::new();
    for j in 0..k_steps {
        let before = state.eps_measured();
        if before < settings.floor {
            if j == 0 {
                rows.push(final_row(&state, &sched, 0));
            }
            report.status = "floor".into();
            break;
        }
        let mut row = kam_step(problem, settings, &mut state, j)?;
        if state.retained().next().is_none() {
            rows.push(row);
            report.status = "all_excluded".into();
            break;
        }
        if j == 0 {
            // Step constant: smallest M making the step bound hold at step 0, solved jointly with
            // mu_1 = mu_1(M), then frozen.
            let (mut m, mut after) = (sched.m_const, state.eps_measured());
            for _ in 0..3 {
                let terms = sched.step_bound_terms(0, n, problem.gamma, before);
                let m_meas = after / (terms.iter().sum::<f64>() * before);
                report.m_measured = Some(m_meas);
                if m_meas <= m * (1.0 + 1e-12) {
                    break;
                }
                m = m_meas;
                sched.set_step_constant(m);
                state.schedule = Some(sched.clone());
                let d1 = dom(settings, sched.sigma[1], sched.mu_at(1))?;
                let fresh: Vec<Option<NormSplit>> = state
                    .runs
                    .par_iter()
                    .map(|run| {
                        if run.excluded_at.is_some() {
                            return Ok(None);
                        }
                        measure(problem, settings, run, &state.ball, &state.grid, &d1).map(Some)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (run, f) in state.runs.iter_mut().zip(fresh) {
                    if let Some(f) = f {
                        run.norm = f;
                    }
                }
                after = state.eps_measured();
            }
            row.mu = sched.mu[0];
        }
        let after = state.eps_measured();
        rows.push(row);
        let target = sched.eps_target(j + 1);
        let mut next = final_row(&state, &sched, j + 1);
        next.contraction = (before > 0.0).then(|| after / before.powf(1.25));
        if after > target {
            if after <= 0.5 * before {
                next.warning = Some(format!("[f] = {after:.3e} above target {target:.3e}, contracted by {:.3}", after / before));
            } else {
                rows.push(next);
                report.status = "non_contraction".into();
                break;
            }
        }
        if j + 1 == k_steps || after < settings.floor {
            rows.push(next);
        } else {
            // the next step writes its own row; carry contraction and warning over
            let carry = next;
            rows.push(StepRow { step: usize::MAX, ..carry });
        }
    }
    // merge carried rows into the subsequent step rows
    let mut merged: Vec<StepRow> = Vec::new();
    let mut pending: Option<StepRow> = None;
    for r in rows {
        if r.step == usize::MAX {
            pending = Some(r);
            continue;
        }
        let mut r = r;
        if let Some(p) = pending.take() {
            r.contraction = p.contraction;
            r.warning = p.warning;
        }
        merged.push(r);
    }
    if k_steps == 0 {
        merged.push(final_row(&state, &sched, 0));
    }
    report.steps = merged;
    report.limits = limit_objects(problem, &state, settings.params, problem.eps_nominal)?;
    report.retained = state.retained().map(|r| r.index).collect();
    report.schedule = Some(sched.clone());
    state.schedule = Some(sched);
    Ok((state, report))
}

/// `omega'`, `A` and their checks: shifts against `tol` and the spectra of `J A` per cluster
/// block.
pub fn limit_objects(problem: &KamProblem, state: &KamState, params: NormParams, tol: f64) -> Result<LimitObjects> {
    let mut out = LimitObjects::default();
    for run in state.retained() {
        let s = &problem.samples[run.index];
        let omega_shift = run.h.omega.iter().zip(&s.h0.omega).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let a_shift = run.h.a.sub(&s.h0.a)?.norm_s_beta(params).value;
        let stability = stability_defect(&run.h.a);
        out.omega_shift = out.omega_shift.max(omega_shift);
        out.a_shift = out.a_shift.max(a_shift);
        out.stability = out.stability.max(stability);
        out.per_sample.push(SampleLimit {
            index: run.index,
            rho: s.rho.clone(),
            omega: run.h.omega.clone(),
            omega_shift,
            a_shift,
            stability,
        });
    }
    out.omega_within = out.omega_shift <= tol;
    out.a_within = out.a_shift <= tol;
    out.stable = out.stability <= 1e-9;
    Ok(out)
}

/// Largest `|Re lambda|` over eigenvalues of `J A` restricted to each cluster piece.
pub fn stability_defect(a: &BlockMatrix<f64>) -> f64 {
    let layout = a.layout();
    let mut worst: f64 = 0.0;
    for s in 0..layout.n_sectors() {
        let m = &a.sectors()[s];
        for pc in layout.sector_pieces(s) {
            let (o, l) = (2 * pc.start, 2 * pc.len);
            let blk = m.view((o, o), (l, l));
            // (J A)_{ij}: J maps (p, q) -> (-q, p)
            let ja = DMatrix::from_fn(l, l, |i, j| if i % 2 == 0 { -blk[(i + 1, j)] } else { blk[(i - 1, j)] });
            for ev in ja.complex_eigenvalues().iter() {
                worst = worst.max(ev.re.abs());
            }
        }
    }
    worst
}
