//! Solution of the homological equation `{S, h} + f^T - hhat - R = 0` for a normal form
//! `h = <omega, r> + 1/2 <zeta, A zeta>` and a real jet `f^T`.
//!
//! Here `{S, h}` is the bracket of [`crate::hamiltonian::Jet::bracket`], so that the time-one
//! map of `S` satisfies `(h + f) o Phi = h + hhat + R + O(f^2)`. The solution `S` only carries
//! wave vectors `|k|_1 <= N`; everything beyond is left in `R`.
//!
//! The external components are solved in the eigenbasis of `A J`. For a normal form `A`
//! commutes with `J`, so on the `J = +i` and `J = -i` eigenspaces of each cluster `A` acts as a
//! Hermitian matrix `Q` and its conjugate. Diagonalising `Q = P D P^*` gives eigenvalues
//! `+i alpha` and `-i alpha` of `A J`, and the divisors `<k, omega> -+ alpha_j` (single) and
//! `<k, omega> - e_j alpha_j + e_l alpha_l` (sum or difference).

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::blocks::{project_normal_form, BlockMatrix, Flavor, NormParams, SectorPiece, ZetaLayout};
use crate::error::{invalid, KamError, Result};
use crate::hamiltonian::{jet_norm, Domain, FTSeries, FourierBall, Jet, NormVariant, ThetaGrid};
use crate::spectrum::{dot_k, DivisorFamily};

/// `h = <omega, r> + 1/2 <zeta, A zeta>` at one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalFormHam {
    pub omega: Vec<f64>,
    pub a: BlockMatrix<f64>,
}

/// Distance of a normal form from a reference one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Closeness {
    pub omega_shift: f64,
    pub a_shift: f64,
    /// `|A - A_ref|_{s,beta} <= delta0 / 4` and `|omega - omega_ref| <= delta0`.
    pub within: bool,
}

/// The normal-form correction `hhat = c + <chi, r> + 1/2 <zeta, B zeta>`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalCorrection {
    pub c: f64,
    pub chi: Vec<f64>,
    pub b: BlockMatrix<f64>,
}

impl NormalFormHam {
    /// Tolerance for accepting `A` as a normal form.
    pub const NORMAL_FORM_TOL: f64 = 1e-12;

    pub fn new(omega: Vec<f64>, a: BlockMatrix<f64>) -> Result<Self> {
        if a.flavor() != Flavor::Real {
            return invalid("normal form matrix must have real flavor");
        }
        let defect = crate::blocks::normal_form_defect(&a)?;
        if defect > Self::NORMAL_FORM_TOL * a.max_abs().max(1.0) {
            return Err(KamError::NotNormalForm { defect });
        }
        Ok(Self { omega, a })
    }

    /// `A = diag(lambda_j)` on both coordinates of each mode.
    pub fn diagonal(omega: Vec<f64>, layout: &Arc<ZetaLayout>, lambdas: &[f64]) -> Result<Self> {
        if lambdas.len() != layout.n_modes() {
            return invalid("one eigenvalue per external mode is required");
        }
        let mut a = BlockMatrix::zeros(layout, Flavor::Real);
        for (j, &l) in lambdas.iter().enumerate() {
            a.set(j, 0, j, 0, l)?;
            a.set(j, 1, j, 1, l)?;
        }
        Self::new(omega, a)
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }
    pub fn layout(&self) -> &Arc<ZetaLayout> {
        self.a.layout()
    }

    pub fn as_jet(&self, ball: &Arc<FourierBall>) -> Jet {
        let mut j = Jet::zero(ball, self.layout());
        j.set_constant(0.0, &self.omega, &DVector::zeros(2 * self.layout().n_modes()), &self.a);
        j
    }

    /// `h + hhat` without the constant.
    pub fn corrected(&self, d: &NormalCorrection) -> Result<NormalFormHam> {
        let omega = self.omega.iter().zip(&d.chi).map(|(a, b)| a + b).collect();
        NormalFormHam::new(omega, self.a.add(&d.b)?)
    }

    pub fn closeness(&self, reference: &NormalFormHam, p: NormParams, delta0: f64) -> Result<Closeness> {
        let omega_shift = self
            .omega
            .iter()
            .zip(&reference.omega)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let a_shift = self.a.sub(&reference.a)?.norm_s_beta(p).value;
        Ok(Closeness {
            omega_shift,
            a_shift,
            within: omega_shift <= delta0 && a_shift <= delta0 / 4.0,
        })
    }
}

impl NormalCorrection {
    pub fn zero(n: usize, layout: &Arc<ZetaLayout>) -> Self {
        Self {
            c: 0.0,
            chi: vec![0.0; n],
            b: BlockMatrix::zeros(layout, Flavor::Real),
        }
    }

    pub fn as_jet(&self, ball: &Arc<FourierBall>) -> Jet {
        let mut j = Jet::zero(ball, self.b.layout());
        j.set_constant(self.c, &self.chi, &DVector::zeros(2 * self.b.layout().n_modes()), &self.b);
        j
    }
}

/// Smallest divisor seen in one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    /// Smallest `|divisor|`.
    pub min_abs: f64,
    /// Smallest `|divisor| / threshold`.
    pub min_ratio: f64,
    /// `(k, cluster_a, cluster_b)` attaining `min_ratio`.
    pub k: Vec<i32>,
    pub a: Option<usize>,
    pub b: Option<usize>,
    /// Divisors below their threshold.
    pub below: usize,
    pub count: usize,
}

/// Small-divisor ledger of one solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DivisorLedger {
    pub kappa: f64,
    #[serde(rename = "N")]
    pub n_cut: usize,
    pub families: BTreeMap<String, FamilyRecord>,
}

impl DivisorLedger {
    pub fn new(kappa: f64, n_cut: usize) -> Self {
        Self {
            kappa,
            n_cut,
            families: BTreeMap::new(),
        }
    }

    fn offer(&mut self, fam: DivisorFamily, value: f64, threshold: f64, k: &[i32], a: Option<usize>, b: Option<usize>) {
        let ratio = value.abs() / threshold;
        let e = self.families.entry(fam.name().to_string()).or_insert(FamilyRecord {
            min_abs: f64::INFINITY,
            min_ratio: f64::INFINITY,
            k: k.to_vec(),
            a,
            b,
            below: 0,
            count: 0,
        });
        e.count += 1;
        e.min_abs = e.min_abs.min(value.abs());
        if ratio < e.min_ratio {
            e.min_ratio = ratio;
            e.k = k.to_vec();
            e.a = a;
            e.b = b;
        }
        if value.abs() < threshold {
            e.below += 1;
        }
    }

    /// True if any divisor fell below its threshold.
    pub fn excluded(&self) -> bool {
        self.families.values().any(|f| f.below > 0)
    }

    pub fn min_ratio(&self) -> f64 {
        self.families.values().map(|f| f.min_ratio).fold(f64::INFINITY, f64::min)
    }

    pub fn merge(&mut self, o: &DivisorLedger) {
        for (name, r) in &o.families {
            match self.families.get_mut(name) {
                None => {
                    self.families.insert(name.clone(), r.clone());
                }
                Some(e) => {
                    e.count += r.count;
                    e.below += r.below;
                    e.min_abs = e.min_abs.min(r.min_abs);
                    if r.min_ratio < e.min_ratio {
                        e.min_ratio = r.min_ratio;
                        e.k = r.k.clone();
                        e.a = r.a;
                        e.b = r.b;
                    }
                }
            }
        }
    }
}

/// Output of a full solve.
#[derive(Clone, Debug)]
pub struct HomologicalSolution {
    pub s: Jet,
    pub remainder: Jet,
    pub hhat: NormalCorrection,
    pub ledger: DivisorLedger,
    /// `max |{S,h} + f^T - hhat - R|` relative to `max |f^T|`; `None` until checked.
    pub residual: Option<f64>,
}

/// Eigen-data of `A` restricted to one sector piece.
#[derive(Clone, Debug)]
pub struct PieceEigen {
    pub piece: SectorPiece,
    pub weight: f64,
    /// Ascending eigenvalues of the Hermitian block `Q`.
    pub alpha: DVector<f64>,
    /// Unitary eigenvectors of `Q`, phase-fixed.
    pub p: DMatrix<Complex64>,
    /// Columns: eigenvectors of `A J` in the real coordinates of the piece (`2 len` of them);
    /// the first `len` have eigenvalue `+i alpha`, the rest `-i alpha`.
    pub basis: DMatrix<Complex64>,
}

impl PieceEigen {
    /// `+1` for the first half of the basis, `-1` for the second.
    pub fn sign(&self, j: usize) -> f64 {
        if j < self.piece.len {
            1.0
        } else {
            -1.0
        }
    }
    pub fn alpha_of(&self, j: usize) -> f64 {
        self.alpha[j % self.piece.len]
    }
}

/// Makes the largest component of each column real and positive (first one on ties).
fn fix_phases(p: &mut DMatrix<Complex64>) {
    for mut col in p.column_iter_mut() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.norm() > col[best].norm() * (1.0 + 1e-12) {
                best = i;
            }
        }
        let z = col[best];
        if z.norm() > 0.0 {
            let ph = z.conj() / z.norm();
            for x in col.iter_mut() {
                *x *= ph;
            }
        }
    }
}

/// Per-sector, per-piece eigen-decomposition of a normal form.
pub fn piece_eigen(a: &BlockMatrix<f64>) -> Result<Vec<Vec<PieceEigen>>> {
    let layout = a.layout();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(layout.n_sectors());
    for s in 0..layout.n_sectors() {
        let m = &a.sectors()[s];
        let mut pieces = Vec::new();
        for &pc in layout.sector_pieces(s) {
            let l = pc.len;
            let loc = m.view((2 * pc.start, 2 * pc.start), (2 * l, 2 * l)).map(|x| Complex64::new(x, 0.0));
            let mut u = DMatrix::<Complex64>::zeros(2 * l, 2 * l);
            for i in 0..l {
                u[(2 * i, i)] = Complex64::new(r, 0.0);
                u[(2 * i + 1, i)] = Complex64::new(0.0, -r);
                u[(2 * i, l + i)] = Complex64::new(r, 0.0);
                u[(2 * i + 1, l + i)] = Complex64::new(0.0, r);
            }
            let t = u.adjoint() * &loc * &u;
            let q = t.view((0, 0), (l, l)).clone_owned();
            let q = (&q + q.adjoint()) * Complex64::new(0.5, 0.0);
            let eig = q.symmetric_eigen();
            let mut idx: Vec<usize> = (0..l).collect();
            idx.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
            let alpha = DVector::from_fn(l, |i, _| eig.eigenvalues[idx[i]]);
            let mut p = DMatrix::from_fn(l, l, |i, j| eig.eigenvectors[(i, idx[j])]);
            fix_phases(&mut p);
            let mut diag = DMatrix::<Complex64>::zeros(2 * l, 2 * l);
            diag.view_mut((0, 0), (l, l)).copy_from(&p);
            diag.view_mut((l, l), (l, l)).copy_from(&p.map(|z| z.conj()));
            let basis = &u * diag;
            let weight = layout.clusters().clusters()[pc.cluster].weight as f64;
            pieces.push(PieceEigen {
                piece: pc,
                weight,
                alpha,
                p,
                basis,
            });
        }
        out.push(pieces);
    }
    Ok(out)
}

/// Angle and action components. Writes `S_theta`, `S_r` and the tails into `s` and `rem`;
/// returns `(c, chi)`.
pub fn solve_angle_action(
    f: &Jet,
    h: &NormalFormHam,
    kappa: f64,
    n_cut: usize,
    s: &mut Jet,
    rem: &mut Jet,
    ledger: &mut DivisorLedger,
) -> (f64, Vec<f64>) {
    let ball = f.ball().clone();
    let z = ball.zero_index();
    let c = f.theta[z].re;
    let chi: Vec<f64> = f.r.iter().map(|ri| ri[z].re).collect();
    for k in 0..ball.len() {
        if k == z {
            continue;
        }
        if ball.norm1(k) > n_cut {
            rem.theta[k] = f.theta[k];
            for i in 0..f.n() {
                rem.r[i][k] = f.r[i][k];
            }
            continue;
        }
        let dv = dot_k(ball.k(k), &h.omega);
        if ball.neg(k) > k {
            ledger.offer(DivisorFamily::Zero, dv, DivisorFamily::Zero.threshold(kappa, 0.0, 0.0), ball.k(k), None, None);
        }
        let factor = Complex64::new(0.0, -1.0 / dv);
        s.theta[k] = f.theta[k] * factor;
        for i in 0..f.n() {
            s.r[i][k] = f.r[i][k] * factor;
        }
    }
    (c, chi)
}

fn piece_slice(v: &DVector<Complex64>, pc: &SectorPiece) -> DVector<Complex64> {
    v.rows(2 * pc.start, 2 * pc.len).clone_owned()
}

/// Linear external component: `(i <k,omega> - A J) S_zeta(k) = f_zeta(k)` for `|k| <= N`.
pub fn solve_zeta(
    f: &Jet,
    h: &NormalFormHam,
    eig: &[Vec<PieceEigen>],
    kappa: f64,
    n_cut: usize,
    s: &mut Jet,
    rem: &mut Jet,
    ledger: &mut DivisorLedger,
) {
    let ball = f.ball().clone();
    let layout = f.layout().clone();
    let dim = f.dim();
    for k in 0..ball.len() {
        if ball.norm1(k) > n_cut {
            rem.zeta[k] = f.zeta[k].clone();
            continue;
        }
        let nk = ball.neg(k);
        if nk < k {
            continue;
        }
        let dv = dot_k(ball.k(k), &h.omega);
        let mut out = DVector::<Complex64>::zeros(dim);
        for (sec, pieces) in eig.iter().enumerate() {
            let modes = layout.sector_modes(sec);
            let local = DVector::from_fn(2 * modes.len(), |i, _| f.zeta[k][2 * modes[i / 2] + i % 2]);
            for pe in pieces {
                let x = pe.basis.adjoint() * piece_slice(&local, &pe.piece);
                let mut y = DVector::<Complex64>::zeros(x.len());
                for j in 0..x.len() {
                    let d = dv - pe.sign(j) * pe.alpha_of(j);
                    let a = layout.clusters().clusters()[pe.piece.cluster].weight as f64;
                    ledger.offer(
                        DivisorFamily::Single,
                        d,
                        DivisorFamily::Single.threshold(kappa, a, 0.0),
                        ball.k(k),
                        Some(pe.piece.cluster),
                        None,
                    );
                    y[j] = x[j] / Complex64::new(0.0, d);
                }
                let back = &pe.basis * y;
                for (i, v) in back.iter().enumerate() {
                    let pos = pe.piece.start + i / 2;
                    out[2 * modes[pos] + i % 2] = *v;
                }
            }
        }
        if nk == k {
            s.zeta[k] = out.map(|z| Complex64::new(z.re, 0.0));
        } else {
            s.zeta[nk] = out.map(|z| z.conj());
            s.zeta[k] = out;
        }
    }
}

/// Quadratic external component:
/// `i <k,omega> S - G S + S G = F - B delta_{k0}` with `G = A J`, for `|k| <= N`.
/// Returns `B`, the projection of `F(0)` onto normal forms.
pub fn solve_zetazeta(
    f: &Jet,
    h: &NormalFormHam,
    eig: &[Vec<PieceEigen>],
    kappa: f64,
    n_cut: usize,
    s: &mut Jet,
    rem: &mut Jet,
    ledger: &mut DivisorLedger,
) -> Result<BlockMatrix<f64>> {
    let ball = f.ball().clone();
    let layout = f.layout().clone();
    let z = ball.zero_index();
    let b = project_normal_form(&f.zz[z].re())?;
    let cl = layout.clusters().clusters();
    for k in 0..ball.len() {
        if ball.norm1(k) > n_cut {
            rem.zz[k] = f.zz[k].clone();
            continue;
        }
        let nk = ball.neg(k);
        if nk < k {
            continue;
        }
        let dv = dot_k(ball.k(k), &h.omega);
        let mut sectors = Vec::with_capacity(layout.n_sectors());
        for (sec, pieces) in eig.iter().enumerate() {
            let mut rhs = f.zz[k].sectors()[sec].clone();
            if k == z {
                rhs -= b.sectors()[sec].map(|x| Complex64::new(x, 0.0));
            }
            let d = rhs.nrows();
            let mut out = DMatrix::<Complex64>::zeros(d, d);
            for pa in pieces {
                for pb in pieces {
                    let (ra, rb) = (2 * pa.piece.start, 2 * pb.piece.start);
                    let (la, lb) = (2 * pa.piece.len, 2 * pb.piece.len);
                    let blk = rhs.view((ra, rb), (la, lb));
                    let t = pa.basis.adjoint() * blk * &pb.basis;
                    let (wa, wb) = (cl[pa.piece.cluster].weight as f64, cl[pb.piece.cluster].weight as f64);
                    let same_piece = pa.piece.cluster == pb.piece.cluster;
                    let mut y = DMatrix::<Complex64>::zeros(la, lb);
                    for j in 0..la {
                        for l in 0..lb {
                            let (ej, el) = (pa.sign(j), pb.sign(l));
                            if k == z && same_piece && ej == el {
                                continue; // moved into B
                            }
                            let dd = dv - ej * pa.alpha_of(j) + el * pb.alpha_of(l);
                            let fam = if ej == el { DivisorFamily::Difference } else { DivisorFamily::Sum };
                            ledger.offer(
                                fam,
                                dd,
                                fam.threshold(kappa, wa, wb),
                                ball.k(k),
                                Some(pa.piece.cluster),
                                Some(pb.piece.cluster),
                            );
                            y[(j, l)] = t[(j, l)] / Complex64::new(0.0, dd);
                        }
                    }
                    let back = &pa.basis * y * pb.basis.adjoint();
                    out.view_mut((ra, rb), (la, lb)).copy_from(&back);
                }
            }
            let sym = (&out + out.transpose()) * Complex64::new(0.5, 0.0);
            sectors.push(sym);
        }
        let m = BlockMatrix::from_sectors(&layout, Flavor::Real, sectors)?;
        if nk == k {
            s.zz[k] = m.re().to_c64();
        } else {
            s.zz[nk] = m.conj();
            s.zz[k] = m;
        }
    }
    Ok(b)
}

/// Solves all four components for the jet `f`.
pub fn solve_jet(f: &Jet, h: &NormalFormHam, kappa: f64, n_cut: usize) -> Result<HomologicalSolution> {
    if f.n() != h.n() {
        return invalid("torus dimensions of f and h differ");
    }
    if f.layout().n_modes() != h.layout().n_modes() {
        return Err(KamError::LayoutMismatch("f and h have different external spaces".into()));
    }
    if kappa <= 0.0 {
        return invalid("kappa must be positive");
    }
    let ball = f.ball().clone();
    let layout = f.layout().clone();
    let mut s = Jet::zero(&ball, &layout);
    let mut rem = Jet::zero(&ball, &layout);
    let mut ledger = DivisorLedger::new(kappa, n_cut);
    let (c, chi) = solve_angle_action(f, h, kappa, n_cut, &mut s, &mut rem, &mut ledger);
    let eig = piece_eigen(&h.a)?;
    solve_zeta(f, h, &eig, kappa, n_cut, &mut s, &mut rem, &mut ledger);
    let b = solve_zetazeta(f, h, &eig, kappa, n_cut, &mut s, &mut rem, &mut ledger)?;
    s.realify();
    Ok(HomologicalSolution {
        s,
        remainder: rem,
        hhat: NormalCorrection { c, chi, b },
        ledger,
        residual: None,
    })
}

/// Extracts the jet of `f` on `ball` and solves.
pub fn solve_full(f: &FTSeries, h: &NormalFormHam, kappa: f64, n_cut: usize, ball: &Arc<FourierBall>) -> Result<HomologicalSolution> {
    let (jet, _) = f.extract_jet(ball)?;
    let mut sol = solve_jet(&jet, h, kappa, n_cut)?;
    let grid = ThetaGrid::dealiased(ball)?;
    sol.residual = Some(residual(&sol, &jet, h, &grid)?);
    Ok(sol)
}

/// `{S, h} + f^T - hhat - R`, evaluated through the grid bracket.
pub fn residual_jet(sol: &HomologicalSolution, f: &Jet, h: &NormalFormHam, grid: &ThetaGrid) -> Result<Jet> {
    let ball = f.ball();
    let mut out = sol.s.bracket(&h.as_jet(ball), grid)?;
    out.axpy(1.0, f)?;
    out.axpy(-1.0, &sol.hhat.as_jet(ball))?;
    out.axpy(-1.0, &sol.remainder)?;
    Ok(out)
}

/// Largest residual coefficient relative to the largest coefficient of `f`.
pub fn residual(sol: &HomologicalSolution, f: &Jet, h: &NormalFormHam, grid: &ThetaGrid) -> Result<f64> {
    let res = residual_jet(sol, f, h, grid)?;
    Ok(res.max_abs() / f.max_abs().max(f64::MIN_POSITIVE))
}

/// `f+ = R + int_0^1 {S, (1 - t)(hhat + R) + t f} o Phi^t dt` for a jet `f` (so `f - f^T = 0`),
/// with a five-node Gauss-Legendre rule in `t` and Lie-series pullbacks.
pub fn step_formula_jet(sol: &HomologicalSolution, f: &Jet, grid: &ThetaGrid, tol: f64, max_terms: usize) -> Result<Jet> {
    let ball = f.ball();
    let hr = sol.hhat.as_jet(ball).add(&sol.remainder)?;
    let rule = crate::flow::Collocation::gauss_legendre(5);
    let mut out = sol.remainder.clone();
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let mut g = hr.scale(1.0 - t);
        g.axpy(t, f)?;
        let integrand = sol.s.bracket(&g, grid)?;
        let pulled = crate::flow::lie_pullback(&integrand, &sol.s.scale(t), grid, tol, max_terms)?;
        out.axpy(w, &pulled)?;
    }
    Ok(out)
}

/// Measured norms of a solution and the reference bounds with unit constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionNorms {
    pub f_norm: f64,
    pub s_norm_plus: f64,
    pub r_norm: f64,
    /// `N^{1 + d*/gamma} [f] / (kappa^{2 + d*/2beta} (sigma - sigma')^n)`.
    pub s_bound_unit: f64,
    /// `e^{-(sigma - sigma') N / 2} [f]`.
    pub r_bound_unit: f64,
}

/// `[f]` and `[R]` at width `sigma`, `[S]^+` at `sigma'`.
pub fn solution_norms(
    sol: &HomologicalSolution,
    f: &Jet,
    sigma: f64,
    sigma_prime: f64,
    mu: f64,
    p: NormParams,
    d_star: f64,
    gamma: f64,
) -> Result<SolutionNorms> {
    let dom = Domain::new(sigma, mu, p)?;
    let dom_p = Domain::new(sigma_prime, mu, p)?;
    let f_norm = jet_norm(f, &dom, NormVariant::Beta).value;
    let s_norm_plus = jet_norm(&sol.s, &dom_p, NormVariant::BetaPlus).value;
    let r_norm = jet_norm(&sol.remainder, &dom_p, NormVariant::Beta).value;
    let n = sol.ledger.n_cut as f64;
    let kappa = sol.ledger.kappa;
    let gap = sigma - sigma_prime;
    let s_bound_unit = n.max(1.0).powf(1.0 + d_star / gamma) * f_norm
        / (kappa.powf(2.0 + d_star / (2.0 * p.beta)) * gap.powi(f.n() as i32));
    let r_bound_unit = (-gap * n / 2.0).exp() * f_norm;
    Ok(SolutionNorms {
        f_norm,
        s_norm_plus,
        r_norm,
        s_bound_unit,
        r_bound_unit,
    })
}

// ---------------------------------------------------------------------------------------------
// Second-Melnikov division bound
// ---------------------------------------------------------------------------------------------

/// Input of the block division `B_jl = i A_jl / (<k,omega> + e mu_j - mu_l)`.
#[derive(Clone, Debug)]
pub struct DivisionProblem {
    /// Dense matrix on the cluster-ordered modes (one scalar per mode).
    pub a: DMatrix<f64>,
    /// Cluster weight of every mode.
    pub weights: Vec<f64>,
    /// Unperturbed eigenvalues `lambda_j` and their perturbations `mu_j`.
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub k_dot_omega: f64,
    pub sign: f64,
    pub kappa: f64,
    /// `n N max omega`, bounding `|<k, omega>|` over the truncation.
    pub k_omega_bound: f64,
    pub c0: f64,
    pub c_mu: f64,
    pub delta: f64,
    pub c_b: f64,
    pub d_star: f64,
}

/// Regime thresholds of the division bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelortThresholds {
    pub c1: f64,
    pub k1: f64,
    /// `k1 (2 C_mu / kappa)^{1/delta}` as stated in the source argument.
    pub k2_stated: f64,
    /// `k1 (4 C_mu / kappa)^{1/delta}`, needed for the Neumann series to gain the factor 2.
    pub k2: f64,
}

/// `k1 = max(C1, 8)` with `C1 = (4 n N max omega / c0)^{1/gamma}`; both versions of `k2`.
pub fn delort_thresholds(k_omega_bound: f64, c0: f64, gamma: f64, kappa: f64, c_mu: f64, delta: f64) -> DelortThresholds {
    let c1 = (4.0 * k_omega_bound / c0).powf(1.0 / gamma);
    let k1 = c1.max(8.0);
    DelortThresholds {
        c1,
        k1,
        k2_stated: k1 * (2.0 * c_mu / kappa).powf(1.0 / delta),
        k2: k1 * (4.0 * c_mu / kappa).powf(1.0 / delta),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub blocks: usize,
    /// Largest `(1 + |w_a - w_b|) ||B_ab|| / ||A_ab||` over the regime.
    pub worst_ratio: f64,
    pub bound: f64,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelortReport {
    pub thresholds: DelortThresholds,
    pub regimes: [RegimeReport; 3],
    /// Violations of the divisor and eigenvalue hypotheses.
    pub hypothesis_violations: usize,
}

impl DelortReport {
    pub fn violations(&self) -> usize {
        self.regimes.iter().map(|r| r.violations).sum()
    }
}

/// Solves the division directly and checks the three per-regime bounds blockwise.
pub fn delort_bound_check(p: &DivisionProblem, gamma: f64) -> Result<DelortReport> {
    let n = p.weights.len();
    if p.a.nrows() != n || p.a.ncols() != n || p.lambda.len() != n || p.mu.len() != n {
        return invalid("division problem has inconsistent sizes");
    }
    let th = delort_thresholds(p.k_omega_bound, p.c0, gamma, p.kappa, p.c_mu, p.delta);
    let mut hyp = 0;
    for j in 0..n {
        let w = p.weights[j];
        if (p.mu[j] - p.lambda[j]).abs() > (p.c_mu * w.powf(-p.delta)).min(p.c0 / 4.0) {
            hyp += 1;
        }
        if p.lambda[j] < p.c0 * w.powf(gamma) {
            hyp += 1;
        }
        for l in 0..n {
            let d = p.k_dot_omega + p.sign * p.mu[j] - p.mu[l];
            if d.abs() < p.kappa * (1.0 + (w - p.weights[l]).abs()) {
                hyp += 1;
            }
        }
    }
    // cluster runs
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for j in 0..n {
        match runs.last_mut() {
            Some((s, len)) if p.weights[*s] == p.weights[j] => *len += 1,
            _ => runs.push((j, 1)),
        }
    }
    let mut regimes: [RegimeReport; 3] = Default::default();
    let bounds = [8.0, 2.0 / p.kappa, f64::NAN];
    for &(sa, la) in &runs {
        for &(sb, lb) in &runs {
            let a_blk = p.a.view((sa, sb), (la, lb)).clone_owned();
            let an = crate::blocks::spectral_norm(&a_blk);
            if an == 0.0 {
                continue;
            }
            let b_blk = DMatrix::from_fn(la, lb, |j, l| {
                a_blk[(j, l)] / (p.k_dot_omega + p.sign * p.mu[sa + j] - p.mu[sb + l])
            });
            let bn = crate::blocks::spectral_norm(&b_blk);
            let (wa, wb) = (p.weights[sa], p.weights[sb]);
            let (hi, lo) = (wa.max(wb), wa.min(wb));
            let reg = if hi > th.k1 * lo {
                0
            } else if hi > th.k2 {
                1
            } else {
                2
            };
            let bound = if reg == 2 {
                (p.c_b * th.k2).powf(p.d_star / 2.0) / p.kappa
            } else {
                bounds[reg]
            };
            let ratio = (1.0 + (wa - wb).abs()) * bn / an;
            let r = &mut regimes[reg];
            r.blocks += 1;
            r.bound = bound;
            r.worst_ratio = r.worst_ratio.max(ratio);
            if ratio > bound * (1.0 + 1e-12) {
                r.violations += 1;
            }
        }
    }
    Ok(DelortReport {
        thresholds: th,
        regimes,
        hypothesis_violations: hyp,
    })
}
