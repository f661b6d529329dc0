//! Seeded random instances shared by tests, benchmarks and the command-line runner.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::blocks::{project_normal_form, BlockMatrix, Flavor, NormParams, WeightedVector, ZetaLayout};
use crate::error::Result;
use crate::hamiltonian::{FourierBall, Jet};
use crate::homological::{DivisionProblem, NormalFormHam};
use crate::spectrum::ClusterSet;

/// Layout with `n_clusters` clusters of weights `1..=n_clusters` and random sizes in `1..=max_size`.
pub fn random_layout<R: Rng>(rng: &mut R, n_clusters: usize, max_size: usize) -> Result<Arc<ZetaLayout>> {
    let sizes: Vec<usize> = (0..n_clusters).map(|_| rng.gen_range(1..=max_size)).collect();
    Ok(ZetaLayout::single(ClusterSet::from_sizes(&sizes, 1.0, 3.0)?))
}

/// Real block matrix whose `(a, b)` block has spectral norm close to `u_ab / weight(w_a, w_b)`,
/// with `u_ab` uniform in `(0, 1)`. Choosing the extremal weight makes norm bounds nearly tight.
pub fn random_weighted_matrix<R: Rng>(
    rng: &mut R,
    layout: &Arc<ZetaLayout>,
    weight: impl Fn(f64, f64) -> f64,
) -> BlockMatrix<f64> {
    let cs = layout.clusters();
    let n = 2 * layout.n_modes();
    let mut dense = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    for ca in cs.clusters() {
        for cb in cs.clusters() {
            let mut blk = dense.view_mut((2 * ca.start, 2 * cb.start), (2 * ca.len, 2 * cb.len));
            let nrm = crate::blocks::spectral_norm(&blk.clone_owned());
            let target = rng.gen_range(0.05..1.0) / weight(ca.weight as f64, cb.weight as f64);
            blk *= target / nrm;
        }
    }
    BlockMatrix::from_dense(layout, Flavor::Real, &dense).expect("single layout accepts any dense matrix")
}

/// Vector whose cluster `a` has Euclidean norm close to `u_a w_a^{-s}`.
pub fn random_weighted_vector<R: Rng>(rng: &mut R, layout: &Arc<ZetaLayout>, s: f64) -> WeightedVector<f64> {
    let cs = layout.clusters();
    let mut data = DVector::from_fn(2 * layout.n_modes(), |_, _| rng.gen_range(-1.0..1.0));
    for c in cs.clusters() {
        let mut v = data.rows_mut(2 * c.start, 2 * c.len);
        let nrm = v.norm();
        v *= rng.gen_range(0.05..1.0) * (c.weight as f64).powf(-s) / nrm;
    }
    WeightedVector::from_data(layout, Flavor::Real, data).expect("length matches layout")
}

/// Real jet with coefficients uniform in `(-amp, amp)` damped by `exp(-decay |k|)`.
pub fn random_jet(ball: &Arc<FourierBall>, layout: &Arc<ZetaLayout>, seed: u64, amp: f64, decay: f64) -> Jet {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut j = Jet::zero(ball, layout);
    let mut c = || Complex64::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp));
    for k in 0..ball.len() {
        let d = (-decay * ball.norm1(k) as f64).exp();
        j.theta[k] = c() * d;
        for i in 0..ball.n() {
            j.r[i][k] = c() * d;
        }
        for x in j.zeta[k].iter_mut() {
            *x = c() * d;
        }
        for m in j.zz[k].sectors_mut() {
            for x in m.iter_mut() {
                *x = c() * d;
            }
        }
    }
    j.realify();
    j
}

/// Normal form with frequencies in `[0.5, 1.5]^n`, eigenvalues near `sqrt(w (w + 1) + 1)` and a
/// random in-cluster Hermitian coupling of size `coupling`.
pub fn random_normal_form<R: Rng>(rng: &mut R, n: usize, layout: &Arc<ZetaLayout>, coupling: f64) -> Result<NormalFormHam> {
    let cs = layout.clusters();
    let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let lambdas: Vec<f64> = (0..layout.n_modes())
        .map(|i| {
            let w = cs.weight(i) as f64;
            (w * (w + 1.0) + 1.0).sqrt() + rng.gen_range(-0.05..0.05)
        })
        .collect();
    let mut h = NormalFormHam::diagonal(omega, layout, &lambdas)?;
    let dim = 2 * layout.n_modes();
    let r = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-coupling..coupling));
    let sym = BlockMatrix::from_dense(layout, Flavor::Real, &(&r + r.transpose()))?;
    // keep only in-cluster blocks, then the part commuting with J
    let in_cluster = sym.filter_blocks(|a, b| a == b);
    h.a = h.a.add(&project_normal_form(&in_cluster)?)?;
    NormalFormHam::new(h.omega, h.a)
}

/// Division problem satisfying the divisor and eigenvalue hypotheses, with clusters spread so
/// that all three regimes of the bound are exercised.
pub fn random_division_problem<R: Rng>(rng: &mut R) -> DivisionProblem {
    let mut weights = Vec::new();
    for &base in &[1.0, 2.0, 3.0, 40.0, 900.0, 2000.0] {
        let w: f64 = base + rng.gen_range(0..3) as f64;
        for _ in 0..rng.gen_range(1..=3) {
            weights.push(w);
        }
    }
    weights.sort_by(f64::total_cmp);
    let c_mu = 0.02;
    let lambda: Vec<f64> = weights.iter().map(|w| w + 0.25).collect();
    let mu: Vec<f64> = lambda
        .iter()
        .zip(&weights)
        .map(|(l, w)| l + c_mu / w * rng.gen_range(-1.0..1.0))
        .collect();
    let k_dot_omega = rng.gen_range(0.3..0.7) + rng.gen_range(-3i32..=3) as f64;
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let n = weights.len();
    let mut kappa = f64::INFINITY;
    for j in 0..n {
        for l in 0..n {
            let d = k_dot_omega + sign * mu[j] - mu[l];
            kappa = kappa.min(d.abs() / (1.0 + (weights[j] - weights[l]).abs()));
        }
    }
    DivisionProblem {
        a: DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)),
        weights,
        lambda,
        mu,
        k_dot_omega,
        sign,
        kappa: kappa.min(0.1),
        k_omega_bound: 0.1,
        c0: 0.5,
        c_mu,
        delta: 1.0,
        c_b: 2.0,
        d_star: 1.0,
    }
}

/// Norm parameters used by the block-algebra checks.
pub const BLOCK_CHECK_PARAMS: NormParams = NormParams { s: 2.0, beta: 0.5 };
