//! Block matrices over energy clusters, weighted sequence vectors and their norms.
//!
//! Storage is dense per symmetry sector: the external modes are partitioned into sectors that
//! no operator of the problem couples, and every matrix is block diagonal over sectors. A
//! problem without known symmetry uses a single sector, i.e. one dense matrix.

use std::sync::Arc;

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::spectrum::ClusterSet;

/// Real scalar or complex scalar with `f64` modulus.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Default {
    fn of_real(x: f64) -> Self;
    fn to_c64(self) -> Complex64;
}

impl Scalar for f64 {
    fn of_real(x: f64) -> Self {
        x
    }
    fn to_c64(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl Scalar for Complex64 {
    fn of_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn to_c64(self) -> Complex64 {
        self
    }
}

/// Coordinate system a matrix or vector is written in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    /// `(p_a, q_a)` per mode; operators built from 2x2 real entries.
    Real,
    /// `(xi_a, eta_a)` per mode, obtained by the blockwise congruence with `U`.
    Complex,
    /// One complex number per mode: the `xi`-`eta` coupling `Q` of a normal form.
    Hermitian,
}

impl Flavor {
    pub fn per_mode(self) -> usize {
        match self {
            Flavor::Real | Flavor::Complex => 2,
            Flavor::Hermitian => 1,
        }
    }
    fn name(self) -> &'static str {
        match self {
            Flavor::Real => "real",
            Flavor::Complex => "complex",
            Flavor::Hermitian => "hermitian",
        }
    }
}

fn flavor_check(a: Flavor, b: Flavor) -> Result<()> {
    if a != b {
        return Err(KamError::FlavorMismatch {
            expected: a.name().into(),
            found: b.name().into(),
        });
    }
    Ok(())
}

/// A run of consecutive sector-local modes that belong to one cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectorPiece {
    pub cluster: usize,
    /// First sector-local mode position.
    pub start: usize,
    pub len: usize,
}

/// Cluster structure plus a partition of the modes into decoupled sectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaLayout {
    clusters: ClusterSet,
    sectors: Vec<Vec<usize>>,
    pieces: Vec<Vec<SectorPiece>>,
    /// `(sector, local position)` of each global mode.
    locate: Vec<(usize, usize)>,
}

impl ZetaLayout {
    /// One sector holding every mode.
    pub fn single(clusters: ClusterSet) -> Arc<Self> {
        let n = clusters.n_modes();
        Self::with_sectors(clusters, &vec![0; n]).expect("single sector is always valid")
    }

    /// `sector_of[i]` labels mode `i`; labels are renumbered in order of first appearance.
    pub fn with_sectors(clusters: ClusterSet, sector_of: &[usize]) -> Result<Arc<Self>> {
        if sector_of.len() != clusters.n_modes() {
            return Err(KamError::LayoutMismatch(
                "sector labels must cover every mode".into(),
            ));
        }
        let mut relabel: Vec<(usize, usize)> = Vec::new();
        let mut sectors: Vec<Vec<usize>> = Vec::new();
        let mut locate = vec![(0, 0); sector_of.len()];
        for (i, &lab) in sector_of.iter().enumerate() {
            let s = match relabel.iter().find(|(l, _)| *l == lab) {
                Some(&(_, s)) => s,
                None => {
                    relabel.push((lab, sectors.len()));
                    sectors.push(Vec::new());
                    sectors.len() - 1
                }
            };
            locate[i] = (s, sectors[s].len());
            sectors[s].push(i);
        }
        let pieces = sectors
            .iter()
            .map(|modes| {
                let mut out: Vec<SectorPiece> = Vec::new();
                for (pos, &m) in modes.iter().enumerate() {
                    let c = clusters.cluster_of(m);
                    match out.last_mut() {
                        Some(p) if p.cluster == c => p.len += 1,
                        _ => out.push(SectorPiece {
                            cluster: c,
                            start: pos,
                            len: 1,
                        }),
                    }
                }
                out
            })
            .collect();
        Ok(Arc::new(Self {
            clusters,
            sectors,
            pieces,
            locate,
        }))
    }

    pub fn clusters(&self) -> &ClusterSet {
        &self.clusters
    }
    pub fn n_modes(&self) -> usize {
        self.clusters.n_modes()
    }
    pub fn n_sectors(&self) -> usize {
        self.sectors.len()
    }
    pub fn sector_modes(&self, s: usize) -> &[usize] {
        &self.sectors[s]
    }
    pub fn sector_pieces(&self, s: usize) -> &[SectorPiece] {
        &self.pieces[s]
    }
    pub fn locate(&self, mode: usize) -> (usize, usize) {
        self.locate[mode]
    }
    pub fn is_single(&self) -> bool {
        self.sectors.len() == 1
    }
}

/// Spectral norm: full SVD up to dimension 64, power iteration on `M^* M` beyond.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows().max(m.ncols()) <= 64 {
        return m.clone().svd(false, false).singular_values.max();
    }
    let g = m.adjoint() * m;
    let n = g.ncols();
    let mut v = DVector::<T>::from_fn(n, |i, _| T::of_real(1.0 + (i as f64 * 0.618_034).fract()));
    let mut lam = 0.0;
    for _ in 0..500 {
        let w = &g * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        v = w.unscale(nw);
        let converged = (nw - lam).abs() <= 1e-12 * nw;
        lam = nw;
        if converged {
            break;
        }
    }
    lam.sqrt()
}

/// Smoothness and decay exponents of the weighted norms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub s: f64,
    pub beta: f64,
}

impl NormParams {
    pub fn new(s: f64, beta: f64) -> Self {
        Self { s, beta }
    }

    /// `(w_a w_b)^beta ((min + |w_a^2 - w_b^2|) / min)^(s/2)`.
    pub fn pair_weight(&self, wa: f64, wb: f64) -> f64 {
        (wa * wb).powf(self.beta) * separation(wa, wb).powf(self.s / 2.0)
    }

    pub fn pair_weight_plus(&self, wa: f64, wb: f64) -> f64 {
        self.pair_weight(wa, wb) * (1.0 + (wa - wb).abs())
    }
}

/// `(min(a,b) + |a^2 - b^2|) / min(a,b)`.
pub fn separation(wa: f64, wb: f64) -> f64 {
    let m = wa.min(wb);
    (m + (wa * wa - wb * wb).abs()) / m
}

/// Reciprocal of [`separation`] on integer weights.
pub fn closeness(j: u64, k: u64) -> f64 {
    let m = j.min(k) as f64;
    m / (m + (j as f64 * j as f64 - k as f64 * k as f64).abs())
}

/// Supremum of a weighted block norm together with the cluster pair attaining it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub value: f64,
    pub witness: Option<(usize, usize)>,
}

impl NormReport {
    fn zero() -> Self {
        Self {
            value: 0.0,
            witness: None,
        }
    }
    fn offer(&mut self, v: f64, pair: (usize, usize)) {
        if v > self.value {
            self.value = v;
            self.witness = Some(pair);
        }
    }
}

/// Matrix indexed by mode pairs, block diagonal over sectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix<T: Scalar> {
    layout: Arc<ZetaLayout>,
    flavor: Flavor,
    sectors: Vec<DMatrix<T>>,
}

impl<T: Scalar> BlockMatrix<T> {
    pub fn zeros(layout: &Arc<ZetaLayout>, flavor: Flavor) -> Self {
        let pm = flavor.per_mode();
        let sectors = (0..layout.n_sectors())
            .map(|s| {
                let d = pm * layout.sector_modes(s).len();
                DMatrix::zeros(d, d)
            })
            .collect();
        Self {
            layout: layout.clone(),
            flavor,
            sectors,
        }
    }

    pub fn identity(layout: &Arc<ZetaLayout>, flavor: Flavor) -> Self {
        let mut m = Self::zeros(layout, flavor);
        for s in &mut m.sectors {
            s.fill_with_identity();
        }
        m
    }

    /// Builds from per-sector dense matrices.
    pub fn from_sectors(layout: &Arc<ZetaLayout>, flavor: Flavor, sectors: Vec<DMatrix<T>>) -> Result<Self> {
        let pm = flavor.per_mode();
        if sectors.len() != layout.n_sectors()
            || sectors
                .iter()
                .enumerate()
                .any(|(s, m)| m.nrows() != pm * layout.sector_modes(s).len() || !m.is_square())
        {
            return Err(KamError::LayoutMismatch("sector matrix shapes".into()));
        }
        Ok(Self {
            layout: layout.clone(),
            flavor,
            sectors,
        })
    }

    /// Builds from a dense matrix in global mode order. Entries coupling different sectors
    /// must vanish.
    pub fn from_dense(layout: &Arc<ZetaLayout>, flavor: Flavor, dense: &DMatrix<T>) -> Result<Self> {
        let pm = flavor.per_mode();
        let n = pm * layout.n_modes();
        if dense.nrows() != n || dense.ncols() != n {
            return Err(KamError::LayoutMismatch(format!(
                "dense matrix is {}x{}, layout needs {n}x{n}",
                dense.nrows(),
                dense.ncols()
            )));
        }
        let mut out = Self::zeros(layout, flavor);
        for i in 0..n {
            let (si, pi) = layout.locate(i / pm);
            for j in 0..n {
                let (sj, pj) = layout.locate(j / pm);
                let v = dense[(i, j)];
                if si == sj {
                    out.sectors[si][(pm * pi + i % pm, pm * pj + j % pm)] = v;
                } else if v.modulus() != 0.0 {
                    return Err(KamError::LayoutMismatch(format!(
                        "entry ({i},{j}) couples sectors {si} and {sj}"
                    )));
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let pm = self.per_mode();
        let n = pm * self.layout.n_modes();
        let mut d = DMatrix::zeros(n, n);
        for (s, m) in self.sectors.iter().enumerate() {
            let modes = self.layout.sector_modes(s);
            for (pi, &gi) in modes.iter().enumerate() {
                for (pj, &gj) in modes.iter().enumerate() {
                    for a in 0..pm {
                        for b in 0..pm {
                            d[(pm * gi + a, pm * gj + b)] = m[(pm * pi + a, pm * pj + b)];
                        }
                    }
                }
            }
        }
        d
    }

    pub fn layout(&self) -> &Arc<ZetaLayout> {
        &self.layout
    }
    pub fn flavor(&self) -> Flavor {
        self.flavor
    }
    pub fn per_mode(&self) -> usize {
        self.flavor.per_mode()
    }
    pub fn sectors(&self) -> &[DMatrix<T>] {
        &self.sectors
    }
    pub fn sectors_mut(&mut self) -> &mut [DMatrix<T>] {
        &mut self.sectors
    }

    /// Entry between scalar coordinates `(mode_i, ci)` and `(mode_j, cj)`.
    pub fn get(&self, mode_i: usize, ci: usize, mode_j: usize, cj: usize) -> T {
        let pm = self.per_mode();
        let (si, pi) = self.layout.locate(mode_i);
        let (sj, pj) = self.layout.locate(mode_j);
        if si != sj {
            return T::zero();
        }
        self.sectors[si][(pm * pi + ci, pm * pj + cj)]
    }

    pub fn set(&mut self, mode_i: usize, ci: usize, mode_j: usize, cj: usize, v: T) -> Result<()> {
        let pm = self.per_mode();
        let (si, pi) = self.layout.locate(mode_i);
        let (sj, pj) = self.layout.locate(mode_j);
        if si != sj {
            if v.modulus() == 0.0 {
                return Ok(());
            }
            return Err(KamError::LayoutMismatch(format!(
                "modes {mode_i} and {mode_j} lie in different sectors"
            )));
        }
        self.sectors[si][(pm * pi + ci, pm * pj + cj)] = v;
        Ok(())
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        flavor_check(self.flavor, other.flavor)?;
        if !Arc::ptr_eq(&self.layout, &other.layout) && *self.layout != *other.layout {
            return Err(KamError::LayoutMismatch("matrices live on different layouts".into()));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(&DMatrix<T>, &DMatrix<T>) -> DMatrix<T>) -> Result<Self> {
        self.compatible(other)?;
        Ok(Self {
            layout: self.layout.clone(),
            flavor: self.flavor,
            sectors: self
                .sectors
                .iter()
                .zip(&other.sectors)
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.compatible(other)?;
        for (a, b) in self.sectors.iter_mut().zip(&other.sectors) {
            a.zip_apply(b, |x, y| *x += c * y);
        }
        Ok(())
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            layout: self.layout.clone(),
            flavor: self.flavor,
            sectors: self.sectors.iter().map(|m| m * c).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        self.map_sectors(|m| m.transpose())
    }

    pub fn map_sectors(&self, f: impl Fn(&DMatrix<T>) -> DMatrix<T>) -> Self {
        Self {
            layout: self.layout.clone(),
            flavor: self.flavor,
            sectors: self.sectors.iter().map(f).collect(),
        }
    }

    /// Blockwise product `(AB)_[a]^[b] = sum_c A_[a]^[c] B_[c]^[b]`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn apply(&self, z: &WeightedVector<T>) -> Result<WeightedVector<T>> {
        flavor_check(self.flavor, z.flavor)?;
        if z.layout.n_modes() != self.layout.n_modes() {
            return Err(KamError::LayoutMismatch("vector length".into()));
        }
        let pm = self.per_mode();
        let mut out = WeightedVector::zeros(&self.layout, self.flavor);
        for (s, m) in self.sectors.iter().enumerate() {
            let modes = self.layout.sector_modes(s);
            let local = DVector::from_fn(pm * modes.len(), |i, _| z.data[pm * modes[i / pm] + i % pm]);
            let y = m * local;
            for (i, v) in y.iter().enumerate() {
                out.data[pm * modes[i / pm] + i % pm] = *v;
            }
        }
        Ok(out)
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.sectors
            .iter()
            .flat_map(|m| m.iter())
            .map(|x| x.modulus())
            .fold(0.0, f64::max)
    }

    /// Frobenius norm of the whole matrix.
    pub fn frobenius(&self) -> f64 {
        self.sectors
            .iter()
            .map(|m| m.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Spectral norms of every nonzero cluster block, as `(cluster_a, cluster_b, norm)`.
    pub fn block_norms(&self) -> Vec<(usize, usize, f64)> {
        let nc = self.layout.clusters().clusters().len();
        let mut acc = vec![0.0f64; nc * nc];
        let pm = self.per_mode();
        for (s, m) in self.sectors.iter().enumerate() {
            let pieces = self.layout.sector_pieces(s);
            for pa in pieces {
                for pb in pieces {
                    let sub = m.view((pm * pa.start, pm * pb.start), (pm * pa.len, pm * pb.len));
                    let nrm = spectral_norm(&sub.clone_owned());
                    let slot = &mut acc[pa.cluster * nc + pb.cluster];
                    *slot = slot.max(nrm);
                }
            }
        }
        let mut out = Vec::new();
        for a in 0..nc {
            for b in 0..nc {
                if acc[a * nc + b] > 0.0 {
                    out.push((a, b, acc[a * nc + b]));
                }
            }
        }
        out
    }

    fn weighted_sup(&self, weight: impl Fn(f64, f64) -> f64) -> NormReport {
        let cl = self.layout.clusters().clusters();
        let mut rep = NormReport::zero();
        for (a, b, nrm) in self.block_norms() {
            let v = weight(cl[a].weight as f64, cl[b].weight as f64) * nrm;
            rep.offer(v, (a, b));
        }
        rep
    }

    /// `sup_{a,b} (w_a w_b)^beta ||M_[a]^[b]|| ((w(a,b) + |w_a^2 - w_b^2|) / w(a,b))^(s/2)`.
    pub fn norm_s_beta(&self, p: NormParams) -> NormReport {
        self.weighted_sup(|wa, wb| p.pair_weight(wa, wb))
    }

    /// Same with the extra factor `1 + |w_a - w_b|`.
    pub fn norm_s_beta_plus(&self, p: NormParams) -> NormReport {
        self.weighted_sup(|wa, wb| p.pair_weight_plus(wa, wb))
    }

    /// Keeps only the blocks selected by `keep(cluster_a, cluster_b)`.
    pub fn filter_blocks(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let pm = self.per_mode();
        let mut out = self.clone();
        for (s, m) in out.sectors.iter_mut().enumerate() {
            let pieces = self.layout.sector_pieces(s);
            for pa in pieces {
                for pb in pieces {
                    if !keep(pa.cluster, pb.cluster) {
                        m.view_mut((pm * pa.start, pm * pb.start), (pm * pa.len, pm * pb.len))
                            .fill(T::zero());
                    }
                }
            }
        }
        out
    }

    /// Largest `|M - M^T|` entry (real flavor) or `|M - M^*|` entry (Hermitian flavor).
    pub fn symmetry_defect(&self) -> f64 {
        self.sectors
            .iter()
            .map(|m| {
                let t = if self.flavor == Flavor::Hermitian {
                    m.adjoint()
                } else {
                    m.transpose()
                };
                (m - t).iter().map(|x| x.modulus()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

impl BlockMatrix<f64> {
    /// Symplectic unit `J = [[0,-1],[1,0]]` on every mode.
    pub fn symplectic(layout: &Arc<ZetaLayout>) -> Self {
        let mut m = Self::zeros(layout, Flavor::Real);
        for s in &mut m.sectors {
            for i in (0..s.nrows()).step_by(2) {
                s[(i, i + 1)] = -1.0;
                s[(i + 1, i)] = 1.0;
            }
        }
        m
    }

    pub fn to_c64(&self) -> BlockMatrix<Complex64> {
        BlockMatrix {
            layout: self.layout.clone(),
            flavor: self.flavor,
            sectors: self.sectors.iter().map(|m| m.map(|x| Complex64::new(x, 0.0))).collect(),
        }
    }
}

impl BlockMatrix<Complex64> {
    pub fn re(&self) -> BlockMatrix<f64> {
        BlockMatrix {
            layout: self.layout.clone(),
            flavor: self.flavor,
            sectors: self.sectors.iter().map(|m| m.map(|x| x.re)).collect(),
        }
    }

    pub fn conj(&self) -> Self {
        self.map_sectors(|m| m.map(|x| x.conj()))
    }
}

/// Per-mode orthogonal projection of a 2x2 block onto `span{I, J}` applied to any 2x2 slice.
fn project_2x2<T: Scalar>(m: &mut DMatrix<T>, i: usize, j: usize) {
    let half = T::of_real(0.5);
    let a = (m[(i, j)] + m[(i + 1, j + 1)]) * half;
    let b = (m[(i + 1, j)] - m[(i, j + 1)]) * half;
    m[(i, j)] = a;
    m[(i + 1, j + 1)] = a;
    m[(i, j + 1)] = -b;
    m[(i + 1, j)] = b;
}

/// Zeroes off-diagonal cluster blocks and projects each 2x2 entry onto `span{I, J}`.
pub fn project_normal_form<T: Scalar>(a: &BlockMatrix<T>) -> Result<BlockMatrix<T>> {
    flavor_check(Flavor::Real, a.flavor)?;
    let mut out = a.filter_blocks(|x, y| x == y);
    for m in &mut out.sectors {
        for i in (0..m.nrows()).step_by(2) {
            for j in (0..m.ncols()).step_by(2) {
                if m[(i, j)].modulus() + m[(i + 1, j)].modulus() + m[(i, j + 1)].modulus() + m[(i + 1, j + 1)].modulus() > 0.0 {
                    project_2x2(m, i, j);
                }
            }
        }
    }
    Ok(out)
}

/// Largest deviation of a real matrix from being a normal form (symmetric, block diagonal,
/// entries in `span{I, J}`). Zero means exact.
pub fn normal_form_defect(a: &BlockMatrix<f64>) -> Result<f64> {
    let p = project_normal_form(a)?;
    Ok(a.sub(&p)?.max_abs().max(a.symmetry_defect()))
}

pub fn is_normal_form(a: &BlockMatrix<f64>, tol: f64) -> Result<bool> {
    Ok(normal_form_defect(a)? <= tol)
}

fn u_mode() -> [[Complex64; 2]; 2] {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    [
        [Complex64::new(r, 0.0), Complex64::new(r, 0.0)],
        [Complex64::new(0.0, -r), Complex64::new(0.0, r)],
    ]
}

fn blockwise_u(dim: usize, conj: bool) -> DMatrix<Complex64> {
    let u = u_mode();
    let mut m = DMatrix::zeros(dim, dim);
    for i in (0..dim).step_by(2) {
        for a in 0..2 {
            for b in 0..2 {
                m[(i + a, i + b)] = if conj { u[a][b].conj() } else { u[a][b] };
            }
        }
    }
    m
}

/// Congruence `U^T A U` with `U = (1/sqrt 2) [[1, 1], [-i, i]]` on every mode, so that
/// `(p, q) = U (xi, eta)` and `<zeta, A zeta> = <w, (U^T A U) w>`.
pub fn to_complex(a: &BlockMatrix<f64>) -> Result<BlockMatrix<Complex64>> {
    flavor_check(Flavor::Real, a.flavor)?;
    let c = a.to_c64();
    let sectors = c
        .sectors
        .iter()
        .map(|m| {
            let u = blockwise_u(m.nrows(), false);
            u.transpose() * m * &u
        })
        .collect();
    Ok(BlockMatrix {
        layout: a.layout.clone(),
        flavor: Flavor::Complex,
        sectors,
    })
}

/// Inverse of [`to_complex`]: `A = conj(U) A' conj(U)^T`. Fails if the result is not real.
pub fn to_real(a: &BlockMatrix<Complex64>) -> Result<BlockMatrix<f64>> {
    flavor_check(Flavor::Complex, a.flavor)?;
    let mut sectors = Vec::with_capacity(a.sectors.len());
    let mut imag: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for m in &a.sectors {
        let ub = blockwise_u(m.nrows(), true);
        let r = &ub * m * ub.transpose();
        for x in r.iter() {
            imag = imag.max(x.im.abs());
            scale = scale.max(x.norm());
        }
        sectors.push(r.map(|x| x.re));
    }
    if imag > 1e-12 * scale.max(1.0) {
        return Err(KamError::InvalidInput(format!(
            "complex matrix has no real preimage (imaginary residue {imag:e})"
        )));
    }
    Ok(BlockMatrix {
        layout: a.layout.clone(),
        flavor: Flavor::Real,
        sectors,
    })
}

/// The Hermitian coupling `Q` with `1/2 <zeta, A zeta> = <xi, Q eta>` of a real normal form.
pub fn hermitian_part(a: &BlockMatrix<f64>, tol: f64) -> Result<BlockMatrix<Complex64>> {
    let defect = normal_form_defect(a)?;
    if defect > tol {
        return Err(KamError::NotNormalForm { defect });
    }
    Ok(hermitian_of_entries(a))
}

/// `Q_ij = (A_pp + A_qq + i (A_pq - A_qp)) / 2` for every mode pair, without any checks.
pub fn hermitian_of_entries<T: Scalar>(a: &BlockMatrix<T>) -> BlockMatrix<Complex64> {
    let sectors = a
        .sectors
        .iter()
        .map(|m| {
            let n = m.nrows() / 2;
            DMatrix::from_fn(n, n, |i, j| {
                let g = |r: usize, c: usize| m[(2 * i + r, 2 * j + c)].to_c64();
                (g(0, 0) + g(1, 1) + Complex64::i() * (g(0, 1) - g(1, 0))) * 0.5
            })
        })
        .collect();
    BlockMatrix {
        layout: a.layout.clone(),
        flavor: Flavor::Hermitian,
        sectors,
    }
}

/// Real normal form with Hermitian coupling `Q`: entry `Re Q I - Im Q J`.
pub fn from_hermitian(q: &BlockMatrix<Complex64>) -> Result<BlockMatrix<f64>> {
    flavor_check(Flavor::Hermitian, q.flavor)?;
    let sectors = q
        .sectors
        .iter()
        .map(|m| {
            let n = m.nrows();
            let mut r = DMatrix::zeros(2 * n, 2 * n);
            for i in 0..n {
                for j in 0..n {
                    let z = m[(i, j)];
                    r[(2 * i, 2 * j)] = z.re;
                    r[(2 * i + 1, 2 * j + 1)] = z.re;
                    r[(2 * i, 2 * j + 1)] = z.im;
                    r[(2 * i + 1, 2 * j)] = -z.im;
                }
            }
            r
        })
        .collect();
    Ok(BlockMatrix {
        layout: q.layout.clone(),
        flavor: Flavor::Real,
        sectors,
    })
}

/// Sequence `zeta = (zeta_a)` with `per_mode` scalars per external mode.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedVector<T: Scalar> {
    layout: Arc<ZetaLayout>,
    flavor: Flavor,
    pub data: DVector<T>,
}

impl<T: Scalar> WeightedVector<T> {
    pub fn zeros(layout: &Arc<ZetaLayout>, flavor: Flavor) -> Self {
        Self {
            layout: layout.clone(),
            flavor,
            data: DVector::zeros(flavor.per_mode() * layout.n_modes()),
        }
    }

    pub fn from_data(layout: &Arc<ZetaLayout>, flavor: Flavor, data: DVector<T>) -> Result<Self> {
        if data.len() != flavor.per_mode() * layout.n_modes() {
            return Err(KamError::LayoutMismatch("vector length".into()));
        }
        Ok(Self {
            layout: layout.clone(),
            flavor,
            data,
        })
    }

    pub fn layout(&self) -> &Arc<ZetaLayout> {
        &self.layout
    }
    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    /// Euclidean norm of the entries of one cluster.
    pub fn cluster_norm(&self, cluster: usize) -> f64 {
        let c = self.layout.clusters().clusters()[cluster];
        let pm = self.flavor.per_mode();
        self.data.rows(pm * c.start, pm * c.len).norm()
    }

    /// `||zeta||_s = (sum_a |zeta_a|^2 w_a^{2s})^{1/2}`.
    pub fn norm_s(&self, s: f64) -> f64 {
        let cs = self.layout.clusters();
        let pm = self.flavor.per_mode();
        self.data
            .iter()
            .enumerate()
            .map(|(i, x)| x.modulus_squared() * (cs.weight(i / pm) as f64).powf(2.0 * s))
            .sum::<f64>()
            .sqrt()
    }
}

/// Rank-one matrix `A_[a]^[b] = X_[a] Y_[b]^T`. Fails if it would couple sectors.
pub fn outer<T: Scalar>(x: &WeightedVector<T>, y: &WeightedVector<T>) -> Result<BlockMatrix<T>> {
    flavor_check(x.flavor, y.flavor)?;
    let layout = &x.layout;
    let pm = x.flavor.per_mode();
    let mut out = BlockMatrix::zeros(layout, x.flavor);
    let support = |v: &WeightedVector<T>| -> Vec<usize> {
        let mut s: Vec<usize> = (0..layout.n_modes())
            .filter(|&m| (0..pm).any(|c| v.data[pm * m + c].modulus() != 0.0))
            .map(|m| layout.locate(m).0)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let (sx, sy) = (support(x), support(y));
    if sx.len() > 1 || sy.len() > 1 || (sx.len() == 1 && sy.len() == 1 && sx != sy) {
        if !(sx.is_empty() || sy.is_empty()) {
            return Err(KamError::LayoutMismatch(
                "outer product couples different sectors".into(),
            ));
        }
    }
    if let (Some(&s), Some(_)) = (sx.first(), sy.first()) {
        let modes = layout.sector_modes(s);
        let m = &mut out.sectors[s];
        for (pi, &gi) in modes.iter().enumerate() {
            for (pj, &gj) in modes.iter().enumerate() {
                for a in 0..pm {
                    for b in 0..pm {
                        m[(pm * pi + a, pm * pj + b)] = x.data[pm * gi + a] * y.data[pm * gj + b];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn cluster_weights(cs: &ClusterSet) -> Vec<f64> {
    cs.clusters().iter().map(|c| c.weight as f64).collect()
}

/// Constant in `|AB|_{s,beta} <= C |A|_{s,beta} |B|_{s,beta+}` on the truncation:
/// `max_a sum_c 1 / (w_c^{2 beta} (1 + |w_a - w_c|))`.
pub fn product_constant(cs: &ClusterSet, beta: f64) -> f64 {
    let w = cluster_weights(cs);
    w.iter()
        .map(|&wa| {
            w.iter()
                .map(|&wc| 1.0 / (wc.powf(2.0 * beta) * (1.0 + (wa - wc).abs())))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Constant in `|AB|_{s,beta+} <= C' |A|_{s,beta+} |B|_{s,beta+}`:
/// `max_{a,b} sum_c (1 + |w_a - w_b|) / (w_c^{2 beta} (1 + |w_a - w_c|)(1 + |w_c - w_b|))`.
pub fn product_constant_plus(cs: &ClusterSet, beta: f64) -> f64 {
    let w = cluster_weights(cs);
    let mut best: f64 = 0.0;
    for &wa in &w {
        for &wb in &w {
            let s: f64 = w
                .iter()
                .map(|&wc| {
                    (1.0 + (wa - wb).abs())
                        / (wc.powf(2.0 * beta) * (1.0 + (wa - wc).abs()) * (1.0 + (wc - wb).abs()))
                })
                .sum();
            best = best.max(s);
        }
    }
    best
}

/// Constant in `||A zeta||_{s+beta} <= C |A|_{s,beta+} ||zeta||_s`: the spectral norm of the
/// cluster kernel `w_a^s / (w_b^{s+beta} (1 + |w_a - w_b|) sep(a,b)^{s/2})`.
pub fn apply_constant(cs: &ClusterSet, p: NormParams) -> f64 {
    let w = cluster_weights(cs);
    let k = DMatrix::from_fn(w.len(), w.len(), |a, b| {
        let (wa, wb) = (w[a], w[b]);
        wa.powf(p.s)
            / (wb.powf(p.s + p.beta) * (1.0 + (wa - wb).abs()) * separation(wa, wb).powf(p.s / 2.0))
    });
    spectral_norm(&k)
}

/// Constant in `|X (x) Y|_{s,beta} <= C ||X||_{s+beta} ||Y||_{s+beta}` for weights `>= 1`.
pub const OUTER_CONSTANT: f64 = 1.0;

/// One CSV row per nonzero scalar entry: `(w_a, idx_a, w_b, idx_b, re, im)` where `idx` is the
/// scalar coordinate index within the cluster.
pub fn matrix_rows<T: Scalar>(m: &BlockMatrix<T>) -> Vec<(u32, usize, u32, usize, f64, f64)> {
    let layout = m.layout();
    let cs = layout.clusters();
    let pm = m.per_mode();
    let mut rows = Vec::new();
    for i in 0..layout.n_modes() {
        for j in 0..layout.n_modes() {
            for a in 0..pm {
                for b in 0..pm {
                    let v = m.get(i, a, j, b).to_c64();
                    if v.norm() != 0.0 {
                        let ci = cs.clusters()[cs.cluster_of(i)];
                        let cj = cs.clusters()[cs.cluster_of(j)];
                        rows.push((
                            ci.weight,
                            pm * (i - ci.start) + a,
                            cj.weight,
                            pm * (j - cj.start) + b,
                            v.re,
                            v.im,
                        ));
                    }
                }
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(sizes: &[usize]) -> Arc<ZetaLayout> {
        ZetaLayout::single(ClusterSet::from_sizes(sizes, 1.0, 3.0).unwrap())
    }

    fn random_real(l: &Arc<ZetaLayout>, rng: &mut ChaCha8Rng) -> BlockMatrix<f64> {
        let n = 2 * l.n_modes();
        let d = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        BlockMatrix::from_dense(l, Flavor::Real, &d).unwrap()
    }

    fn single_block(l: &Arc<ZetaLayout>, ma: usize, mb: usize) -> BlockMatrix<f64> {
        let mut m = BlockMatrix::zeros(l, Flavor::Real);
        m.set(ma, 0, mb, 0, 1.0).unwrap();
        m
    }

    #[test]
    fn norm_examples() {
        let l = layout(&[1, 1]);
        let p = NormParams::new(2.0, 0.5);
        assert!((single_block(&l, 1, 1).norm_s_beta(p).value - 2.0).abs() < 1e-14);
        let off = single_block(&l, 0, 1);
        assert!((off.norm_s_beta(p).value - 4.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((off.norm_s_beta_plus(p).value - 8.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(off.norm_s_beta(p).witness, Some((0, 1)));
        let z = BlockMatrix::<f64>::zeros(&l, Flavor::Real);
        assert_eq!(z.norm_s_beta(p).value, 0.0);
        assert_eq!(z.norm_s_beta(p).witness, None);
    }

    #[test]
    fn power_iteration_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::<f64>::from_fn(80, 70, |_, _| rng.gen_range(-1.0..1.0));
        let exact = m.clone().svd(false, false).singular_values.max();
        assert!((spectral_norm(&m) - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn product_of_disjoint_blocks_vanishes() {
        let l = layout(&[1, 1, 1]);
        let a = single_block(&l, 0, 1);
        let b = single_block(&l, 2, 0);
        assert_eq!(a.mul(&b).unwrap().max_abs(), 0.0);
        let id = BlockMatrix::identity(&l, Flavor::Real);
        assert_eq!(id.mul(&a).unwrap(), a);
    }

    #[test]
    fn flavor_mismatch_is_reported() {
        let l = layout(&[1]);
        let a = BlockMatrix::<Complex64>::zeros(&l, Flavor::Complex);
        let b = BlockMatrix::<Complex64>::zeros(&l, Flavor::Hermitian);
        assert!(matches!(a.mul(&b), Err(KamError::FlavorMismatch { .. })));
    }

    #[test]
    fn dense_oracle_for_products() {
        let l = layout(&[1, 2, 2, 3, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_real(&l, &mut rng);
        let b = random_real(&l, &mut rng);
        let prod = a.mul(&b).unwrap().to_dense();
        assert!((prod - a.to_dense() * b.to_dense()).amax() < 1e-13);
        let z = WeightedVector::from_data(
            &l,
            Flavor::Real,
            DVector::from_fn(2 * l.n_modes(), |i, _| (i as f64).sin()),
        )
        .unwrap();
        let az = a.apply(&z).unwrap();
        assert!((az.data - a.to_dense() * z.data).amax() < 1e-13);
    }

    #[test]
    fn sectors_agree_with_dense() {
        let cs = ClusterSet::from_sizes(&[2, 2, 2], 1.0, 3.0).unwrap();
        let l = ZetaLayout::with_sectors(cs, &[0, 1, 0, 1, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sectors = (0..2)
            .map(|_| DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let a = BlockMatrix::from_sectors(&l, Flavor::Real, sectors).unwrap();
        let dense = a.to_dense();
        let back = BlockMatrix::from_dense(&l, Flavor::Real, &dense).unwrap();
        assert_eq!(back, a);
        let flat = ZetaLayout::single(l.clusters().clone());
        let b = BlockMatrix::from_dense(&flat, Flavor::Real, &dense).unwrap();
        let p = NormParams::new(2.0, 0.5);
        assert!((a.norm_s_beta(p).value - b.norm_s_beta(p).value).abs() < 1e-12);
        let mut bad = dense.clone();
        bad[(0, 2)] = 1.0;
        assert!(BlockMatrix::from_dense(&l, Flavor::Real, &bad).is_err());
    }

    #[test]
    fn complex_change_of_variables() {
        let l = layout(&[1]);
        let q = to_complex(&BlockMatrix::identity(&l, Flavor::Real)).unwrap();
        let s = &q.sectors()[0];
        assert!((s[(0, 1)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(s[(0, 0)].norm() < 1e-15);
        let h = hermitian_part(&BlockMatrix::identity(&l, Flavor::Real), 1e-14).unwrap();
        assert!((h.sectors()[0][(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let j = BlockMatrix::symplectic(&l);
        let jc = to_complex(&j).unwrap();
        assert!(jc.sectors()[0].iter().all(|z| z.re.abs() < 1e-15));
        assert!((jc.sectors()[0].clone() + jc.sectors()[0].transpose()).iter().all(|z| z.norm() < 1e-15));
        let back = to_real(&jc).unwrap();
        assert!((back.to_dense() - j.to_dense()).amax() < 1e-15);
    }

    #[test]
    fn projection_formula() {
        let l = layout(&[1]);
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = BlockMatrix::from_dense(&l, Flavor::Real, &d).unwrap();
        let p = project_normal_form(&a).unwrap().to_dense();
        let expect = DMatrix::from_row_slice(2, 2, &[2.5, -0.5, 0.5, 2.5]);
        assert!((p - expect).amax() < 1e-15);
    }

    #[test]
    fn truncated_constants_are_finite() {
        let cs = ClusterSet::from_sizes(&[1; 20], 1.0, 3.0).unwrap();
        let c = product_constant(&cs, 0.5);
        let cp = product_constant_plus(&cs, 0.5);
        assert!(c > 1.0 && c < 10.0);
        assert!(cp <= 2.0 * c + 1e-12);
        assert!(apply_constant(&cs, NormParams::new(2.0, 0.5)).is_finite());
    }

    #[test]
    fn closeness_is_submultiplicative_small_range() {
        for j in 1..=12u64 {
            for k in 1..=12 {
                for l in 1..=12 {
                    assert!(closeness(j, k) * closeness(k, l) <= closeness(j, l) + 1e-15);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_and_projection(seed in 0u64..1000) {
            let l = layout(&[2, 1, 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_real(&l, &mut rng);
            let sym = a.add(&a.transpose()).unwrap();
            let back = to_real(&to_complex(&sym).unwrap()).unwrap();
            prop_assert!((back.to_dense() - sym.to_dense()).amax() < 1e-12);

            let p = project_normal_form(&sym).unwrap();
            let pp = project_normal_form(&p).unwrap();
            prop_assert!((pp.to_dense() - p.to_dense()).amax() < 1e-15);
            prop_assert!(normal_form_defect(&p).unwrap() < 1e-15);
            let np = NormParams::new(2.0, 0.5);
            prop_assert!(p.norm_s_beta(np).value <= sym.norm_s_beta(np).value * (1.0 + 1e-12));

            let q = hermitian_part(&p, 1e-12).unwrap();
            prop_assert!(q.symmetry_defect() < 1e-14);
            let r = from_hermitian(&q).unwrap();
            prop_assert!((r.to_dense() - p.to_dense()).amax() < 1e-14);
            // xi-eta block of the full congruence equals Q.
            let c = to_complex(&p).unwrap();
            for i in 0..l.n_modes() {
                for j in 0..l.n_modes() {
                    prop_assert!((c.get(i, 0, j, 1) - q.get(i, 0, j, 0)).norm() < 1e-13);
                }
            }
        }

        #[test]
        fn outer_norm_bound(seed in 0u64..200) {
            let l = layout(&[1, 2, 1, 2, 1, 2, 1, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = NormParams::new(2.0, 0.5);
            let mut mk = || {
                let v = WeightedVector::from_data(&l, Flavor::Real,
                    DVector::from_fn(2 * l.n_modes(), |_, _| rng.gen_range(-1.0..1.0))).unwrap();
                let n = v.norm_s(p.s + p.beta);
                WeightedVector::from_data(&l, Flavor::Real, v.data / n).unwrap()
            };
            let x = mk();
            let y = mk();
            let a = outer(&x, &y).unwrap();
            prop_assert!(a.norm_s_beta(p).value <= OUTER_CONSTANT * (1.0 + 1e-12));
        }
    }
}
