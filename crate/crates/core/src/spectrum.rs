//! Spectral data: mode labels, weight clusters, frequencies and small-divisor scans.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, KamError, Result};

/// A Laplace eigenmode on the sphere: degree `j`, index `ell` in `1..=multiplicity(j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeId {
    pub j: u32,
    pub ell: u32,
}

impl ModeId {
    pub fn new(j: u32, ell: u32) -> Self {
        Self { j, ell }
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.j, self.ell)
    }
}

/// Number of independent spherical harmonics of degree `j` on the `d`-sphere.
pub fn harmonic_multiplicity(d: u32, j: u32) -> usize {
    fn binom(n: u64, k: u64) -> u64 {
        if k > n {
            return 0;
        }
        let k = k.min(n - k);
        let mut r: u64 = 1;
        for i in 0..k {
            r = r * (n - i) / (i + 1);
        }
        r
    }
    let (d, j) = (d as u64, j as u64);
    if j < 2 {
        return if j == 0 { 1 } else { (d + 1) as usize };
    }
    (binom(j + d, d) - binom(j + d - 2, d)) as usize
}

/// The internal (action-angle) modes together with their actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSet {
    modes: Vec<ModeId>,
    actions: Vec<f64>,
}

impl AdmissibleSet {
    /// Modes must carry pairwise distinct degrees and actions in `[1, 2]`.
    pub fn new(d: u32, entries: &[(ModeId, f64)]) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (m, action) in entries {
            if m.ell == 0 || m.ell as usize > harmonic_multiplicity(d, m.j) {
                return invalid(format!("mode {m} has no harmonic index {}", m.ell));
            }
            if !(1.0..=2.0).contains(action) {
                return invalid(format!("action of mode {m} must lie in [1, 2], got {action}"));
            }
            if let Some(prev) = seen.insert(m.j, *m) {
                return invalid(format!(
                    "modes {prev} and {m} share degree {}; admissible modes need distinct degrees",
                    m.j
                ));
            }
        }
        Ok(Self {
            modes: entries.iter().map(|e| e.0).collect(),
            actions: entries.iter().map(|e| e.1).collect(),
        })
    }

    pub fn modes(&self) -> &[ModeId] {
        &self.modes
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn contains(&self, m: &ModeId) -> bool {
        self.modes.contains(m)
    }

    pub fn max_weight(&self) -> u32 {
        self.modes.iter().map(|m| m.j).max().unwrap_or(0)
    }
}

/// A maximal run of external modes sharing one weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub weight: u32,
    pub start: usize,
    pub len: usize,
}

impl Cluster {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// External modes in their fixed order, grouped into weight clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    modes: Vec<ModeId>,
    weights: Vec<u32>,
    clusters: Vec<Cluster>,
    mode_cluster: Vec<usize>,
    d_star: f64,
    c_b: f64,
}

impl ClusterSet {
    /// Builds clusters from `(mode, weight)` pairs. Modes are sorted by `(weight, mode)`.
    pub fn from_modes(mut entries: Vec<(ModeId, u32)>, d_star: f64, c_b: f64) -> Result<Self> {
        if entries.is_empty() {
            return invalid("cluster set must contain at least one mode");
        }
        entries.sort_by_key(|(m, w)| (*w, *m));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return invalid(format!("duplicate mode {}", pair[0].0));
            }
        }
        if entries[0].1 == 0 {
            return invalid("external modes must have positive weight");
        }
        let mut clusters: Vec<Cluster> = Vec::new();
        let mut mode_cluster = Vec::with_capacity(entries.len());
        for (i, (_, w)) in entries.iter().enumerate() {
            match clusters.last_mut() {
                Some(c) if c.weight == *w => c.len += 1,
                _ => clusters.push(Cluster {
                    weight: *w,
                    start: i,
                    len: 1,
                }),
            }
            mode_cluster.push(clusters.len() - 1);
        }
        for c in &clusters {
            let bound = c_b * (c.weight as f64).powf(d_star);
            if c.len as f64 > bound + 1e-12 {
                return Err(KamError::ClusterBound {
                    weight: c.weight,
                    size: c.len,
                    bound,
                });
            }
        }
        Ok(Self {
            modes: entries.iter().map(|e| e.0).collect(),
            weights: entries.iter().map(|e| e.1).collect(),
            clusters,
            mode_cluster,
            d_star,
            c_b,
        })
    }

    /// Synthetic cluster set: weight `w` gets `sizes[w-1]` modes (zero sizes are skipped).
    pub fn from_sizes(sizes: &[usize], d_star: f64, c_b: f64) -> Result<Self> {
        let entries = sizes
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| {
                let w = i as u32 + 1;
                (1..=n as u32).map(move |ell| (ModeId::new(w, ell), w))
            })
            .collect();
        Self::from_modes(entries, d_star, c_b)
    }

    pub fn modes(&self) -> &[ModeId] {
        &self.modes
    }
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }
    /// Real dimension of the external phase space (two coordinates per mode).
    pub fn real_dim(&self) -> usize {
        2 * self.modes.len()
    }
    pub fn weight(&self, mode: usize) -> u32 {
        self.weights[mode]
    }
    pub fn weights(&self) -> &[u32] {
        &self.weights
    }
    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }
    pub fn cluster_of(&self, mode: usize) -> usize {
        self.mode_cluster[mode]
    }
    pub fn w_max(&self) -> u32 {
        self.clusters.last().map(|c| c.weight).unwrap_or(0)
    }
    pub fn d_star(&self) -> f64 {
        self.d_star
    }
    pub fn c_b(&self) -> f64 {
        self.c_b
    }
    pub fn index_of(&self, m: &ModeId) -> Option<usize> {
        self.modes.iter().position(|x| x == m)
    }
    pub fn cluster_by_weight(&self, w: u32) -> Option<usize> {
        self.clusters.iter().position(|c| c.weight == w)
    }
}

/// Clusters of external modes for the Klein-Gordon equation on the `d`-sphere.
///
/// Every mode of degree `1..=w_max` not listed in `admissible` becomes external with weight
/// equal to its degree. The constant mode is never external.
pub fn build_kg_clusters(d: u32, w_max: u32, admissible: &AdmissibleSet) -> Result<ClusterSet> {
    if d < 1 {
        return invalid("sphere dimension must be at least 1");
    }
    if w_max < 1 {
        return invalid("W_max must be at least 1");
    }
    let mut entries = Vec::new();
    for j in 1..=w_max {
        for ell in 1..=harmonic_multiplicity(d, j) as u32 {
            let m = ModeId::new(j, ell);
            if !admissible.contains(&m) {
                entries.push((m, j));
            }
        }
    }
    ClusterSet::from_modes(entries, (d - 1) as f64, (d + 1) as f64)
}

/// `sqrt(j(j+d-1) + m + delta * rho)`.
pub fn kg_frequency(j: u32, d: u32, m: f64, delta: f64, rho: f64) -> Result<f64> {
    if !(m > 0.0) {
        return invalid(format!("mass must be positive, got {m}"));
    }
    let jf = j as f64;
    let value = jf * (jf + d as f64 - 1.0) + m + delta * rho;
    if !(value > 0.0) {
        return Err(KamError::NegativeRadicand { j, value });
    }
    Ok(value.sqrt())
}

/// External eigenvalues with the asymptotic constants they satisfy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    lambdas: Vec<f64>,
    gamma: f64,
    c0: f64,
}

impl SpectrumModel {
    /// Validates `c0 w^gamma <= lambda <= w^gamma / c0` and `|lambda_a - lambda_b| >= c0 |w_a - w_b|`.
    pub fn new(clusters: &ClusterSet, lambdas: Vec<f64>, gamma: f64, c0: f64) -> Result<Self> {
        if lambdas.len() != clusters.n_modes() {
            return invalid("one eigenvalue per external mode is required");
        }
        for (i, &l) in lambdas.iter().enumerate() {
            let wg = (clusters.weight(i) as f64).powf(gamma);
            if !(l >= c0 * wg - 1e-12 && l <= wg / c0 + 1e-12) {
                return Err(KamError::Hypothesis(format!(
                    "eigenvalue {l} of mode {} is outside [{}, {}]",
                    clusters.modes()[i],
                    c0 * wg,
                    wg / c0
                )));
            }
        }
        // Separation is checked on cluster representatives (eigenvalues within a cluster may differ).
        for a in 0..lambdas.len() {
            for b in (a + 1)..lambdas.len() {
                let dw = (clusters.weight(a) as f64 - clusters.weight(b) as f64).abs();
                if dw > 0.0 && (lambdas[a] - lambdas[b]).abs() < c0 * dw - 1e-12 {
                    return Err(KamError::Hypothesis(format!(
                        "eigenvalues of modes {} and {} are closer than {}",
                        clusters.modes()[a],
                        clusters.modes()[b],
                        c0 * dw
                    )));
                }
            }
        }
        Ok(Self {
            lambdas,
            gamma,
            c0,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn c0(&self) -> f64 {
        self.c0
    }
}

/// Klein-Gordon eigenvalues of the external modes (no parameter shift), with `gamma = 1, c0 = 1/2`.
pub fn kg_spectrum(clusters: &ClusterSet, d: u32, m: f64) -> Result<SpectrumModel> {
    let lambdas = clusters
        .modes()
        .iter()
        .map(|md| kg_frequency(md.j, d, m, 0.0, 0.0))
        .collect::<Result<Vec<_>>>()?;
    SpectrumModel::new(clusters, lambdas, 1.0, 0.5)
}

/// Internal frequencies `omega_0(rho)` of the Klein-Gordon problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgFrequencies {
    pub degrees: Vec<u32>,
    pub d: u32,
    pub m: f64,
    pub delta: f64,
}

impl KgFrequencies {
    pub fn new(admissible: &AdmissibleSet, d: u32, m: f64, delta: f64) -> Self {
        Self {
            degrees: admissible.modes().iter().map(|x| x.j).collect(),
            d,
            m,
            delta,
        }
    }

    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    pub fn omega(&self, rho: &[f64]) -> Result<Vec<f64>> {
        if rho.len() != self.degrees.len() {
            return invalid("parameter dimension does not match the number of internal modes");
        }
        self.degrees
            .iter()
            .zip(rho)
            .map(|(&j, &r)| kg_frequency(j, self.d, self.m, self.delta, r))
            .collect()
    }

    /// Diagonal of the Jacobian `d omega_i / d rho_i`.
    pub fn d_omega(&self, rho: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .omega(rho)?
            .iter()
            .map(|w| self.delta / (2.0 * w))
            .collect())
    }
}

/// Product grid of parameter samples (cell centres) on `[1,2]^n` with an exclusion mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoGrid {
    n: usize,
    per_axis: usize,
    mask: Vec<bool>,
}

impl RhoGrid {
    pub const DEFAULT_PER_AXIS: usize = 64;

    pub fn new(n: usize, per_axis: usize) -> Result<Self> {
        if n == 0 || per_axis == 0 {
            return invalid("parameter grid needs n >= 1 and at least one sample per axis");
        }
        let total = per_axis
            .checked_pow(n as u32)
            .ok_or_else(|| KamError::InvalidInput("parameter grid too large".into()))?;
        Ok(Self {
            n,
            per_axis,
            mask: vec![true; total],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn per_axis(&self) -> usize {
        self.per_axis
    }
    pub fn len(&self) -> usize {
        self.mask.len()
    }
    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut rest = idx;
        (0..self.n)
            .map(|_| {
                let i = rest % self.per_axis;
                rest /= self.per_axis;
                1.0 + (i as f64 + 0.5) / self.per_axis as f64
            })
            .collect()
    }

    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    pub fn retained_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// The box `[1,2]^n` has unit volume.
    pub fn box_volume(&self) -> f64 {
        1.0
    }

    pub fn estimated_measure(&self) -> f64 {
        self.retained_fraction() * self.box_volume()
    }

    pub fn exclude(&mut self, idx: usize) {
        self.mask[idx] = false;
    }

    /// Intersection of masks; both grids must have the same shape.
    pub fn intersect(&self, other: &RhoGrid) -> Result<RhoGrid> {
        if self.n != other.n || self.per_axis != other.per_axis {
            return invalid("parameter grids have different shapes");
        }
        Ok(RhoGrid {
            n: self.n,
            per_axis: self.per_axis,
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// The four divisor families controlled by the non-resonance hypotheses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DivisorFamily {
    /// `<k, omega>`
    Zero,
    /// `<k, omega> + lambda_a`
    Single,
    /// `<k, omega> + lambda_a + lambda_b`
    Sum,
    /// `<k, omega> + lambda_a - lambda_b`
    Difference,
}

impl DivisorFamily {
    pub const ALL: [DivisorFamily; 4] = [
        DivisorFamily::Zero,
        DivisorFamily::Single,
        DivisorFamily::Sum,
        DivisorFamily::Difference,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DivisorFamily::Zero => "zero",
            DivisorFamily::Single => "single",
            DivisorFamily::Sum => "sum",
            DivisorFamily::Difference => "difference",
        }
    }

    /// Lower bound demanded of `|divisor|` at scale `scale` (either `delta_0` or `kappa`).
    pub fn threshold(&self, scale: f64, w_a: f64, w_b: f64) -> f64 {
        match self {
            DivisorFamily::Zero => scale,
            DivisorFamily::Single => scale * w_a,
            DivisorFamily::Sum => scale * (1.0 + w_a + w_b),
            DivisorFamily::Difference => scale * (1.0 + (w_a - w_b).abs()),
        }
    }
}

pub fn dot_k(k: &[i32], omega: &[f64]) -> f64 {
    k.iter().zip(omega).map(|(&ki, &wi)| ki as f64 * wi).sum()
}

/// Signed divisor of the given family; `lambda_a`/`lambda_b` are required where the family uses them.
pub fn divisor(
    family: DivisorFamily,
    k: &[i32],
    omega: &[f64],
    lambda_a: Option<f64>,
    lambda_b: Option<f64>,
) -> Result<f64> {
    if k.len() != omega.len() {
        return invalid("k and omega have different lengths");
    }
    let x = dot_k(k, omega);
    let need = |l: Option<f64>, which: &str| {
        l.ok_or_else(|| {
            KamError::InvalidInput(format!("{} divisor needs eigenvalue {which}", family.name()))
        })
    };
    Ok(match family {
        DivisorFamily::Zero => x,
        DivisorFamily::Single => x + need(lambda_a, "a")?,
        DivisorFamily::Sum => x + need(lambda_a, "a")? + need(lambda_b, "b")?,
        DivisorFamily::Difference => x + need(lambda_a, "a")? - need(lambda_b, "b")?,
    })
}

/// All integer vectors with `|k|_1 <= n_max`, in lexicographic order.
pub fn lattice_ball(n: usize, n_max: usize) -> Vec<Vec<i32>> {
    fn rec(n: usize, budget: i32, prefix: &mut Vec<i32>, out: &mut Vec<Vec<i32>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for v in -budget..=budget {
            prefix.push(v);
            rec(n, budget - v.abs(), prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, n_max as i32, &mut Vec::with_capacity(n), &mut out);
    out
}

pub fn l1(k: &[i32]) -> usize {
    k.iter().map(|x| x.unsigned_abs() as usize).sum()
}

/// Smallest divisor seen for one family, with its location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinDivisor {
    pub value: f64,
    /// `|divisor| / threshold`; below one means a violation.
    pub ratio: f64,
    pub k: Vec<i32>,
    pub a: Option<ModeId>,
    pub b: Option<ModeId>,
    pub violations: usize,
}

/// Result of a small-divisor scan over a parameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionLedger {
    pub kappa: f64,
    #[serde(rename = "N")]
    pub n_cut: usize,
    pub delta0: f64,
    pub retained_fraction: f64,
    pub min_divisors: BTreeMap<String, MinDivisor>,
}

/// Distinct `(lambda, weight)` levels with a representative mode each.
fn spectral_levels(spectrum: &SpectrumModel, clusters: &ClusterSet) -> Vec<(f64, f64, ModeId)> {
    let mut levels: Vec<(f64, f64, ModeId)> = Vec::new();
    for (i, &l) in spectrum.lambdas().iter().enumerate() {
        let w = clusters.weight(i) as f64;
        if !levels.iter().any(|(l2, w2, _)| *l2 == l && *w2 == w) {
            levels.push((l, w, clusters.modes()[i]));
        }
    }
    levels
}

/// Marks samples where a second-Melnikov divisor falls below `kappa (1 + |w_a - w_b|)` for
/// some `0 < |k|_1 <= N`. The other three families are checked against `delta_0`-scaled
/// bounds and reported, but do not exclude.
pub fn exclusion_scan(
    grid: &RhoGrid,
    frequencies: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    spectrum: &SpectrumModel,
    clusters: &ClusterSet,
    kappa: f64,
    n_cut: usize,
    delta0: f64,
) -> Result<(RhoGrid, ExclusionLedger)> {
    if !(kappa > 0.0) || !(delta0 > 0.0) {
        return invalid("kappa and delta_0 must be positive");
    }
    let levels = spectral_levels(spectrum, clusters);
    let ks = lattice_ball(grid.n(), n_cut);
    let mut out = grid.clone();
    let mut mins: BTreeMap<DivisorFamily, MinDivisor> = BTreeMap::new();
    let mut record = |fam: DivisorFamily,
                      value: f64,
                      thr: f64,
                      k: &[i32],
                      a: Option<ModeId>,
                      b: Option<ModeId>| {
        let v = value.abs();
        let ratio = v / thr;
        let e = mins.entry(fam).or_insert(MinDivisor {
            value: f64::INFINITY,
            ratio: f64::INFINITY,
            k: vec![],
            a: None,
            b: None,
            violations: 0,
        });
        if ratio < 1.0 {
            e.violations += 1;
        }
        if v < e.value {
            e.value = v;
            e.ratio = ratio;
            e.k = k.to_vec();
            e.a = a;
            e.b = b;
        }
        ratio < 1.0
    };
    for idx in 0..grid.len() {
        if !grid.mask()[idx] {
            continue;
        }
        let rho = grid.point(idx);
        let omega = frequencies(&rho)?;
        if omega.len() != grid.n() {
            return invalid("frequency map returned the wrong dimension");
        }
        let mut excluded = false;
        for k in &ks {
            let x = dot_k(k, &omega);
            let nonzero = l1(k) > 0;
            if nonzero {
                record(DivisorFamily::Zero, x, delta0, k, None, None);
            }
            for &(la, wa, ma) in &levels {
                record(
                    DivisorFamily::Single,
                    x + la,
                    DivisorFamily::Single.threshold(delta0, wa, 0.0),
                    k,
                    Some(ma),
                    None,
                );
                for &(lb, wb, mb) in &levels {
                    record(
                        DivisorFamily::Sum,
                        x + la + lb,
                        DivisorFamily::Sum.threshold(delta0, wa, wb),
                        k,
                        Some(ma),
                        Some(mb),
                    );
                    if nonzero {
                        let thr = DivisorFamily::Difference.threshold(kappa, wa, wb);
                        if record(DivisorFamily::Difference, x + la - lb, thr, k, Some(ma), Some(mb)) {
                            excluded = true;
                        }
                    }
                }
            }
        }
        if excluded {
            out.exclude(idx);
        }
    }
    let ledger = ExclusionLedger {
        kappa,
        n_cut,
        delta0,
        retained_fraction: out.retained_fraction(),
        min_divisors: mins
            .into_iter()
            .map(|(f, m)| (f.name().to_string(), m))
            .collect(),
    };
    Ok((out, ledger))
}

/// `delta_0 = (delta / (2 sqrt(2 + d + m) max_w))^3` with `max_w` the largest internal degree.
pub fn delta0_kg(delta: f64, d: u32, m: f64, admissible: &AdmissibleSet) -> Result<f64> {
    if !(delta >= 0.0) {
        return invalid("delta must be nonnegative");
    }
    if admissible.is_empty() {
        return invalid("admissible set is empty");
    }
    let radicand = 2.0 + d as f64 + m;
    if !(radicand > 0.0) {
        return invalid("2 + d + m must be positive");
    }
    let wmax = admissible.max_weight() as f64;
    if wmax == 0.0 {
        return invalid("admissible set has no mode of positive degree");
    }
    Ok((delta / (2.0 * radicand.sqrt() * wmax)).powi(3))
}
