//! Klein-Gordon equation on the 2-sphere: harmonics, quadrature, the perturbation and the
//! problem assembly fed to the KAM engine.

pub mod model;
pub mod problem;
pub mod quadrature;

pub use model::{required_degree, KgModel, KgTables, Nonlinearity, PowerTerm};
pub use problem::{assemble_perturbation, build_problem, gate_check, verify_decay, DecayReport, GateCheck, KgCaps, KgConfig, KgGridConfig, KgProblem, KG_BETA};
pub use quadrature::{azimuthal_order, gauss_legendre, harmonic_index, orthonormality_defect, real_harmonics, SphereQuadrature};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DVector;

    use super::*;
    use crate::blocks::{NormParams, ZetaLayout};
    use crate::hamiltonian::{Caps, FTSeries, PerturbationModel};
    use crate::kam::GatePolicy;
    use crate::spectrum::{build_kg_clusters, kg_spectrum, AdmissibleSet, ModeId};

    fn config(admissible: Vec<(u32, u32, f64)>, w_max: u32, nl: Vec<PowerTerm>) -> KgConfig {
        KgConfig {
            d: 2,
            m: 1.0,
            delta: 0.1,
            eps: 1e-3,
            admissible,
            w_max,
            caps: KgCaps { k_max: 4, d_r: 2, d_zeta: 4 },
            nonlinearity: nl,
            grid: KgGridConfig { samples_per_axis: 4 },
            quad_degree: None,
        }
    }

    fn quartic() -> Vec<PowerTerm> {
        Nonlinearity::power(4).terms
    }

    /// Tables for a nonlinearity that fails `validate` (quadratic test fields).
    fn raw_tables(admissible: &[(u32, u32, f64)], w_max: u32, nl: &Nonlinearity) -> KgTables {
        let entries: Vec<(ModeId, f64)> = admissible.iter().map(|&(j, l, i)| (ModeId::new(j, l), i)).collect();
        let adm = AdmissibleSet::new(2, &entries).unwrap();
        let cs = build_kg_clusters(2, w_max, &adm).unwrap();
        let lam = kg_spectrum(&cs, 2, 1.0).unwrap().lambdas().to_vec();
        let lay = ZetaLayout::single(cs);
        KgTables::new(nl, &adm, &lay, &lam, SphereQuadrature::new(required_degree(nl, w_max) + 2)).unwrap()
    }

    #[test]
    fn scalar_frequency_example() {
        let p = build_problem(&config(vec![(1, 1, 1.5)], 3, quartic()), GatePolicy::Rescale).unwrap();
        for rho in [1.0, 1.5, 2.0] {
            let w = p.omega0(&[rho]).unwrap();
            assert!((w[0] - (3.0 + 0.1 * rho).sqrt()).abs() < 1e-15);
        }
        assert!(!p.gate.satisfied);
        assert!(matches!(build_problem(&p.config, GatePolicy::Enforce), Err(crate::KamError::Gate(_))));
    }

    #[test]
    fn empty_nonlinearity_gives_zero() {
        let p = build_problem(&config(vec![(1, 1, 1.5), (2, 1, 1.2)], 3, vec![]), GatePolicy::Rescale).unwrap();
        let f = p.perturbation_series(&[1.5, 1.5]).unwrap();
        assert!(f.is_empty());
        let m = p.model(&[1.5, 1.5]).unwrap();
        let z = DVector::from_fn(2 * p.clusters.n_modes(), |i, _| 0.01 * i as f64);
        assert_eq!(m.value(&[0.3, 0.2], &[0.0, 0.0], &z).unwrap(), 0.0);
    }

    #[test]
    fn odd_internal_cubic_vanishes() {
        let p = build_problem(&config(vec![(1, 1, 1.5)], 2, Nonlinearity::power(3).terms), GatePolicy::Rescale).unwrap();
        let f = p.perturbation_series(&[1.5]).unwrap();
        let internal: f64 = f
            .terms()
            .iter()
            .filter(|(m, _)| m.zeta.is_empty() && m.r_degree() == 0)
            .map(|(_, c)| c.norm())
            .fold(0.0, f64::max);
        assert!(internal < 1e-17, "{internal}");
        assert!(f.terms().values().any(|c| c.norm() > 1e-6));
        assert_eq!(f.reality_defect(), 0.0);
    }

    #[test]
    fn quadratic_coefficients_reproduce_orthonormality() {
        let nl = Nonlinearity {
            terms: vec![PowerTerm { p: 2, constant: 2.0, harmonics: vec![] }],
        };
        let t = raw_tables(&[(1, 1, 1.5)], 2, &nl);
        let f = assemble_perturbation(&t, &[3f64.sqrt()], 1.0, Caps { k_max: 2, d_r: 1, d_zeta: 2 }).unwrap();
        let cs = t.layout.clusters();
        let lam = kg_spectrum(cs, 2, 1.0).unwrap().lambdas().to_vec();
        for a in 0..cs.n_modes() {
            for b in a..cs.n_modes() {
                let m = crate::hamiltonian::Monomial::new(vec![0], vec![0], vec![(2 * a) as u16, (2 * b) as u16]);
                let want = if a == b { 1.0 / lam[a] } else { 0.0 };
                assert!((f.get(&m).re - want).abs() < 1e-13, "{a} {b}");
            }
        }
    }

    #[test]
    fn constant_second_derivative_hessian() {
        let c = 1.7;
        let nl = Nonlinearity {
            terms: vec![PowerTerm { p: 2, constant: c, harmonics: vec![] }],
        };
        let t = Arc::new(raw_tables(&[(2, 1, 1.5)], 3, &nl));
        let model = KgModel::new(t.clone(), &[7f64.sqrt()], 1.0).unwrap();
        let dim = 2 * t.layout.n_modes();
        let h = model.hessian_blocks(&[0.4], &[0.0], &DVector::zeros(dim)).unwrap();
        let cs = t.layout.clusters();
        let idx = cs.index_of(&ModeId::new(1, 2)).unwrap();
        assert!((h.get(idx, 0, idx, 0) - c / 3f64.sqrt()).abs() < 1e-13);
        assert!((h.get(idx, 0, idx, 0) / c - 0.577_350_269_189_6).abs() < 1e-12);
        let dense = h.to_dense();
        for a in 0..dim {
            for b in 0..dim {
                let want = if a == b && a % 2 == 0 { c / kg_spectrum(cs, 2, 1.0).unwrap().lambdas()[a / 2] } else { 0.0 };
                assert!((dense[(a, b)] - want).abs() < 1e-13);
                assert_eq!(dense[(a, b)], dense[(b, a)]);
            }
        }
    }

    #[test]
    fn single_harmonic_selection_rules() {
        let nl = Nonlinearity {
            terms: vec![PowerTerm { p: 2, constant: 0.0, harmonics: vec![(2, 1, 1.0)] }],
        };
        let t = Arc::new(raw_tables(&[(1, 2, 1.5)], 4, &nl));
        let model = KgModel::new(t.clone(), &[3f64.sqrt()], 1.0).unwrap();
        let dim = 2 * t.layout.n_modes();
        let h = model.hessian_blocks(&[0.0], &[0.0], &DVector::zeros(dim)).unwrap().to_dense();
        let cs = t.layout.clusters();
        let lam = kg_spectrum(cs, 2, 1.0).unwrap().lambdas().to_vec();
        // independent triple products on a finer rule
        let fine = SphereQuadrature::new(30);
        let ys: Vec<Vec<f64>> = fine.nodes.iter().map(|&(c, l)| real_harmonics(4, c, l)).collect();
        let g = harmonic_index(ModeId::new(2, 1));
        let mut nonzero = 0;
        for a in 0..cs.n_modes() {
            for b in 0..cs.n_modes() {
                let (ma, mb) = (cs.modes()[a], cs.modes()[b]);
                let (ia, ib) = (harmonic_index(ma), harmonic_index(mb));
                let tri: f64 = ys.iter().zip(&fine.weights).map(|(y, w)| w * y[g] * y[ia] * y[ib]).sum();
                let want = tri / (lam[a] * lam[b]).sqrt();
                assert!((h[(2 * a, 2 * b)] - want).abs() < 1e-13);
                let (ja, jb) = (ma.j as i32, mb.j as i32);
                if (ja + jb) % 2 == 1 || (ja - jb).abs() > 2 || ja + jb < 2 {
                    assert!(h[(2 * a, 2 * b)].abs() < 1e-14, "{ma} {mb}");
                }
                if h[(2 * a, 2 * b)].abs() > 1e-8 {
                    nonzero += 1;
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn zero_state_hessian_vanishes() {
        let p = build_problem(&config(vec![(1, 1, 1.5), (2, 1, 1.2)], 4, quartic()), GatePolicy::Rescale).unwrap();
        let dim = 2 * p.clusters.n_modes();
        let half = std::f64::consts::FRAC_PI_2;
        let h = p.hessian_blocks(&[1.5, 1.5], &[half, half], &[0.0, 0.0], &DVector::zeros(dim)).unwrap();
        assert!(h.max_abs() < 1e-30);
    }

    fn compare(p: &KgProblem, rho: &[f64], theta: &[f64], z: &DVector<f64>) {
        let n = p.n();
        let m = p.model(rho).unwrap();
        let f: FTSeries = p.perturbation_series(rho).unwrap();
        let r0 = vec![0.0; n];
        let scale = p.config.eps;
        assert!((m.value(theta, &r0, z).unwrap() - f.eval(theta, &r0, z)).abs() < 1e-13 * scale);
        let dm = m.derivs(theta, &r0, z).unwrap();
        let ds = PerturbationModel::derivs(&f, theta, &r0, z).unwrap();
        assert!((&dm.grad_r - &ds.grad_r).amax() < 1e-12 * scale);
        assert!((&dm.grad_zeta - &ds.grad_zeta).amax() < 1e-12 * scale);
        assert!((&dm.hess_rr - &ds.hess_rr).amax() < 1e-12 * scale);
        assert!((&dm.hess_rz - &ds.hess_rz).amax() < 1e-12 * scale);
        for (a, b) in dm.hess_zz.iter().zip(&ds.hess_zz) {
            assert!((a - b).amax() < 1e-12 * scale);
        }
    }

    #[test]
    fn series_and_quadrature_model_agree() {
        let mut c = config(vec![(1, 1, 1.5), (2, 1, 1.2)], 2, quartic());
        c.caps = KgCaps { k_max: 4, d_r: 2, d_zeta: 4 };
        let p = build_problem(&c, GatePolicy::Rescale).unwrap();
        let dim = 2 * p.clusters.n_modes();
        let z = DVector::from_fn(dim, |i, _| 0.05 * ((i as f64 * 1.3).sin()));
        compare(&p, &[1.2, 1.7], &[0.3, -1.1], &z);
    }

    #[test]
    fn zonal_problem_uses_order_sectors() {
        let p = build_problem(&config(vec![(1, 2, 1.5), (2, 3, 1.5)], 3, quartic()), GatePolicy::Rescale).unwrap();
        assert!(p.zonal);
        assert_eq!(p.layout.n_sectors(), 7);
        let m = p.model(&[1.5, 1.5]).unwrap();
        let dim = 2 * p.clusters.n_modes();
        // a zeta in the m = 0 sector keeps the Hessian sector-diagonal
        let mut z = DVector::zeros(dim);
        for (i, md) in p.clusters.modes().iter().enumerate() {
            if azimuthal_order(*md) == 0 {
                z[2 * i] = 0.07;
            }
        }
        let (d, full) = m.derivs_full(&[0.2, 0.9], &[0.01, -0.02], &z).unwrap();
        let assembled = crate::hamiltonian::assemble_sectors(&p.layout, &d.hess_zz);
        assert!((&full - assembled).amax() < 1e-15);
    }

    #[test]
    fn model_derivatives_match_finite_differences() {
        let p = build_problem(&config(vec![(1, 1, 1.5), (2, 1, 1.2)], 3, quartic()), GatePolicy::Rescale).unwrap();
        let m = p.model(&[1.3, 1.6]).unwrap();
        let dim = 2 * p.clusters.n_modes();
        let th = [0.4, 2.1];
        let r = [0.02, -0.01];
        let z = DVector::from_fn(dim, |i, _| 0.03 * ((i as f64 * 0.7).cos()));
        let d = m.derivs(&th, &r, &z).unwrap();
        let h = 1e-5;
        for a in 0..2 {
            let mut rp = r;
            let mut rm = r;
            rp[a] += h;
            rm[a] -= h;
            let fd = (m.value(&th, &rp, &z).unwrap() - m.value(&th, &rm, &z).unwrap()) / (2.0 * h);
            assert!((d.grad_r[a] - fd).abs() < 1e-9 * p.config.eps, "r {a}");
            let dp = m.derivs(&th, &rp, &z).unwrap();
            let dm = m.derivs(&th, &rm, &z).unwrap();
            for b in 0..2 {
                let fd = (dp.grad_r[b] - dm.grad_r[b]) / (2.0 * h);
                assert!((d.hess_rr[(a, b)] - fd).abs() < 1e-8 * p.config.eps);
            }
            for c in 0..dim {
                let fd = (dp.grad_zeta[c] - dm.grad_zeta[c]) / (2.0 * h);
                assert!((d.hess_rz[(a, c)] - fd).abs() < 1e-8 * p.config.eps);
            }
        }
        for c in 0..dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let fd = (m.value(&th, &r, &zp).unwrap() - m.value(&th, &r, &zm).unwrap()) / (2.0 * h);
            assert!((d.grad_zeta[c] - fd).abs() < 1e-9 * p.config.eps);
        }
    }

    #[test]
    fn gradient_norm_is_stable_under_truncation() {
        let s = 2.0;
        let norm = |w_max: u32| {
            let p = build_problem(&config(vec![(1, 1, 1.5), (2, 1, 1.2)], w_max, quartic()), GatePolicy::Rescale).unwrap();
            let m = p.model(&[1.5, 1.5]).unwrap();
            let d = m.derivs(&[0.3, 0.8], &[0.0, 0.0], &DVector::zeros(2 * p.clusters.n_modes())).unwrap();
            let cs = &p.clusters;
            (0..cs.n_modes())
                .map(|b| (cs.weight(b) as f64).powf(2.0 * (s + 0.5)) * d.grad_zeta[2 * b].powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (a, b) = (norm(8), norm(16));
        assert!(a > 0.0 && ((b - a) / a).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn diagonal_hessian_has_no_fitted_decay() {
        let nl = Nonlinearity {
            terms: vec![PowerTerm { p: 2, constant: 1.0, harmonics: vec![] }],
        };
        let t = Arc::new(raw_tables(&[(1, 1, 1.5)], 4, &nl));
        let m = KgModel::new(t.clone(), &[3f64.sqrt()], 1.0).unwrap();
        let h = m.hessian_blocks(&[0.0], &[0.0], &DVector::zeros(2 * t.layout.n_modes())).unwrap();
        let params = NormParams::new(3.5, 0.5);
        let rep = verify_decay(&h, params).unwrap();
        assert!(rep.exponent.is_none() && rep.passes);
        let cs = t.layout.clusters();
        let want = cs.clusters().iter().map(|c| {
            let w = c.weight as f64;
            let lam = (w * (w + 1.0) + 1.0).sqrt();
            w / lam
        });
        let want = want.fold(0.0, f64::max);
        assert!((rep.norm - want).abs() < 1e-12, "{} vs {want}", rep.norm);
    }

    #[test]
    fn decay_fit_separates_flat_and_decaying_matrices() {
        use crate::instances::{random_layout, random_weighted_matrix};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let layout = random_layout(&mut rng, 12, 2).unwrap();
        let params = NormParams::new(3.5, 0.5);
        let flat = random_weighted_matrix(&mut rng, &layout, |_, _| 1.0);
        let rep = verify_decay(&flat, params).unwrap();
        assert!(!rep.passes, "flat matrix fitted {:?}", rep.exponent);
        let e = 2.5;
        let decaying = random_weighted_matrix(&mut rng, &layout, |a, b| {
            (a * b).powf(params.beta) * crate::blocks::separation(a, b).powf(e)
        });
        let rep = verify_decay(&decaying, params).unwrap();
        let fit = rep.exponent.unwrap();
        assert!(rep.passes && (fit - e).abs() < 0.3, "fitted {fit}");
    }
}
