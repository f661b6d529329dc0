//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kam_core::blocks::{
    apply_constant, product_constant, product_constant_plus, NormParams, ZetaLayout,
};
use kam_core::flow::{lie_pullback, pullback_grid, FlowSettings, JetFlow};
use kam_core::hamiltonian::{jet_norm, Domain, FourierBall, Jet, NormVariant, ThetaGrid};
use kam_core::homological::{delort_bound_check, residual, solve_jet};
use kam_core::instances::{
    random_division_problem, random_jet, random_layout, random_normal_form, random_weighted_matrix,
    random_weighted_vector,
};
use kam_core::kam::{iterate, GatePolicy, KamSettings};
use kam_core::kg::{build_problem, verify_decay, KgCaps, KgConfig, KgGridConfig, Nonlinearity};
use kam_core::spectrum::{
    build_kg_clusters, delta0_kg, exclusion_scan, kg_spectrum, AdmissibleSet, KgFrequencies, ModeId,
    RhoGrid,
};
use kam_core::spectrum::ClusterSet;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn block_algebra() -> Outcome {
    let p = NormParams::new(2.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut violations, mut worst) = (0usize, [0.0f64; 3]);
    for _ in 0..500 {
        let layout = random_layout(&mut rng, 20, 3).unwrap();
        let cs = layout.clusters();
        let (c, cp, ca) = (product_constant(cs, p.beta), product_constant_plus(cs, p.beta), apply_constant(cs, p));
        let a = random_weighted_matrix(&mut rng, &layout, |x, y| p.pair_weight(x, y));
        let a_plus = random_weighted_matrix(&mut rng, &layout, |x, y| p.pair_weight_plus(x, y));
        let b = random_weighted_matrix(&mut rng, &layout, |x, y| p.pair_weight_plus(x, y));
        let z = random_weighted_vector(&mut rng, &layout, p.s);
        let ab = a.mul(&b).unwrap();
        let ratios = [
            ab.norm_s_beta(p).value / (c * a.norm_s_beta(p).value * b.norm_s_beta_plus(p).value),
            a_plus.mul(&b).unwrap().norm_s_beta_plus(p).value
                / (cp * a_plus.norm_s_beta_plus(p).value * b.norm_s_beta_plus(p).value),
            b.apply(&z).unwrap().norm_s(p.s + p.beta) / (ca * b.norm_s_beta_plus(p).value * z.norm_s(p.s)),
        ];
        for (w, r) in worst.iter_mut().zip(ratios) {
            *w = w.max(r);
            if r > 1.0 + 1e-12 {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "500 pairs, {violations} violations; largest lhs/rhs (i) {:.3} (ii) {:.3} (iii) {:.3}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn closeness_inequality() -> Outcome {
    // c(j,k) = min / (min + |j^2 - k^2|); compare c(j,k) c(k,l) <= c(j,l) in integers.
    let frac = |j: u128, k: u128| {
        let m = j.min(k);
        (m, m + j.abs_diff(k) * (j + k))
    };
    let mut violations = 0;
    for j in 1..=50u128 {
        for k in 1..=50 {
            for l in 1..=50 {
                let (n1, d1) = frac(j, k);
                let (n2, d2) = frac(k, l);
                let (n3, d3) = frac(j, l);
                if n1 * n2 * d3 > n3 * d1 * d2 {
                    violations += 1;
                }
            }
        }
    }
    outcome(violations == 0, format!("125000 triples, {violations} violations (exact integer arithmetic)"))
}

fn homological_residual() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ball = FourierBall::new(2, 8).unwrap();
    let grid = ThetaGrid::dealiased(&ball).unwrap();
    let n_cut = 6;
    let (mut worst, mut structural, mut excluded) = (0.0f64, 0usize, 0usize);
    for seed in 0..100 {
        let layout = random_layout(&mut rng, 8, 2).unwrap();
        let h = random_normal_form(&mut rng, 2, &layout, 0.05).unwrap();
        let f = random_jet(&ball, &layout, 1000 + seed, 1.0, 0.3);
        let sol = solve_jet(&f, &h, 1e-3, n_cut).unwrap();
        if sol.ledger.excluded() {
            excluded += 1;
        }
        worst = worst.max(residual(&sol, &f, &h, &grid).unwrap());
        for k in 0..ball.len() {
            let low = ball.norm1(k) <= n_cut;
            let r_here = sol.remainder.theta[k].norm() > 0.0
                || sol.remainder.zeta[k].iter().any(|x| x.norm() > 0.0)
                || sol.remainder.zz[k].max_abs() > 0.0
                || sol.remainder.r.iter().any(|ri| ri[k].norm() > 0.0);
            if low && r_here {
                structural += 1;
            }
        }
    }
    outcome(
        worst <= 1e-10 && structural == 0,
        format!(
            "100 instances, max relative residual {worst:.2e}, {structural} low modes in R, {excluded} instances with a divisor below threshold"
        ),
    )
}

fn remainder_decay() -> Outcome {
    let (sigma, sigma_p) = (0.8, 0.5);
    let params = NormParams::new(2.0, 0.5);
    let ball = FourierBall::new(2, 24).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = random_layout(&mut rng, 4, 2).unwrap();
    let h = random_normal_form(&mut rng, 2, &layout, 0.05).unwrap();
    let dom = Domain::new(sigma, 0.5, params).unwrap();
    let dom_p = Domain::new(sigma_p, 0.5, params).unwrap();
    let ns = [4usize, 6, 8, 10, 12];
    let mut logs = vec![0.0; ns.len()];
    let mut bound_holds = true;
    let seeds = 5;
    for seed in 0..seeds {
        let f = random_jet(&ball, &layout, 400 + seed, 1.0, sigma);
        let f_norm = jet_norm(&f, &dom, NormVariant::Beta).value;
        for (i, &n) in ns.iter().enumerate() {
            let sol = solve_jet(&f, &h, 1e-3, n).unwrap();
            let r = jet_norm(&sol.remainder, &dom_p, NormVariant::Beta).value;
            logs[i] += (r / f_norm).ln() / seeds as f64;
            let bound = (-(sigma - sigma_p) * n as f64 / 2.0).exp() / (sigma - sigma_p).powi(2);
            bound_holds &= r <= bound * f_norm;
        }
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let fitted = slope(&xs, &logs);
    let predicted = -(sigma - sigma_p) / 2.0;
    let rel = (fitted / predicted - 1.0).abs();
    outcome(
        rel <= 0.1,
        format!("fitted slope {fitted:.4} vs predicted {predicted:.4} (relative deviation {rel:.2}, allowed 0.10); bound with unit constant holds: {bound_holds}"),
    )
}

/// `(theta, r, zeta)` flattened, flowed for time `t`.
fn flow_apply(f: &JetFlow, x: &DVector<f64>, n: usize, t: f64) -> DVector<f64> {
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

fn symplectic_defect(flow: &JetFlow, x: &DVector<f64>, n: usize) -> f64 {
    let dim = x.len() - 2 * n;
    let h = 1e-5;
    let mut jac = nalgebra::DMatrix::zeros(x.len(), x.len());
    for c in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[c] += h;
        xm[c] -= h;
        jac.set_column(c, &((flow_apply(flow, &xp, n, 1.0) - flow_apply(flow, &xm, n, 1.0)) / (2.0 * h)));
    }
    let mut p = nalgebra::DMatrix::zeros(x.len(), x.len());
    for i in 0..n {
        p[(i, n + i)] = 1.0;
        p[(n + i, i)] = -1.0;
    }
    for a in (0..dim).step_by(2) {
        p[(2 * n + a, 2 * n + a + 1)] = -1.0;
        p[(2 * n + a + 1, 2 * n + a)] = 1.0;
    }
    (&jac * &p * jac.transpose() - &p).amax()
}

fn embed(j: &Jet, small: &FourierBall, big: &std::sync::Arc<FourierBall>) -> Jet {
    let mut out = Jet::zero(big, j.layout());
    for k in 0..small.len() {
        let t = big.index(small.k(k)).unwrap();
        out.theta[t] = j.theta[k];
        for i in 0..small.n() {
            out.r[i][t] = j.r[i][k];
        }
        out.zeta[t] = j.zeta[k].clone();
        out.zz[t] = j.zz[k].clone();
    }
    out
}

fn flows() -> Outcome {
    let n = 2;
    let small = FourierBall::new(n, 2).unwrap();
    let big = FourierBall::new(n, 8).unwrap();
    let grid = ThetaGrid::dealiased(&big).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut sym, mut energy, mut lie) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50 {
        let layout = ZetaLayout::single(ClusterSet::from_sizes(&[1, 1], 1.0, 3.0).unwrap());
        let s = random_jet(&small, &layout, 5000 + seed, 0.3, 0.7);
        let flow = JetFlow::new(&s, FlowSettings::default()).unwrap();
        let x = DVector::from_fn(2 * n + 4, |i, _| match i {
            0 | 1 => rng.gen_range(-3.0..3.0),
            _ => rng.gen_range(-0.2..0.2),
        });
        let y = flow_apply(&flow, &x, n, 1.0);
        let ev = |v: &DVector<f64>| s.eval(&[v[0], v[1]], &[v[2], v[3]], &v.rows(4, 4).into_owned());
        energy = energy.max((ev(&x) - ev(&y)).abs());
        sym = sym.max(symplectic_defect(&flow, &x, n));

        let gen = embed(&random_jet(&small, &layout, 7000 + seed, 0.002, 0.7), &small, &big);
        let g = embed(&random_jet(&small, &layout, 9000 + seed, 1.0, 0.7), &small, &big);
        let via_lie = lie_pullback(&g, &gen, &grid, 1e-16, 40).unwrap();
        let gflow = JetFlow::new(&gen, FlowSettings::default()).unwrap();
        let via_grid = pullback_grid(&g, &[&gflow], &big, &grid).unwrap();
        let (lo_l, _) = via_lie.split(4);
        let (lo_g, _) = via_grid.split(4);
        lie = lie.max(lo_l.sub(&lo_g).unwrap().max_abs() / g.max_abs());
    }
    outcome(
        sym <= 1e-8 && energy <= 1e-9 && lie <= 1e-8,
        format!("50 flows: symplectic defect {sym:.1e}, energy drift {energy:.1e}, Lie vs grid {lie:.1e}"),
    )
}

fn delort() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut violations, mut hyp) = (0, 0);
    let mut blocks = [0usize; 3];
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let p = random_division_problem(&mut rng);
        let r = delort_bound_check(&p, 1.0).unwrap();
        violations += r.violations();
        hyp += r.hypothesis_violations;
        for (i, reg) in r.regimes.iter().enumerate() {
            blocks[i] += reg.blocks;
            if reg.blocks > 0 {
                worst[i] = worst[i].max(reg.worst_ratio / reg.bound);
            }
        }
    }
    outcome(
        violations == 0 && hyp == 0 && blocks.iter().all(|&b| b > 0),
        format!(
            "100 instances, {violations} violations, {hyp} hypothesis failures; blocks per regime {blocks:?}, worst ratio/bound {:.3} {:.3} {:.3}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn exclusion_scaling() -> Outcome {
    let adm = AdmissibleSet::new(2, &[(ModeId::new(1, 2), 1.5), (ModeId::new(2, 3), 1.5)]).unwrap();
    let (m, delta) = (1.0, 0.5);
    let cs = build_kg_clusters(2, 12, &adm).unwrap();
    let sp = kg_spectrum(&cs, 2, m).unwrap();
    let freq = KgFrequencies::new(&adm, 2, m, delta);
    let grid = RhoGrid::new(2, 64).unwrap();
    let d0 = delta0_kg(delta, 2, m, &adm).unwrap();
    let (mut xs, mut ys, mut fr) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..5 {
        let kappa = d0 * 10f64.powf(-1.0 + 0.25 * i as f64);
        let (_, ledger) = exclusion_scan(&grid, &|r| freq.omega(r), &sp, &cs, kappa, 5, d0).unwrap();
        let excluded = 1.0 - ledger.retained_fraction;
        fr.push(excluded);
        if excluded > 0.0 {
            xs.push(kappa.ln());
            ys.push(excluded.ln());
        }
    }
    if xs.len() < 2 {
        return outcome(false, format!("excluded fractions {fr:?} too small to fit"));
    }
    let e = slope(&xs, &ys);
    outcome(
        (e - 1.0 / 3.0).abs() <= 0.15,
        format!(
            "kappa in [delta0/10, delta0], delta0 {d0:.3e}: excluded fractions {:?}, fitted slope {e:.3} (target 0.333 +- 0.15)",
            fr.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn kg_config(admissible: Vec<(u32, u32, f64)>, w_max: u32, eps: f64) -> KgConfig {
    KgConfig {
        d: 2,
        m: 1.0,
        delta: 0.1,
        eps,
        admissible,
        w_max,
        caps: KgCaps { k_max: 6, d_r: 2, d_zeta: 4 },
        nonlinearity: Nonlinearity::power(4).terms,
        grid: KgGridConfig { samples_per_axis: 4 },
        quad_degree: None,
    }
}

fn hessian_decay() -> Outcome {
    let params = NormParams::new(3.5, 0.5);
    let adm = vec![(1, 1, 1.5), (2, 1, 1.5)];
    let mut reports = Vec::new();
    for w in [16, 24] {
        // the fit is scale invariant; norms are reported per unit eps
        let prob = build_problem(&kg_config(adm.clone(), w, 0.5), GatePolicy::Rescale).unwrap();
        let h = prob
            .hessian_blocks(&[1.5, 1.5], &[0.0, 0.0], &[0.0, 0.0], &DVector::zeros(2 * prob.clusters.n_modes()))
            .unwrap();
        reports.push(verify_decay(&h, params).unwrap());
    }
    let change = (reports[1].norm / reports[0].norm - 1.0).abs();
    let e = reports[0].exponent.unwrap_or(f64::INFINITY);
    outcome(
        reports[0].passes && change < 0.05,
        format!(
            "fitted exponent {e:.3} (W 16) / {:.3} (W 24) vs required {:.3} within 10%; |M| {:.4} -> {:.4} ({:.1e} change)",
            reports[1].exponent.unwrap_or(f64::INFINITY),
            reports[0].required,
            reports[0].norm / 0.5,
            reports[1].norm / 0.5,
            change
        ),
    )
}

fn kg_toy_report(rhos: &[Vec<f64>], steps: usize) -> kam_core::kam::KamReport {
    let cfg = kg_config(vec![(1, 2, 1.5), (2, 3, 1.5)], 8, 1e-5);
    let prob = build_problem(&cfg, GatePolicy::Rescale).unwrap();
    let kp = prob.kam_problem(rhos).unwrap();
    let settings = KamSettings {
        params: NormParams::new(2.0, 0.5),
        k_max: 6,
        gate: GatePolicy::Rescale,
        norm_samples: 6,
        hess_samples: 2,
        ..Default::default()
    };
    iterate(&kp, &settings, steps).unwrap().1
}

fn kam_contraction() -> Outcome {
    let rep = kg_toy_report(&[vec![1.125, 1.375], vec![1.625, 1.875]], 3);
    let eps: Vec<String> = rep.steps.iter().map(|s| format!("{:.2e}", s.eps_measured)).collect();
    let ratios: Vec<f64> = rep.steps.iter().filter_map(|s| s.contraction).collect();
    let l = &rep.limits;
    let pass = rep.steps.len() == 4
        && ratios.len() == 3
        && rep.contracts()
        && !rep.retained.is_empty()
        && l.omega_within
        && l.a_within
        && l.stable;
    outcome(
        pass,
        format!(
            "[f_k] {eps:?}, [f_k]/[f_(k-1)]^(5/4) {:?}; |omega'-omega0| {:.1e}, |A-A0| {:.1e}, max |Re spec JA| {:.1e}; status {}",
            ratios.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>(),
            l.omega_shift,
            l.a_shift,
            l.stability,
            rep.status
        ),
    )
}

fn determinism() -> Outcome {
    let scan = || {
        let adm = AdmissibleSet::new(2, &[(ModeId::new(1, 2), 1.5), (ModeId::new(2, 3), 1.5)]).unwrap();
        let cs = build_kg_clusters(2, 8, &adm).unwrap();
        let sp = kg_spectrum(&cs, 2, 1.0).unwrap();
        let freq = KgFrequencies::new(&adm, 2, 1.0, 0.5);
        let grid = RhoGrid::new(2, 16).unwrap();
        let (g, l) = exclusion_scan(&grid, &|r| freq.omega(r), &sp, &cs, 1e-4, 4, 1e-4).unwrap();
        serde_json::to_string(&(g.mask(), l)).unwrap()
    };
    let homological = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ball = FourierBall::new(2, 6).unwrap();
        let layout = random_layout(&mut rng, 6, 2).unwrap();
        let h = random_normal_form(&mut rng, 2, &layout, 0.05).unwrap();
        let f = random_jet(&ball, &layout, 10, 1.0, 0.3);
        let sol = solve_jet(&f, &h, 1e-3, 4).unwrap();
        format!("{:?}{:?}{:?}", sol.s.theta, sol.s.zz, serde_json::to_string(&sol.ledger).unwrap())
    };
    let kam = || serde_json::to_string(&kg_toy_report(&[vec![1.375, 1.625]], 1)).unwrap();
    let same = [scan() == scan(), homological() == homological(), kam() == kam()];
    outcome(
        same.iter().all(|&b| b),
        format!("identical reruns: scan {}, homological {}, kam {}", same[0], same[1], same[2]),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, u64); 10] = [
        ("block-algebra inequalities", block_algebra, 60),
        ("closeness inequality", closeness_inequality, 5),
        ("homological residual", homological_residual, 120),
        ("remainder decay", remainder_decay, 120),
        ("flow symplecticity", flows, 120),
        ("division bounds", delort, 60),
        ("small-divisor measure scaling", exclusion_scaling, 180),
        ("Hessian decay", hessian_decay, 300),
        ("KAM contraction", kam_contraction, 600),
        ("determinism", determinism, 600),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = check();
        let dt = t.elapsed();
        let in_time = dt <= Duration::from_secs(*budget);
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2} {name}: {} ({:.1}s of {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            dt.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
