//! The five pipelines behind the subcommands.

use std::time::Instant;

use anyhow::{Context, Result};
use nalgebra::DVector;
use serde::Serialize;

use kam_core::blocks::NormParams;
use kam_core::flow::{grid_maps, pullback_from_maps};
use kam_core::hamiltonian::{FourierBall, ThetaGrid};
use kam_core::homological::{residual, solution_norms, solve_jet};
use kam_core::kam::{iterate, GatePolicy, KamSettings};
use kam_core::kg::{build_problem, verify_decay, KgProblem};
use kam_core::spectrum::{
    build_kg_clusters, delta0_kg, exclusion_scan, harmonic_multiplicity, kg_spectrum, AdmissibleSet, KgFrequencies,
    ModeId, RhoGrid,
};

use crate::artifact::Artifact;
use crate::config::RunConfig;
use crate::ConfigError;

fn admissible(cfg: &RunConfig) -> Result<AdmissibleSet> {
    let p = &cfg.problem;
    let entries: Vec<(ModeId, f64)> = p.admissible.iter().map(|&(j, l, a)| (ModeId::new(j, l), a)).collect();
    AdmissibleSet::new(p.d, &entries).map_err(|e| ConfigError(format!("admissible set: {e}")).into())
}

fn problem(cfg: &RunConfig, gate: GatePolicy) -> Result<KgProblem> {
    build_problem(&cfg.problem, gate).map_err(|e| ConfigError(format!("problem: {e}")).into())
}

fn centre(n: usize) -> Vec<f64> {
    vec![1.5; n]
}

fn fmt(x: f64) -> String {
    x.to_string()
}

#[derive(Serialize)]
struct SpectrumRow {
    j: u32,
    multiplicity: usize,
    external_modes: usize,
    lambda: f64,
}

#[derive(Serialize)]
struct InternalRow {
    j: u32,
    ell: u32,
    action: f64,
    omega_at_centre: f64,
}

pub fn spectrum(cfg: &RunConfig, art: &mut Artifact) -> Result<()> {
    let p = &cfg.problem;
    let adm = admissible(cfg)?;
    let clusters = build_kg_clusters(p.d, p.w_max, &adm).map_err(|e| ConfigError(e.to_string()))?;
    let sp = kg_spectrum(&clusters, p.d, p.m).context("spectrum hypotheses")?;
    let rows: Vec<SpectrumRow> = clusters
        .clusters()
        .iter()
        .map(|c| SpectrumRow {
            j: c.weight,
            multiplicity: harmonic_multiplicity(p.d, c.weight),
            external_modes: c.len,
            lambda: sp.lambdas()[c.start],
        })
        .collect();
    let freq = KgFrequencies::new(&adm, p.d, p.m, p.delta);
    let omega = freq.omega(&centre(adm.len()))?;
    let internal: Vec<InternalRow> = adm
        .modes()
        .iter()
        .zip(adm.actions())
        .zip(&omega)
        .map(|((m, &a), &w)| InternalRow { j: m.j, ell: m.ell, action: a, omega_at_centre: w })
        .collect();
    // delta0 needs an internal mode of positive degree
    let delta0 = if adm.is_empty() { None } else { Some(delta0_kg(p.delta, p.d, p.m, &adm)?) };
    art.csv("spectrum.csv", "external clusters: degree, multiplicity, external modes, eigenvalue", &rows)?;
    art.csv("internal.csv", "internal modes: action and frequency at the parameter-box centre", &internal)?;
    art.json(
        "report.json",
        "spectral constants",
        &serde_json::json!({
            "delta0": delta0,
            "gamma": sp.gamma(),
            "c0": sp.c0(),
            "d_star": clusters.d_star(),
            "c_b": clusters.c_b(),
            "clusters": rows.len(),
            "external_modes": clusters.n_modes(),
        }),
    )?;
    art.check("spectral asymptotics", true);
    Ok(())
}

pub fn scan(cfg: &RunConfig, art: &mut Artifact) -> Result<()> {
    let p = &cfg.problem;
    let sc = &cfg.scan;
    if sc.kappa.is_empty() {
        return Err(ConfigError("scan.kappa is empty".into()).into());
    }
    let adm = admissible(cfg)?;
    let clusters = build_kg_clusters(p.d, p.w_max, &adm).map_err(|e| ConfigError(e.to_string()))?;
    let sp = kg_spectrum(&clusters, p.d, p.m)?;
    let freq = KgFrequencies::new(&adm, p.d, p.m, p.delta);
    let grid = RhoGrid::new(adm.len(), sc.samples_per_axis.unwrap_or(p.grid.samples_per_axis))
        .map_err(|e| ConfigError(e.to_string()))?;
    let delta0 = delta0_kg(p.delta, p.d, p.m, &adm)?;
    let mut rows = Vec::new();
    let mut ledgers = Vec::new();
    let mut masks = Vec::new();
    for &kappa in &sc.kappa {
        let t = Instant::now();
        let (g, ledger) = exclusion_scan(&grid, &|r| freq.omega(r), &sp, &clusters, kappa, sc.n_cut, delta0)?;
        art.time(&format!("scan kappa={kappa}"), t.elapsed());
        let diff = ledger.min_divisors.get("difference");
        rows.push(vec![
            fmt(kappa),
            sc.n_cut.to_string(),
            fmt(ledger.retained_fraction),
            fmt(1.0 - ledger.retained_fraction),
            diff.map_or(String::new(), |m| fmt(m.value)),
            diff.map_or(String::new(), |m| fmt(m.ratio)),
        ]);
        masks.push(g.mask().to_vec());
        ledgers.push(ledger);
    }
    let header: Vec<String> = ["kappa", "N", "retained_fraction", "excluded_fraction", "min_difference_divisor", "min_difference_ratio"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    art.table("scan.csv", "retained fraction per kappa", &header, &rows)?;

    let mut mheader: Vec<String> = (1..=grid.n()).map(|i| format!("rho_{i}")).collect();
    mheader.extend(sc.kappa.iter().map(|k| format!("retained_kappa_{k}")));
    let mrows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            let mut r: Vec<String> = grid.point(i).into_iter().map(fmt).collect();
            r.extend(masks.iter().map(|m| (m[i] as u8).to_string()));
            r
        })
        .collect();
    art.table("mask.csv", "retained flag of every parameter sample per kappa", &mheader, &mrows)?;

    // log-log slope of the excluded fraction, where it is positive
    let pts: Vec<(f64, f64)> = ledgers
        .iter()
        .filter(|l| l.retained_fraction < 1.0)
        .map(|l| (l.kappa.ln(), (1.0 - l.retained_fraction).ln()))
        .collect();
    let fitted = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    let (target, tol) = sc.slope;
    art.json(
        "report.json",
        "exclusion ledgers and the fitted measure exponent",
        &serde_json::json!({
            "delta0": delta0,
            "ledgers": ledgers,
            "fitted_slope": fitted,
            "target_slope": target,
            "slope_tolerance": tol,
        }),
    )?;
    if let Some(e) = fitted {
        art.check("exclusion slope", (e - target).abs() <= tol);
    }
    Ok(())
}

pub fn homological(cfg: &RunConfig, art: &mut Artifact) -> Result<()> {
    let hc = &cfg.homological;
    let t = Instant::now();
    let prob = problem(cfg, GatePolicy::Rescale)?;
    art.time("build problem", t.elapsed());
    let n = prob.n();
    let rho = hc.rho.clone().unwrap_or_else(|| centre(n));
    if rho.len() != n {
        return Err(ConfigError(format!("homological.rho needs {n} entries")).into());
    }
    let model = prob.model(&rho)?;
    let h0 = prob.h0(&rho)?;
    let ball = FourierBall::new(n, cfg.problem.caps.k_max)?;
    let grid = ThetaGrid::dealiased(&ball)?;
    let t = Instant::now();
    let maps = grid_maps(&[], &prob.layout, &grid)?;
    let f = pullback_from_maps(&model, &maps, &ball, &grid)?;
    art.time("jet of the perturbation", t.elapsed());

    let mut orders = hc.sweep.clone();
    if !orders.contains(&hc.n_cut) {
        orders.push(hc.n_cut);
    }
    orders.sort_unstable();
    let params = NormParams::new(hc.s, hc.beta);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let (mut res_ok, mut struct_ok) = (true, true);
    for &nc in &orders {
        let t = Instant::now();
        let sol = solve_jet(&f, &h0, hc.kappa, nc)?;
        let res = residual(&sol, &f, &h0, &grid)?;
        let norms = solution_norms(&sol, &f, hc.sigma, hc.sigma_prime, hc.mu, params, prob.clusters.d_star(), 1.0)?;
        art.time(&format!("solve N={nc}"), t.elapsed());
        let low_r = (0..ball.len()).filter(|&k| ball.norm1(k) <= nc).any(|k| {
            sol.remainder.theta[k].norm() > 0.0
                || sol.remainder.zeta[k].iter().any(|x| x.norm() > 0.0)
                || sol.remainder.zz[k].max_abs() > 0.0
                || sol.remainder.r.iter().any(|ri| ri[k].norm() > 0.0)
        });
        res_ok &= res <= hc.tol;
        struct_ok &= !low_r;
        rows.push(vec![
            nc.to_string(),
            fmt(res),
            fmt(norms.f_norm),
            fmt(norms.s_norm_plus),
            fmt(norms.r_norm),
            fmt(norms.s_bound_unit),
            fmt(norms.r_bound_unit),
            (sol.ledger.excluded() as u8).to_string(),
            fmt(sol.ledger.min_ratio()),
        ]);
        reports.push(serde_json::json!({
            "N": nc,
            "residual": res,
            "norms": norms,
            "ledger": sol.ledger,
            "remainder_only_above_N": !low_r,
        }));
    }
    let header: Vec<String> = ["N", "residual", "f_norm", "S_norm_plus", "R_norm", "S_bound_unit", "R_bound_unit", "excluded", "min_divisor_ratio"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    art.table("homological.csv", "residual and norms of S and R per truncation order", &header, &rows)?;
    art.json(
        "report.json",
        "homological solves at one parameter value",
        &serde_json::json!({ "rho": rho, "kappa": hc.kappa, "solves": reports }),
    )?;
    art.check("residual", res_ok);
    art.check("remainder structure", struct_ok);
    Ok(())
}

pub fn kam(cfg: &RunConfig, art: &mut Artifact, steps: usize) -> Result<()> {
    let sc = &cfg.schedule;
    let gate = sc.gate.unwrap_or(GatePolicy::Rescale);
    let t = Instant::now();
    let prob = problem(cfg, gate)?;
    art.time("build problem", t.elapsed());
    let n = prob.n();
    let rhos: Vec<Vec<f64>> = match &sc.rho {
        Some(r) => r.clone(),
        None => (0..prob.rho_grid.len()).map(|i| prob.rho_grid.point(i)).collect(),
    };
    if rhos.iter().any(|r| r.len() != n) {
        return Err(ConfigError(format!("schedule.rho entries need {n} components")).into());
    }
    let defaults = KamSettings::default();
    let settings = KamSettings {
        sigma0: sc.sigma0.unwrap_or(defaults.sigma0),
        mu0: sc.mu0.unwrap_or(defaults.mu0),
        params: NormParams::new(sc.s.unwrap_or(defaults.params.s), sc.beta.unwrap_or(defaults.params.beta)),
        k_max: sc.k_max.unwrap_or(cfg.problem.caps.k_max),
        gate,
        eps0: sc.eps0,
        norm_samples: sc.norm_samples.unwrap_or(defaults.norm_samples),
        hess_samples: sc.hess_samples.unwrap_or(defaults.hess_samples),
        seed: cfg.seed,
        ..defaults
    };
    let kp = prob.kam_problem(&rhos)?;
    let t = Instant::now();
    let (_, report) = iterate(&kp, &settings, steps)?;
    art.time("iterate", t.elapsed());

    art.csv("steps.csv", "one row per KAM step", &report.steps)?;
    let mut header: Vec<String> = vec!["index".into()];
    header.extend((1..=n).map(|i| format!("rho_{i}")));
    header.extend((1..=n).map(|i| format!("omega_{i}")));
    header.extend(["omega_shift", "A_shift", "stability"].iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = report
        .limits
        .per_sample
        .iter()
        .map(|s| {
            let mut r = vec![s.index.to_string()];
            r.extend(s.rho.iter().copied().map(fmt));
            r.extend(s.omega.iter().copied().map(fmt));
            r.extend([fmt(s.omega_shift), fmt(s.a_shift), fmt(s.stability)]);
            r
        })
        .collect();
    art.table("samples.csv", "limit normal form per retained parameter sample", &header, &rows)?;
    art.json(
        "report.json",
        "KAM report with schedule, steps and limit objects",
        &serde_json::json!({ "gate": prob.gate, "delta0": prob.delta0, "report": report }),
    )?;
    art.check("contraction", report.contracts() && (report.status == "ok" || report.status == "floor"));
    art.check("retained samples", !report.retained.is_empty());
    art.check("frequency shift", report.limits.omega_within);
    art.check("normal form shift", report.limits.a_within);
    art.check("linear stability", report.limits.stable);
    Ok(())
}

pub fn decay(cfg: &RunConfig, art: &mut Artifact) -> Result<()> {
    let dc = &cfg.decay;
    let params = NormParams::new(dc.s, dc.beta);
    let hessian = |c: &RunConfig| -> Result<kam_core::blocks::BlockMatrix<f64>> {
        let prob = problem(c, GatePolicy::Rescale)?;
        let n = prob.n();
        let rho = dc.rho.clone().unwrap_or_else(|| centre(n));
        let theta = dc.theta.clone().unwrap_or_else(|| vec![0.0; n]);
        if rho.len() != n || theta.len() != n {
            return Err(ConfigError(format!("decay.rho and decay.theta need {n} entries")).into());
        }
        let zeta = DVector::zeros(2 * prob.clusters.n_modes());
        Ok(prob.hessian_blocks(&rho, &theta, &vec![0.0; n], &zeta)?)
    };
    let t = Instant::now();
    let h = hessian(cfg)?;
    let rep = verify_decay(&h, params)?;
    art.time("hessian", t.elapsed());
    let rows: Vec<Vec<String>> = rep
        .points
        .iter()
        .map(|&(a, b, v)| vec![a.to_string(), b.to_string(), fmt(v)])
        .collect();
    art.table(
        "blocks.csv",
        "spectral norm of every nonzero off-diagonal cluster block",
        &["w_a".into(), "w_b".into(), "norm".into()],
        &rows,
    )?;
    let compare = match dc.w_compare {
        Some(w) => {
            let mut c2 = cfg.clone();
            c2.problem.w_max = w;
            let t = Instant::now();
            let norm = hessian(&c2)?.norm_s_beta(params).value;
            art.time("hessian at W_compare", t.elapsed());
            Some((w, norm, (norm / rep.norm - 1.0).abs()))
        }
        None => None,
    };
    art.json(
        "report.json",
        "fitted decay exponent and norm stability",
        &serde_json::json!({
            "exponent": rep.exponent,
            "required": rep.required,
            "passes": rep.passes,
            "norm": rep.norm,
            "blocks_used": rep.blocks_used,
            "blocks_zero": rep.blocks_zero,
            "compare": compare.map(|(w, norm, change)| serde_json::json!({"W_max": w, "norm": norm, "relative_change": change})),
        }),
    )?;
    art.check("decay exponent", rep.passes);
    if let Some((_, _, change)) = compare {
        art.check("norm stability", change < dc.stability_tol);
    }
    Ok(())
}
