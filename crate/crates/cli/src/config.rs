//! Run configuration read from a TOML file.

use serde::{Deserialize, Serialize};

use kam_core::kam::GatePolicy;
use kam_core::kg::KgConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub problem: KgConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub homological: HomologicalConfig,
    #[serde(default)]
    pub decay: DecayConfig,
}

/// Overrides for the KAM iteration. Unset fields keep the library defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: Option<usize>,
    pub sigma0: Option<f64>,
    pub mu0: Option<f64>,
    pub s: Option<f64>,
    pub beta: Option<f64>,
    /// Fourier cap of the jets; defaults to `caps.K_max`.
    pub k_max: Option<usize>,
    pub gate: Option<GatePolicy>,
    pub eps0: Option<f64>,
    pub norm_samples: Option<usize>,
    pub hess_samples: Option<usize>,
    /// Parameter samples; defaults to every point of the parameter grid.
    pub rho: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub kappa: Vec<f64>,
    #[serde(rename = "N", alias = "n")]
    pub n_cut: usize,
    /// Overrides `grid.samples_per_axis`.
    pub samples_per_axis: Option<usize>,
    /// Expected slope of log(excluded fraction) against log(kappa), with its tolerance.
    pub slope: (f64, f64),
}

fn default_slope() -> (f64, f64) {
    (1.0 / 3.0, 0.15)
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            kappa: vec![1e-4, 1e-3],
            n_cut: 5,
            samples_per_axis: None,
            slope: default_slope(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomologicalConfig {
    pub rho: Option<Vec<f64>>,
    pub kappa: f64,
    #[serde(rename = "N", alias = "n")]
    pub n_cut: usize,
    pub sigma: f64,
    pub sigma_prime: f64,
    pub mu: f64,
    pub s: f64,
    pub beta: f64,
    /// Truncation orders for the remainder series; empty means only `N`.
    #[serde(default)]
    pub sweep: Vec<usize>,
    pub tol: f64,
}

impl Default for HomologicalConfig {
    fn default() -> Self {
        Self {
            rho: None,
            kappa: 1e-3,
            n_cut: 4,
            sigma: 0.8,
            sigma_prime: 0.5,
            mu: 0.5,
            s: 2.0,
            beta: 0.5,
            sweep: vec![],
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayConfig {
    pub rho: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
    pub s: f64,
    pub beta: f64,
    /// A second truncation for the norm-stability check.
    #[serde(rename = "W_compare", alias = "w_compare")]
    pub w_compare: Option<u32>,
    /// Allowed relative change of the norm between the two truncations.
    pub stability_tol: f64,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            rho: None,
            theta: None,
            s: 3.5,
            beta: 0.5,
            w_compare: None,
            stability_tol: 0.05,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let text = r#"
            [problem]
            m = 1.0
            delta = 0.1
            eps = 1e-5
            admissible = [[1, 2, 1.5]]
            W_max = 3
            caps = { K_max = 4, D_r = 2, D_zeta = 4 }
            grid = { samples_per_axis = 4 }
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.problem.w_max, 3);
        assert_eq!(c.scan.n_cut, 5);
        assert!(c.problem.nonlinearity.is_empty());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"
            bogus = 1
            [problem]
            m = 1.0
            delta = 0.1
            eps = 1e-5
            admissible = [[1, 2, 1.5]]
            W_max = 3
            caps = { K_max = 4, D_r = 2, D_zeta = 4 }
            grid = { samples_per_axis = 4 }
        "#;
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }
}
