use std::fs;
use std::path::Path;
use std::process::Command;

const PROBLEM: &str = r#"
[problem]
m = 1.0
delta = 0.5
eps = 1e-5
admissible = [[1, 2, 1.5], [2, 3, 1.5]]
W_max = 4
caps = { K_max = 3, D_r = 2, D_zeta = 4 }
grid = { samples_per_axis = 8 }
"#;

fn kgkam(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_kgkam"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn run_in(dir: &Path, mode: &str, config: &str, out: &str) -> i32 {
    kgkam(&[mode, "--config", config, "--out", dir.join(out).to_str().unwrap()])
}

#[test]
fn spectrum_lists_sphere_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[problem]\nm = 1.0\ndelta = 0.1\neps = 1e-5\nadmissible = []\nW_max = 3\n\
         caps = { K_max = 2, D_r = 2, D_zeta = 4 }\ngrid = { samples_per_axis = 2 }\n",
    );
    assert_eq!(run_in(dir.path(), "spectrum", &cfg, "out"), 0);
    let mut rd = csv::Reader::from_path(dir.path().join("out/spectrum.csv")).unwrap();
    let col = rd.headers().unwrap().iter().position(|h| h == "lambda").unwrap();
    let lambdas: Vec<f64> = rd.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    let want = [3f64.sqrt(), 7f64.sqrt(), 13f64.sqrt()];
    assert_eq!(lambdas.len(), 3);
    for (a, b) in lambdas.iter().zip(want) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn zero_perturbation_reports_zero_norms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{PROBLEM}\n[schedule]\nsteps = 2\nrho = [[1.25, 1.75]]\n"));
    assert_eq!(run_in(dir.path(), "kam", &cfg, "out"), 0);
    let mut rd = csv::Reader::from_path(dir.path().join("out/steps.csv")).unwrap();
    let col = rd.headers().unwrap().iter().position(|h| h == "eps_measured").unwrap();
    let vals: Vec<f64> = rd.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert!(!vals.is_empty() && vals.iter().all(|&v| v == 0.0));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{PROBLEM}\n[scan]\nkappa = [1e-4]\nN = 3\n"));
    for out in ["a", "b"] {
        assert_eq!(run_in(dir.path(), "scan", &cfg, out), 0);
    }
    for f in ["scan.csv", "mask.csv", "report.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn failed_check_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // an unreachable target slope
    let cfg = write_config(dir.path(), &format!("{PROBLEM}\n[scan]\nkappa = [3e-3, 1e-2]\nN = 3\nslope = [10.0, 0.01]\n"));
    assert_eq!(run_in(dir.path(), "scan", &cfg, "out"), 2);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checks"][0][1], serde_json::Value::Bool(false));
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.toml");
    assert_eq!(run_in(dir.path(), "scan", missing.to_str().unwrap(), "out"), 3);
    let bad = write_config(dir.path(), "[problem]\nm = 1.0\n");
    assert_eq!(run_in(dir.path(), "scan", &bad, "out"), 3);
    assert_eq!(kgkam(&["nonsense", "--config", &bad]), 3);
}

#[test]
fn kam_outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let problem = PROBLEM
        .replace("delta = 0.5", "delta = 0.1")
        .replace("samples_per_axis = 8", "samples_per_axis = 2")
        .replace("[problem]", "[problem]\nnonlinearity = [{ p = 4, constant = 1.0 }]");
    let cfg = write_config(
        dir.path(),
        &format!("{problem}\n[schedule]\nsteps = 1\nnorm_samples = 4\nhess_samples = 1\nrho = [[1.25, 1.75]]\n"),
    );
    for (threads, out) in [("1", "a"), ("3", "b")] {
        let code = kgkam(&["kam", "--config", &cfg, "--out", dir.path().join(out).to_str().unwrap(), "--threads", threads]);
        assert_eq!(code, 0);
    }
    for f in ["steps.csv", "samples.csv", "report.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between thread counts");
    }
}
