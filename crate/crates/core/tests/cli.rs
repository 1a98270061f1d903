//! End-to-end checks of the `cwndnet` binary: exit codes, emitted formats,
//! and rerun determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwndnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn solve_emits_closed_form_allocation() {
    let out = run(&[
        "solve",
        "--model",
        fixture("single_bottleneck.model").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let get = |key: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("missing {key} in {text}"))
            .split('\t')
            .last()
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((get("lambda_star\theavy") - 2.0 / 3.0).abs() <= 1e-8);
    assert!((get("lambda_star\tlight") - 1.0 / 3.0).abs() <= 1e-8);
    assert!((get("q_star\tlink") - 9.0).abs() <= 1e-6);
    assert!((get("beta_star_primal") + 9.0).abs() <= 1e-5);
    assert!((get("beta_star_dual") + 9.0).abs() <= 1e-5);
}

#[test]
fn all_bundled_fixtures_load_and_solve() {
    for (name, lambdas) in [
        ("single_route.model", vec![1.0]),
        ("single_bottleneck.model", vec![2.0 / 3.0, 1.0 / 3.0]),
        ("tandem.model", vec![1.0]),
        ("triangle.model", vec![0.5, 0.5, 0.5]),
    ] {
        let out = run(&["solve", "--model", fixture(name).to_str().unwrap()]);
        assert!(out.status.success(), "{name}");
        let text = stdout(&out);
        let values: Vec<f64> = text
            .lines()
            .filter(|l| l.starts_with("lambda_star"))
            .map(|l| l.split('\t').last().unwrap().parse().unwrap())
            .collect();
        assert_eq!(values.len(), lambdas.len(), "{name}");
        for (got, want) in values.iter().zip(&lambdas) {
            assert!((got - want).abs() <= 1e-7, "{name}: {got} vs {want}");
        }
    }
}

#[test]
fn unknown_key_fails_with_validation_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.model");
    let text = std::fs::read_to_string(fixture("single_route.model"))
        .unwrap()
        .replace("capacity = 1.0", "capacity = 1.0\nspeed = 2.0");
    std::fs::write(&bad, text).unwrap();
    let out = run(&["solve", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("speed"), "{err}");
}

#[test]
fn missing_file_fails_with_validation_exit_code() {
    let out = run(&["solve", "--model", "/nonexistent/never.model"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn insufficient_truncation_fails_with_numerical_exit_code() {
    let out = run(&[
        "exact",
        "--model",
        fixture("single_route.model").to_str().unwrap(),
        "--c",
        "8",
        "--n-max",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exact_reports_closed_form_throughput() {
    let out = run(&[
        "exact",
        "--model",
        fixture("single_route.model").to_str().unwrap(),
        "--c",
        "3",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lambda: f64 = text
        .lines()
        .find(|l| l.starts_with("lambda_c"))
        .unwrap()
        .split('\t')
        .last()
        .unwrap()
        .parse()
        .unwrap();
    assert!((lambda - (1.0 - (-3.0f64).exp())).abs() <= 1e-8);
}

#[test]
fn sweep_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run_once = |sub: &str| -> Vec<u8> {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "sweep",
            "--model",
            fixture("single_route.model").to_str().unwrap(),
            "--c-values",
            "1,2,4",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        std::fs::read(out_dir.join("sweep.tsv")).unwrap()
    };
    assert_eq!(run_once("a"), run_once("b"));
}

#[test]
fn sweep_header_matches_solve_output() {
    let solve = stdout(&run(&[
        "solve",
        "--model",
        fixture("single_bottleneck.model").to_str().unwrap(),
    ]));
    let sweep = stdout(&run(&[
        "sweep",
        "--model",
        fixture("single_bottleneck.model").to_str().unwrap(),
        "--c-values",
        "1,2",
    ]));
    for route in ["heavy", "light"] {
        let from_solve: f64 = solve
            .lines()
            .find(|l| l.starts_with(&format!("lambda_star\t{route}")))
            .unwrap()
            .split('\t')
            .last()
            .unwrap()
            .parse()
            .unwrap();
        let from_sweep: f64 = sweep
            .lines()
            .find(|l| l.starts_with(&format!("# lambda_star {route}")))
            .unwrap()
            .rsplit(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(
            (from_solve - from_sweep).abs() <= 1e-9,
            "{route}: {from_solve} vs {from_sweep}"
        );
    }
}

#[test]
fn ldp_check_runs_from_the_binary() {
    let out = run(&[
        "ldp-check",
        "--model",
        fixture("single_route.model").to_str().unwrap(),
        "--target",
        "2",
        "--c-values",
        "20,40,80",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("# analytic_rate"));
    assert!(text.contains("# fitted_limit"));
}

#[test]
fn simulate_emits_stats_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("capped.model");
    let text = std::fs::read_to_string(fixture("single_route.model"))
        .unwrap()
        .replace(
            "utility = { kind = \"alpha_fair\", alpha = 2.0, weight = 1.0 }",
            "utility = { kind = \"alpha_fair\", alpha = 2.0, weight = 1.0 }\nwindow_cap = 8",
        );
    std::fs::write(&bad, text).unwrap();
    let out = run(&[
        "simulate",
        "--model",
        bad.to_str().unwrap(),
        "--c",
        "2",
        "--seed",
        "7",
        "--time",
        "2000",
        "--reps",
        "3",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("throughput\tr0"));
    assert!(text.contains("little_violations"));
    assert!(text.contains("exact_zscore"), "{text}");
}
