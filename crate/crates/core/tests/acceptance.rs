//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! every tolerance is pinned here, in code.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use cwndnet::cli::{self, ExperimentConfig};
use cwndnet::exact::{self, ExactOptions};
use cwndnet::model::{
    CongestionControl, Discipline, ModelIndex, NetworkModel, QueueSpec, RouteSpec, Utility,
};
use cwndnet::optimize;
use cwndnet::simulate::{self, SimConfig};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn load(name: &str) -> NetworkModel {
    cli::load_model(&fixture(name))
        .expect("fixture loads")
        .model
}

fn criterion(n: u32, desc: &str, limit: Option<Duration>, f: impl FnOnce() -> Result<(), String>) {
    let t0 = Instant::now();
    let outcome = f();
    let elapsed = t0.elapsed();
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let ok = outcome.is_ok() && in_time;
    println!(
        "acceptance {n} {}  {desc}  [{:.2} s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    if let Err(msg) = outcome {
        panic!("criterion {n} failed: {msg}");
    }
    assert!(
        in_time,
        "criterion {n} exceeded its runtime limit: {elapsed:?} > {limit:?}"
    );
}

#[test]
fn criterion_1_closed_form_throughput_identity() {
    criterion(
        1,
        "single queue, alpha=2, w=1: exact throughput equals 1 - exp(-c) within 1e-8",
        Some(Duration::from_secs(1)),
        || {
            let idx = ModelIndex::new(&load("single_route.model")).map_err(|e| e.to_string())?;
            for c in 1..=10u64 {
                let table = exact::stationary_distribution(&idx, c, &ExactOptions::default())
                    .map_err(|e| e.to_string())?;
                let report = exact::exact_throughput(&idx, &table);
                let expect = 1.0 - (-(c as f64)).exp();
                let err = (report.lambda[0] - expect).abs();
                if err > 1e-8 {
                    return Err(format!("c={c}: |{} - {expect}| = {err}", report.lambda[0]));
                }
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_2_product_form_vs_generator_solve() {
    criterion(
        2,
        "product-form table vs generator solve: total variation <= 1e-8 on all four capped fixtures",
        Some(Duration::from_secs(30)),
        || {
            // Caps and congestion levels keeping every space under 2e4 states.
            let cases = [
                ("single_route.model", 8u64, 2u64),
                ("single_bottleneck.model", 8, 2),
                ("tandem.model", 8, 2),
                ("triangle.model", 5, 1),
            ];
            for (name, cap, c) in cases {
                let model = load(name).with_window_caps(cap);
                let idx = ModelIndex::new(&model).map_err(|e| e.to_string())?;
                let gen = exact::aggregated_generator(&idx, c, 20_000)
                    .map_err(|e| e.to_string())?;
                if gen.n_states() > 20_000 {
                    return Err(format!("{name}: {} states exceeds 2e4", gen.n_states()));
                }
                let pi = exact::generator_solve(&gen).map_err(|e| e.to_string())?;
                let table = exact::stationary_distribution(&idx, c, &ExactOptions::default())
                    .map_err(|e| e.to_string())?;
                let mut tv = 0.0;
                let mut covered = 0.0;
                for (m, p) in table.iter() {
                    let s = gen.index[m];
                    tv += (p - pi[s]).abs();
                    covered += pi[s];
                }
                tv += 1.0 - covered;
                tv *= 0.5;
                if tv > 1e-8 {
                    return Err(format!(
                        "{name}: TV {tv:.3e} over {} states",
                        gen.n_states()
                    ));
                }
            }
            Ok(())
        },
    );
}

fn random_network(rng: &mut ChaCha12Rng) -> NetworkModel {
    let n_queues = rng.gen_range(1..=4);
    let queues: Vec<QueueSpec> = (0..n_queues)
        .map(|j| QueueSpec {
            id: format!("q{j}"),
            capacity: rng.gen_range(0.5..4.0),
            discipline: Discipline::ProcessorSharing,
        })
        .collect();
    let n_routes = rng.gen_range(1..=6);
    let routes = (0..n_routes)
        .map(|i| {
            let hops = rng.gen_range(1..=n_queues);
            let mut order: Vec<usize> = (0..n_queues).collect();
            for k in (1..order.len()).rev() {
                order.swap(k, rng.gen_range(0..=k));
            }
            order.truncate(hops);
            let alpha = rng.gen_range(1.0f64..5.0).max(1.01);
            let weight = rng.gen_range(0.25..4.0);
            RouteSpec {
                id: format!("r{i}"),
                path: order.iter().map(|&j| format!("q{j}")).collect(),
                control: CongestionControl::new(Utility::alpha_fair(alpha, weight).unwrap()),
            }
        })
        .collect();
    NetworkModel::new(queues, routes)
}

#[test]
fn criterion_3_strong_duality_on_random_networks() {
    criterion(
        3,
        "50 seeded random networks: |primal - dual| <= 1e-6 (1 + |dual|), KKT residuals <= 1e-6",
        Some(Duration::from_secs(60)),
        || {
            let mut rng = ChaCha12Rng::seed_from_u64(20260810);
            for trial in 0..50 {
                let model = random_network(&mut rng);
                let idx = ModelIndex::new(&model).map_err(|e| e.to_string())?;
                let (alloc, prices, kkt) =
                    optimize::solve_system(&idx, 1e-8).map_err(|e| e.to_string())?;
                if kkt.max_residual() > 1e-6 {
                    return Err(format!(
                        "trial {trial}: KKT residual {:.3e}",
                        kkt.max_residual()
                    ));
                }
                let entropy = optimize::primal_reconstruct(&idx, &alloc, &prices, 1e-6)
                    .map_err(|e| e.to_string())?;
                let dual: f64 = (0..idx.n_routes())
                    .map(|i| idx.control(i).utility.value(alloc.lambda[i]).unwrap())
                    .sum();
                let gap = (entropy.objective - dual).abs();
                if gap > 1e-6 * (1.0 + dual.abs()) {
                    return Err(format!("trial {trial}: gap {gap:.3e}, dual {dual:.6}"));
                }
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_4_throughput_convergence() {
    criterion(
        4,
        "bottleneck and tandem: max route error strictly decreasing over c in {5,10,20,40}, <= 10% relative at c=40",
        Some(Duration::from_secs(300)),
        || {
            for name in ["single_bottleneck.model", "tandem.model"] {
                let model = load(name);
                let idx = ModelIndex::new(&model).map_err(|e| e.to_string())?;
                let (alloc, _, _) =
                    optimize::solve_system(&idx, 1e-9).map_err(|e| e.to_string())?;
                let mut prev = f64::INFINITY;
                let mut last_rel: f64 = 0.0;
                for c in [5u64, 10, 20, 40] {
                    let table =
                        exact::stationary_distribution(&idx, c, &ExactOptions::default())
                            .map_err(|e| e.to_string())?;
                    let report = exact::exact_throughput(&idx, &table);
                    let err = report
                        .lambda
                        .iter()
                        .zip(&alloc.lambda)
                        .map(|(l, s)| (l - s).abs())
                        .fold(0.0f64, f64::max);
                    if err >= prev {
                        return Err(format!("{name}: error not decreasing at c={c}: {err}"));
                    }
                    prev = err;
                    last_rel = report
                        .lambda
                        .iter()
                        .zip(&alloc.lambda)
                        .map(|(l, s)| (l - s).abs() / s)
                        .fold(0.0f64, f64::max);
                }
                if last_rel > 0.10 {
                    return Err(format!("{name}: relative error {last_rel:.4} at c=40"));
                }
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_5_ldp_slope() {
    criterion(
        5,
        "single queue, target m=2, c in {20,40,80,160}: decay slope matches 2 log 2 - 1 within 5%",
        Some(Duration::from_secs(60)),
        || {
            let source =
                cli::load_model(&fixture("single_route.model")).map_err(|e| e.to_string())?;
            let idx = ModelIndex::new(&source.model).map_err(|e| e.to_string())?;
            let cfg = ExperimentConfig::new(vec![20, 40, 80, 160]);
            let mut sinkhole = Vec::new();
            let report = cli::run_ldp_check(&mut sinkhole, &idx, &source, &[2.0], &cfg)
                .map_err(|e| e.to_string())?;
            let rate = 2.0 * 2.0f64.ln() - 1.0;
            if (report.analytic - rate).abs() > 1e-6 {
                return Err(format!("analytic rate {} != {rate}", report.analytic));
            }
            if report.deviation > 0.05 {
                return Err(format!(
                    "fitted {} deviates {:.3}% from {rate}",
                    report.fitted,
                    100.0 * report.deviation
                ));
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_6_concentration_sharpens_with_congestion() {
    criterion(
        6,
        "concentration at eps=0.25 drops at least 10x from c=25 to c=100 (exact-table oracle)",
        Some(Duration::from_secs(60)),
        || {
            let idx = ModelIndex::new(&load("single_route.model")).map_err(|e| e.to_string())?;
            let probe = |c: u64| -> Result<f64, String> {
                let table = exact::stationary_distribution(&idx, c, &ExactOptions::default())
                    .map_err(|e| e.to_string())?;
                Ok(exact::concentration_probability(&table, &[1.0], 0.25))
            };
            let p25 = probe(25)?;
            let p100 = probe(100)?;
            // Independent check of the oracle itself: exact Poisson tails.
            let poisson_tail = |c: u64| {
                use statrs::function::gamma::ln_gamma;
                let lam = c as f64;
                (0..(20 * c + 200))
                    .map(|n| {
                        if (n as f64 / lam - 1.0).abs() >= 0.25 {
                            (-lam + n as f64 * lam.ln() - ln_gamma(n as f64 + 1.0)).exp()
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            };
            if (p25 - poisson_tail(25)).abs() > 1e-10 {
                return Err(format!("table vs Poisson oracle at c=25: {p25}"));
            }
            if (p100 - poisson_tail(100)).abs() > 1e-10 {
                return Err(format!("table vs Poisson oracle at c=100: {p100}"));
            }
            if p100 > p25 / 10.0 {
                return Err(format!("p(25) = {p25:.4e}, p(100) = {p100:.4e}: under 10x"));
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_7_simulation_fidelity() {
    criterion(
        7,
        "capped fixtures, 16 reps x 1e5: throughput within 3 SE of exact, Little report clean at 4 sigma, FIFO vs PS TV <= 0.02",
        Some(Duration::from_secs(300)),
        || {
            // Throughput and Little diagnostics on two capped fixtures.
            for (name, cap, c) in [
                ("single_route.model", 8u64, 3u64),
                ("single_bottleneck.model", 12, 2),
                ("tandem.model", 8, 2),
            ] {
                let model = load(name).with_window_caps(cap);
                let idx = ModelIndex::new(&model).map_err(|e| e.to_string())?;
                let sim = SimConfig::new(20260810, c, 1e5).with_replications(16);
                let stats = simulate::simulate(&idx, &sim).map_err(|e| e.to_string())?;
                let table = exact::stationary_distribution(&idx, c, &ExactOptions::default())
                    .map_err(|e| e.to_string())?;
                let report = exact::exact_throughput(&idx, &table);
                for i in 0..idx.n_routes() {
                    let z = (stats.throughput_mean[i] - report.lambda[i]).abs()
                        / stats.throughput_se[i];
                    if z > 3.0 {
                        return Err(format!(
                            "{name} route {i}: z = {z:.2} ({} vs {})",
                            stats.throughput_mean[i], report.lambda[i]
                        ));
                    }
                }
                let little =
                    simulate::little_check(&idx, &stats, 4.0).map_err(|e| e.to_string())?;
                if !little.violations.is_empty() {
                    return Err(format!("{name}: Little violations {:?}", little.violations));
                }
            }

            // Discipline insensitivity of the count law on a capped model.
            let model = load("single_route.model").with_window_caps(8);
            let idx_ps = ModelIndex::new(&model).map_err(|e| e.to_string())?;
            let idx_fifo = ModelIndex::new(&model.with_discipline(Discipline::Fifo))
                .map_err(|e| e.to_string())?;
            let occ_cfg = SimConfig::new(7, 2, 1e6);
            let hist_ps =
                simulate::occupancy_histogram(&idx_ps, &occ_cfg).map_err(|e| e.to_string())?;
            let hist_fifo =
                simulate::occupancy_histogram(&idx_fifo, &occ_cfg).map_err(|e| e.to_string())?;
            let tv = hist_ps.tv_distance(&hist_fifo);
            if tv > 0.02 {
                return Err(format!("FIFO vs PS occupancy TV = {tv:.4}"));
            }
            // And both match the exact law.
            let table = exact::stationary_distribution(&idx_ps, 2, &ExactOptions::default())
                .map_err(|e| e.to_string())?;
            let tv_exact = hist_ps.tv_vs_table(&table);
            if tv_exact > 0.02 {
                return Err(format!("PS occupancy vs exact law TV = {tv_exact:.4}"));
            }
            Ok(())
        },
    );
}

#[test]
fn criterion_8_conjugacy_suite() {
    criterion(
        8,
        "G*(l) = -U(e^l) on the alpha/w/l grid within 1e-8; queue exponent matches its transform on 200 instances within 1e-8",
        Some(Duration::from_secs(60)),
        || {
            for &alpha in &[1.5f64, 2.0, 3.0, 5.0] {
                for &w in &[0.5f64, 1.0, 4.0] {
                    let u = Utility::alpha_fair(alpha, w).unwrap();
                    for k in 0..=24 {
                        let l = -3.0 + 6.0 * k as f64 / 24.0;
                        let diff = (u.g_conjugate(l) + u.value(l.exp()).unwrap()).abs();
                        if diff > 1e-8 {
                            return Err(format!(
                                "alpha={alpha} w={w} l={l}: conjugacy off by {diff:.2e}"
                            ));
                        }
                    }
                }
            }
            let mut rng = ChaCha12Rng::seed_from_u64(8);
            for trial in 0..200 {
                let n = rng.gen_range(1..=5);
                let queue = QueueSpec {
                    id: "q".into(),
                    capacity: rng.gen_range(0.5..4.0),
                    discipline: Discipline::ProcessorSharing,
                };
                let lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
                let m: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.gen_bool(0.2) {
                            0.0
                        } else {
                            rng.gen_range(0.0..4.0)
                        }
                    })
                    .collect();
                let a = optimize::beta_queue(&queue, &lambdas, &m);
                let b = optimize::beta_queue_dual(&queue, &lambdas, &m);
                if (a - b).abs() > 1e-8 {
                    return Err(format!("trial {trial}: {a} vs {b}"));
                }
            }
            Ok(())
        },
    );
}
