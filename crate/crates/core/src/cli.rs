//! Model files, experiment orchestration, and text emission.
//!
//! Model files are TOML with two top-level lists, `queues` and `routes`;
//! unknown keys are rejected. Every emitted file starts with `#` header
//! lines carrying the generator version, format version, the model file's
//! SHA-256, and a full parameter echo, so reruns are byte-identical and
//! self-describing.

use std::fmt::Write as FmtWrite;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exact::{self, ExactOptions, NmaxPolicy, StationaryTable};
use crate::model::{
    CongestionControl, Discipline, ModelIndex, NetworkModel, QueueSpec, RouteSpec, Utility,
};
use crate::optimize;
use crate::simulate::{self, SimConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_STATE_BUDGET: usize = 5_000_000;
pub const DEFAULT_EPSILON: f64 = 0.25;
pub const STATE_BUDGET_ENV: &str = "CWNDNET_STATE_BUDGET";

/// State budget from `CWNDNET_STATE_BUDGET`, falling back to the default.
pub fn state_budget_from_env() -> usize {
    std::env::var(STATE_BUDGET_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_STATE_BUDGET)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    queues: Vec<QueueFile>,
    routes: Vec<RouteFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueueFile {
    id: String,
    capacity: f64,
    discipline: DisciplineFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomTables {
    gamma: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DisciplineFile {
    Preset(String),
    Custom(CustomTables),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteFile {
    id: String,
    path: Vec<String>,
    utility: UtilityFile,
    window_cap: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityFile {
    kind: String,
    alpha: f64,
    weight: f64,
}

/// A parsed model plus provenance for emitted headers.
#[derive(Debug, Clone)]
pub struct ModelSource {
    pub model: NetworkModel,
    pub sha256: String,
    pub path: Option<PathBuf>,
}

impl ModelSource {
    /// Wrap an in-memory model (hash of its debug rendering stands in for a
    /// file digest).
    pub fn in_memory(model: NetworkModel) -> Self {
        let digest = Sha256::digest(format!("{model:?}").as_bytes());
        ModelSource {
            model,
            sha256: hex_string(&digest),
            path: None,
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Parse a model from TOML text; schema errors carry line information.
pub fn parse_model(text: &str) -> Result<NetworkModel> {
    let file: ModelFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let queues = file
        .queues
        .into_iter()
        .map(|q| {
            let discipline = match q.discipline {
                DisciplineFile::Preset(name) => match name.as_str() {
                    "ps" => Discipline::ProcessorSharing,
                    "fifo" => Discipline::Fifo,
                    "lifo" => Discipline::LifoPreemptive,
                    other => {
                        return Err(Error::Parse(format!(
                            "queue `{}`: unknown discipline `{other}` \
                             (expected \"ps\", \"fifo\", \"lifo\", or custom tables)",
                            q.id
                        )))
                    }
                },
                DisciplineFile::Custom(t) => Discipline::Custom {
                    gamma: t.gamma,
                    delta: t.delta,
                },
            };
            Ok(QueueSpec {
                id: q.id,
                capacity: q.capacity,
                discipline,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let routes = file
        .routes
        .into_iter()
        .map(|r| {
            if r.utility.kind != "alpha_fair" {
                return Err(Error::Parse(format!(
                    "route `{}`: unknown utility kind `{}`",
                    r.id, r.utility.kind
                )));
            }
            let utility = Utility::alpha_fair(r.utility.alpha, r.utility.weight)
                .map_err(|e| Error::Parse(format!("route `{}`: {e}", r.id)))?;
            let mut control = CongestionControl::new(utility);
            control.window_cap = r.window_cap;
            Ok(RouteSpec {
                id: r.id,
                path: r.path,
                control,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkModel::new(queues, routes))
}

/// Load and validate a model file.
pub fn load_model(path: &Path) -> Result<ModelSource> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let model = parse_model(&text)?;
    let violations = crate::model::validate_network(&model);
    if !violations.is_empty() {
        return Err(Error::InvalidModel(violations));
    }
    let digest = Sha256::digest(&bytes);
    Ok(ModelSource {
        model,
        sha256: hex_string(&digest),
        path: Some(path.to_path_buf()),
    })
}

/// Experiment parameters shared by the sweep-style commands.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub c_values: Vec<u64>,
    pub n_max: NmaxPolicy,
    pub tolerance: f64,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub epsilon: f64,
    pub state_budget: usize,
}

impl ExperimentConfig {
    pub fn new(c_values: Vec<u64>) -> Self {
        ExperimentConfig {
            c_values,
            n_max: NmaxPolicy::Auto,
            tolerance: 1e-8,
            seed: 0,
            out_dir: None,
            epsilon: DEFAULT_EPSILON,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_values.is_empty() {
            return Err(Error::Domain("c_values must be non-empty".into()));
        }
        if self.c_values[0] < 1 {
            return Err(Error::Domain("c_values must be positive".into()));
        }
        if self.c_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("c_values must be strictly ascending".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Domain("tolerance must be > 0".into()));
        }
        Ok(())
    }

    fn exact_options(&self) -> ExactOptions {
        ExactOptions {
            n_max: self.n_max,
            tail_tol: 1e-12,
            state_budget: self.state_budget,
        }
    }
}

fn write_header(w: &mut dyn Write, source: &ModelSource, params: &[(&str, String)]) -> Result<()> {
    writeln!(w, "# generator cwndnet {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "# format_version {FORMAT_VERSION}")?;
    writeln!(w, "# model_sha256 {}", source.sha256)?;
    if let Some(p) = &source.path {
        writeln!(w, "# model_path {}", p.display())?;
    }
    for (k, v) in params {
        writeln!(w, "# {k} {v}")?;
    }
    Ok(())
}

fn fmt_c_list(cs: &[u64]) -> String {
    cs.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Solver artifacts emitted by `run_solve` and reused by the sweep header.
#[derive(Debug, Clone)]
pub struct SolveArtifacts {
    pub allocation: optimize::Allocation,
    pub prices: optimize::Prices,
    pub kkt: optimize::KktReport,
    pub beta: optimize::BetaStarReport,
    pub entropy: optimize::EntropySolution,
}

fn solve_artifacts(idx: &ModelIndex, tol: f64) -> Result<SolveArtifacts> {
    let (allocation, prices, kkt) = optimize::solve_system(idx, tol)?;
    let entropy = optimize::primal_reconstruct(idx, &allocation, &prices, tol.max(1e-6))?;
    let dual: f64 = (0..idx.n_routes())
        .map(|i| {
            idx.control(i)
                .utility
                .value(allocation.lambda[i])
                .unwrap_or(f64::NEG_INFINITY)
        })
        .sum();
    let gap = (entropy.objective - dual).abs();
    let beta = optimize::BetaStarReport {
        primal: entropy.objective,
        dual,
        gap,
        within_tol: gap <= tol.max(1e-10) * (1.0 + dual.abs()),
    };
    Ok(SolveArtifacts {
        allocation,
        prices,
        kkt,
        beta,
        entropy,
    })
}

/// Solve the rate allocation and emit the solver export.
pub fn run_solve(
    w: &mut dyn Write,
    idx: &ModelIndex,
    source: &ModelSource,
    tol: f64,
) -> Result<SolveArtifacts> {
    let art = solve_artifacts(idx, tol)?;
    write_header(w, source, &[("params", format!("tol={tol:e}"))])?;
    for (i, r) in idx.model.routes.iter().enumerate() {
        writeln!(
            w,
            "lambda_star\t{}\t{:.12e}",
            r.id, art.allocation.lambda[i]
        )?;
    }
    for (j, q) in idx.model.queues.iter().enumerate() {
        writeln!(w, "q_star\t{}\t{:.12e}", q.id, art.prices.q[j])?;
    }
    writeln!(w, "beta_star_primal\t{:.12e}", art.beta.primal)?;
    writeln!(w, "beta_star_dual\t{:.12e}", art.beta.dual)?;
    writeln!(w, "beta_star_gap\t{:.12e}", art.beta.gap)?;
    writeln!(
        w,
        "kkt_residuals\tstationarity={:.3e}\tcomplementary_slackness={:.3e}\tprimal_feasibility={:.3e}\tdual_feasibility={:.3e}",
        art.kkt.stationarity,
        art.kkt.complementary_slackness,
        art.kkt.primal_feasibility,
        art.kkt.dual_feasibility
    )?;
    Ok(art)
}

/// Exact stationary analysis at one congestion level: emits the throughput
/// report and, optionally, the full table.
pub fn run_exact(
    w: &mut dyn Write,
    table_out: Option<&mut dyn Write>,
    idx: &ModelIndex,
    source: &ModelSource,
    c: u64,
    opts: &ExactOptions,
) -> Result<exact::ThroughputReport> {
    let table = exact::stationary_distribution(idx, c, opts)?;
    let report = exact::exact_throughput(idx, &table);
    write_header(
        w,
        source,
        &[(
            "params",
            format!("c={c} n_max={} tail_tol={:e}", table.n_max, opts.tail_tol),
        )],
    )?;
    writeln!(w, "log_b\t{:.12e}", table.log_b)?;
    writeln!(w, "tail_bound\t{:.3e}", table.tail_bound)?;
    writeln!(w, "states\t{}", table.n_states())?;
    if report.truncation_warning {
        writeln!(w, "# warning truncation may shift throughputs beyond 1e-9")?;
    }
    for (i, r) in idx.model.routes.iter().enumerate() {
        writeln!(w, "route_id\t{}", r.id)?;
        writeln!(w, "lambda_c\t{:.12e}", report.lambda[i])?;
        writeln!(
            w,
            "mean_window_over_c\t{:.12e}",
            report.mean_window_over_c[i]
        )?;
    }
    if let Some(tw) = table_out {
        emit_table(tw, idx, source, &table)?;
    }
    Ok(report)
}

/// Columnar stationary-table export: one row per state, counts in the
/// canonical pair order, then the probability.
pub fn emit_table(
    w: &mut dyn Write,
    idx: &ModelIndex,
    source: &ModelSource,
    table: &StationaryTable,
) -> Result<()> {
    write_header(
        w,
        source,
        &[(
            "params",
            format!(
                "c={} n_max={} log_b={:.12e} tail_bound={:.3e}",
                table.c, table.n_max, table.log_b, table.tail_bound
            ),
        )],
    )?;
    let cols: Vec<String> = idx
        .pairs
        .iter()
        .map(|&(j, i)| format!("m_{}:{}", idx.model.queues[j].id, idx.model.routes[i].id))
        .collect();
    writeln!(w, "{}\tprobability", cols.join("\t"))?;
    for (m, p) in table.iter() {
        let row: Vec<String> = m.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}\t{:.12e}", row.join("\t"), p)?;
    }
    Ok(())
}

/// One row of the convergence sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub c: u64,
    pub lambda_c: Vec<f64>,
    pub abs_err: Vec<f64>,
    pub mean_window_over_c: Vec<f64>,
    pub concentration: f64,
    /// Distance of the scaled mean state to the reconstructed optimum.
    pub mean_state_distance: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub artifacts: SolveArtifacts,
    pub rows: Vec<SweepRow>,
}

/// Convergence sweep over the congestion ladder: exact throughput per `c`,
/// error against the optimal allocation, and concentration around the
/// reconstructed optimum.
pub fn run_sweep(
    w: &mut dyn Write,
    idx: &ModelIndex,
    source: &ModelSource,
    cfg: &ExperimentConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    let artifacts = solve_artifacts(idx, cfg.tolerance)?;
    write_header(
        w,
        source,
        &[(
            "params",
            format!(
                "c_values={} epsilon={} tol={:e} state_budget={}",
                fmt_c_list(&cfg.c_values),
                cfg.epsilon,
                cfg.tolerance,
                cfg.state_budget
            ),
        )],
    )?;
    for (i, r) in idx.model.routes.iter().enumerate() {
        writeln!(
            w,
            "# lambda_star {} {:.12e}",
            r.id, artifacts.allocation.lambda[i]
        )?;
    }
    for (j, q) in idx.model.queues.iter().enumerate() {
        writeln!(w, "# q_star {} {:.12e}", q.id, artifacts.prices.q[j])?;
    }
    writeln!(
        w,
        "# beta_star primal={:.12e} dual={:.12e} gap={:.3e}",
        artifacts.beta.primal, artifacts.beta.dual, artifacts.beta.gap
    )?;

    let mut cols = vec!["c".to_string()];
    for r in &idx.model.routes {
        cols.push(format!("lambda_c:{}", r.id));
    }
    for r in &idx.model.routes {
        cols.push(format!("abs_err:{}", r.id));
    }
    for r in &idx.model.routes {
        cols.push(format!("mean_window_over_c:{}", r.id));
    }
    cols.push("concentration_prob".into());
    cols.push("mean_state_distance".into());
    writeln!(w, "{}", cols.join("\t"))?;

    let opts = cfg.exact_options();
    let mut rows = Vec::new();
    for &c in &cfg.c_values {
        let table = exact::stationary_distribution(idx, c, &opts)?;
        let mut report = exact::exact_throughput(idx, &table);
        report.manifold_distance = Some(report.distance_to(&artifacts.entropy.m));
        let abs_err: Vec<f64> = report
            .lambda
            .iter()
            .zip(&artifacts.allocation.lambda)
            .map(|(l, s)| (l - s).abs())
            .collect();
        let concentration =
            exact::concentration_probability(&table, &artifacts.entropy.m, cfg.epsilon);
        let mut fields = vec![c.to_string()];
        fields.extend(report.lambda.iter().map(|v| format!("{v:.12e}")));
        fields.extend(abs_err.iter().map(|v| format!("{v:.12e}")));
        fields.extend(
            report
                .mean_window_over_c
                .iter()
                .map(|v| format!("{v:.12e}")),
        );
        fields.push(format!("{concentration:.12e}"));
        fields.push(format!(
            "{:.12e}",
            report.manifold_distance.unwrap_or(f64::NAN)
        ));
        writeln!(w, "{}", fields.join("\t"))?;
        rows.push(SweepRow {
            c,
            lambda_c: report.lambda,
            abs_err,
            mean_window_over_c: report.mean_window_over_c,
            concentration,
            mean_state_distance: report.manifold_distance.unwrap_or(f64::NAN),
        });
    }
    Ok(SweepResult { artifacts, rows })
}

/// Empirical large-deviations slope check.
#[derive(Debug, Clone)]
pub struct SlopeReport {
    pub c_values: Vec<u64>,
    /// `y_c = -(1/c) log P(M = floor(c m))`.
    pub y: Vec<f64>,
    /// Extrapolated limit of `y_c` (intercept of the finite-size fit).
    pub fitted: f64,
    /// `beta_G(m) - beta_G*` from the entropy machinery.
    pub analytic: f64,
    /// Relative deviation (absolute when the analytic rate is ~ 0).
    pub deviation: f64,
}

/// Compare the decay slope of the stationary point mass at `floor(c m)`
/// against the analytic rate.
///
/// `y_c` carries a Stirling-type finite-size correction spanned by
/// `(log c)/c` and `1/c`; the limit is the constant coefficient of a
/// least-squares fit of `y_c` against `[1, (log c)/c, 1/c]` (fewer
/// regressors when the ladder is short). Probabilities are evaluated in log
/// space throughout, so deep tails cannot underflow.
pub fn run_ldp_check(
    w: &mut dyn Write,
    idx: &ModelIndex,
    source: &ModelSource,
    target: &[f64],
    cfg: &ExperimentConfig,
) -> Result<SlopeReport> {
    cfg.validate()?;
    if target.len() != idx.n_pairs() {
        return Err(Error::Domain(format!(
            "target point must have one coordinate per incidence pair ({}), got {}",
            idx.n_pairs(),
            target.len()
        )));
    }
    let opts = cfg.exact_options();
    let mut y = Vec::new();
    for &c in &cfg.c_values {
        let trunc = exact::normalizing_constant(idx, c, &opts)?;
        let m: Vec<u32> = target
            .iter()
            .map(|&x| (x * c as f64).floor() as u32)
            .collect();
        let lw = exact::log_weight(idx, c, &exact::CountVector(m));
        let log_p = lw - trunc.log_b;
        y.push(-log_p / c as f64);
    }

    let fitted = fit_intercept(&cfg.c_values, &y);
    let beta = optimize::beta_star(idx, cfg.tolerance)?;
    let analytic = optimize::beta_g(idx, target) - beta.primal;
    let deviation = if analytic.abs() > 1e-9 {
        (fitted - analytic).abs() / analytic.abs()
    } else {
        (fitted - analytic).abs()
    };

    write_header(
        w,
        source,
        &[(
            "params",
            format!(
                "target={} c_values={} tol={:e}",
                target
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                fmt_c_list(&cfg.c_values),
                cfg.tolerance
            ),
        )],
    )?;
    writeln!(w, "# analytic_rate {analytic:.12e}")?;
    writeln!(w, "# fitted_limit {fitted:.12e}")?;
    writeln!(w, "# deviation {deviation:.6e}")?;
    writeln!(w, "c\ty_c")?;
    for (&c, &yc) in cfg.c_values.iter().zip(&y) {
        writeln!(w, "{c}\t{yc:.12e}")?;
    }
    Ok(SlopeReport {
        c_values: cfg.c_values.clone(),
        y,
        fitted,
        analytic,
        deviation,
    })
}

/// Intercept of the least-squares fit of `y` against `[1, (log c)/c, 1/c]`,
/// dropping regressors when the ladder is short.
fn fit_intercept(cs: &[u64], y: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let n = cs.len();
    let p = 3.min(n);
    let mut a = DMatrix::<f64>::zeros(n, p);
    for (r, &c) in cs.iter().enumerate() {
        let c = c as f64;
        a[(r, 0)] = 1.0;
        if p > 1 {
            a[(r, 1)] = c.ln() / c;
        }
        if p > 2 {
            a[(r, 2)] = 1.0 / c;
        }
    }
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    match svd.solve(&b, 1e-14) {
        Ok(x) => x[0],
        Err(_) => y.iter().sum::<f64>() / n as f64,
    }
}

/// Simulation campaign artifacts.
#[derive(Debug, Clone)]
pub struct SimulationArtifacts {
    pub stats: simulate::SimStats,
    pub little: simulate::LittleReport,
    /// Per-route z-scores against the exact throughput, present when the
    /// model is capped with processor sharing so the exact engine applies.
    pub exact_zscores: Option<Vec<f64>>,
}

/// Run the simulation campaign; when the model is capped and processor
/// sharing, also runs the exact engine and emits comparison z-scores.
pub fn run_simulate(
    w: &mut dyn Write,
    idx: &ModelIndex,
    source: &ModelSource,
    sim: &SimConfig,
    state_budget: usize,
) -> Result<SimulationArtifacts> {
    let stats = simulate::simulate(idx, sim)?;
    let little = if sim.replications >= 2 {
        simulate::little_check(idx, &stats, 4.0)?
    } else {
        simulate::LittleReport::default()
    };

    let all_ps = idx
        .model
        .queues
        .iter()
        .all(|q| q.discipline == Discipline::ProcessorSharing);
    let all_capped = (0..idx.n_routes()).all(|i| idx.control(i).window_cap.is_some());
    let exact_zscores: Option<Vec<f64>> = if all_ps && all_capped && !stats.degenerate {
        let opts = ExactOptions {
            n_max: NmaxPolicy::Auto,
            tail_tol: 1e-12,
            state_budget,
        };
        let table = exact::stationary_distribution(idx, sim.c, &opts)?;
        let report = exact::exact_throughput(idx, &table);
        Some(
            (0..idx.n_routes())
                .map(|i| {
                    let se = stats.throughput_se[i];
                    if se > 0.0 {
                        (stats.throughput_mean[i] - report.lambda[i]) / se
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        )
    } else {
        None
    };

    write_header(
        w,
        source,
        &[(
            "params",
            format!(
                "c={} seed={} time={} warmup={} reps={}",
                sim.c, sim.seed, sim.measure_time, sim.warmup_time, sim.replications
            ),
        )],
    )?;
    if stats.degenerate {
        writeln!(w, "# warning chain froze (all hazards zero)")?;
    }
    if stats.nonstationary_warning {
        writeln!(
            w,
            "# warning replication variance differs across window halves; \
             confidence intervals are suspect"
        )?;
    }
    for (i, r) in idx.model.routes.iter().enumerate() {
        writeln!(
            w,
            "throughput\t{}\t{:.9e}\t{:.3e}",
            r.id, stats.throughput_mean[i], stats.throughput_se[i]
        )?;
    }
    for (j, q) in idx.model.queues.iter().enumerate() {
        writeln!(
            w,
            "sojourn\t{}\t{:.9e}\t{:.3e}",
            q.id, stats.sojourn_mean[j], stats.sojourn_se[j]
        )?;
    }
    for (k, &(j, i)) in idx.pairs.iter().enumerate() {
        writeln!(
            w,
            "mean_count\t{}:{}\t{:.9e}\t{:.3e}",
            idx.model.queues[j].id,
            idx.model.routes[i].id,
            stats.counts_mean[k],
            stats.counts_se[k]
        )?;
    }
    for (i, r) in idx.model.routes.iter().enumerate() {
        writeln!(w, "mean_window\t{}\t{:.9e}", r.id, stats.window_mean[i])?;
    }
    writeln!(w, "little_violations\t{}", little.violations.len())?;
    for v in &little.violations {
        writeln!(
            w,
            "little_violation\t{}:{}\t{:.6e}\t{:.2}",
            v.queue, v.route, v.residual, v.z
        )?;
    }
    if let Some(zs) = &exact_zscores {
        for (i, r) in idx.model.routes.iter().enumerate() {
            writeln!(w, "exact_zscore\t{}\t{:.3}", r.id, zs[i])?;
        }
    }
    Ok(SimulationArtifacts {
        stats,
        little,
        exact_zscores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"
[[queues]]
id = "q0"
capacity = 1.0
discipline = "ps"

[[routes]]
id = "r0"
path = ["q0"]
utility = { kind = "alpha_fair", alpha = 2.0, weight = 1.0 }
"#;

    fn source(model: NetworkModel) -> ModelSource {
        ModelSource::in_memory(model)
    }

    #[test]
    fn parses_minimal_model() {
        let m = parse_model(SINGLE).unwrap();
        assert_eq!(m.queues.len(), 1);
        assert_eq!(m.routes.len(), 1);
        assert!(crate::model::validate_network(&m).is_empty());
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let text = SINGLE.replace("capacity = 1.0", "capacity = 1.0\nspeed = 2.0");
        match parse_model(&text) {
            Err(Error::Parse(msg)) => assert!(msg.contains("speed"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_utility_kind_is_rejected() {
        let text = SINGLE.replace("alpha_fair", "log_fair");
        assert!(matches!(parse_model(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn alpha_at_most_one_is_rejected() {
        let text = SINGLE.replace("alpha = 2.0", "alpha = 1.0");
        assert!(matches!(parse_model(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn custom_discipline_tables_parse() {
        let text = SINGLE.replace(
            "discipline = \"ps\"",
            "discipline = { gamma = [[1.0], [0.5, 0.5]], delta = [[1.0], [0.5, 0.5]] }",
        );
        let m = parse_model(&text).unwrap();
        assert!(matches!(m.queues[0].discipline, Discipline::Custom { .. }));
    }

    #[test]
    fn empty_routes_solve_nothing() {
        let text = r#"
routes = []

[[queues]]
id = "q0"
capacity = 1.0
discipline = "ps"
"#;
        let m = parse_model(text).unwrap();
        assert!(m.routes.is_empty());
        let idx = ModelIndex::new(&m).unwrap();
        assert!(optimize::solve_system(&idx, 1e-8).is_err());
    }

    #[test]
    fn experiment_config_validates_ladder() {
        let mut cfg = ExperimentConfig::new(vec![1, 2, 4]);
        cfg.validate().unwrap();
        cfg.c_values = vec![2, 2];
        assert!(cfg.validate().is_err());
        cfg.c_values = vec![];
        assert!(cfg.validate().is_err());
        cfg.c_values = vec![4, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_error_column_is_exponential_for_single_queue() {
        let model = parse_model(SINGLE).unwrap();
        let idx = ModelIndex::new(&model).unwrap();
        let cfg = ExperimentConfig::new(vec![1, 2, 4, 8]);
        let mut buf = Vec::new();
        let res = run_sweep(&mut buf, &idx, &source(model), &cfg).unwrap();
        let expect = [0.3679, 0.1353, 0.0183, 3.35e-4];
        for (row, &e) in res.rows.iter().zip(&expect) {
            assert!(
                (row.abs_err[0] - e).abs() <= 5e-4 + 0.01 * e,
                "c={}: {} vs {}",
                row.c,
                row.abs_err[0],
                e
            );
            // The error column here is exactly exp(-c).
            assert!((row.abs_err[0] - (-(row.c as f64)).exp()).abs() <= 1e-8);
        }
        for w in res.rows.windows(2) {
            assert!(w[1].abs_err[0] < w[0].abs_err[0]);
        }
    }

    #[test]
    fn sweep_concentration_column_decreases() {
        let model = parse_model(SINGLE).unwrap();
        let idx = ModelIndex::new(&model).unwrap();
        let cfg = ExperimentConfig::new(vec![5, 10, 20, 40]);
        let mut buf = Vec::new();
        let res = run_sweep(&mut buf, &idx, &source(model), &cfg).unwrap();
        for w in res.rows.windows(2) {
            assert!(w[1].concentration < w[0].concentration);
        }
        // The scaled mean state closes in on the reconstructed optimum.
        for row in &res.rows {
            assert!(
                row.mean_state_distance <= 0.05,
                "{}",
                row.mean_state_distance
            );
        }
    }

    #[test]
    fn ldp_check_single_queue_targets() {
        let model = parse_model(SINGLE).unwrap();
        let idx = ModelIndex::new(&model).unwrap();
        let cfg = ExperimentConfig::new(vec![20, 40, 80, 160]);
        let src = source(model);

        // Target m = 2: analytic rate 2 log 2 - 1.
        let mut buf = Vec::new();
        let rep = run_ldp_check(&mut buf, &idx, &src, &[2.0], &cfg).unwrap();
        let rate = 2.0 * 2.0_f64.ln() - 1.0;
        assert!((rep.analytic - rate).abs() <= 1e-6, "{}", rep.analytic);
        assert!(rep.deviation <= 0.05, "deviation {}", rep.deviation);

        // Target m = m* = 1: the rate vanishes and so does the fit.
        let mut buf = Vec::new();
        let rep = run_ldp_check(&mut buf, &idx, &src, &[1.0], &cfg).unwrap();
        assert!(rep.analytic.abs() <= 1e-6);
        assert!(rep.fitted.abs() <= 1e-3, "fitted {}", rep.fitted);

        // Target m = 0.5: rate 0.5 log 0.5 + 0.5.
        let mut buf = Vec::new();
        let rep = run_ldp_check(&mut buf, &idx, &src, &[0.5], &cfg).unwrap();
        let rate = 0.5 * 0.5_f64.ln() + 0.5;
        assert!((rep.analytic - rate).abs() <= 1e-6);
        assert!(rep.deviation <= 0.05, "deviation {}", rep.deviation);
    }

    #[test]
    fn sweep_header_lambda_matches_solve_output() {
        let model = parse_model(SINGLE).unwrap();
        let idx = ModelIndex::new(&model).unwrap();
        let src = source(model);
        let mut solve_buf = Vec::new();
        let art = run_solve(&mut solve_buf, &idx, &src, 1e-8).unwrap();
        let mut sweep_buf = Vec::new();
        let cfg = ExperimentConfig::new(vec![1, 2]);
        let res = run_sweep(&mut sweep_buf, &idx, &src, &cfg).unwrap();
        for (a, b) in art
            .allocation
            .lambda
            .iter()
            .zip(&res.artifacts.allocation.lambda)
        {
            assert!((a - b).abs() <= 1e-9);
        }
        let text = String::from_utf8(sweep_buf).unwrap();
        let line = text
            .lines()
            .find(|l| l.starts_with("# lambda_star r0"))
            .unwrap();
        let val: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!((val - art.allocation.lambda[0]).abs() <= 1e-9);
    }

    #[test]
    fn emission_is_deterministic() {
        let model = parse_model(SINGLE).unwrap();
        let idx = ModelIndex::new(&model).unwrap();
        let src = source(model);
        let cfg = ExperimentConfig::new(vec![1, 2]);
        let mut a = Vec::new();
        run_sweep(&mut a, &idx, &src, &cfg).unwrap();
        let mut b = Vec::new();
        run_sweep(&mut b, &idx, &src, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_simulate_reports_zscores_on_capped_ps_model() {
        let text = SINGLE.replace(
            "utility = { kind = \"alpha_fair\", alpha = 2.0, weight = 1.0 }",
            "utility = { kind = \"alpha_fair\", alpha = 2.0, weight = 1.0 }\nwindow_cap = 8",
        );
        let model = parse_model(&text).unwrap();
        let idx = ModelIndex::new(&model).unwrap();
        let src = source(model);
        let sim = SimConfig::new(21, 3, 5_000.0).with_replications(4);
        let mut buf = Vec::new();
        let art = run_simulate(&mut buf, &idx, &src, &sim, DEFAULT_STATE_BUDGET).unwrap();
        let zs = art.exact_zscores.expect("capped PS model has the oracle");
        assert!(zs[0].abs() <= 4.0, "z = {}", zs[0]);
        assert!(art.little.violations.is_empty());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("exact_zscore"));
    }
}
