use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cwndnet::cli::{self, ExperimentConfig};
use cwndnet::exact::{ExactOptions, NmaxPolicy};
use cwndnet::model::ModelIndex;
use cwndnet::simulate::SimConfig;
use cwndnet::Error;

/// Window-controlled queueing networks: exact analysis, simulation, and
/// utility optimization.
#[derive(Parser)]
#[command(name = "cwndnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the utility-optimal rate allocation and certify it.
    Solve {
        #[arg(long)]
        model: PathBuf,
        /// KKT residual tolerance.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Write results into this directory instead of stdout.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exact stationary distribution and throughput at one congestion level.
    Exact {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        c: u64,
        /// Truncation: "auto" or an explicit total count.
        #[arg(long, default_value = "auto")]
        n_max: String,
        /// Also write the full stationary table (requires --out-dir).
        #[arg(long, default_value_t = false)]
        table: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Event-driven simulation with replication statistics.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        c: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Measurement window length.
        #[arg(long, default_value_t = 10_000.0)]
        time: f64,
        /// Warmup length; defaults to a tenth of the window.
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long, default_value_t = 2)]
        reps: u32,
        /// Emit a tab-separated per-event trace to stderr.
        #[arg(long, default_value_t = false)]
        trace: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Convergence sweep: exact throughput against the optimal allocation
    /// over a ladder of congestion levels.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated ascending congestion levels.
        #[arg(long, default_value = "5,10,20,40")]
        c_values: String,
        /// Concentration radius in scaled units.
        #[arg(long, default_value_t = cli::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value = "auto")]
        n_max: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Empirical large-deviations slope at a scaled target point.
    LdpCheck {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated scaled counts, one per incidence pair.
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "20,40,80,160")]
        c_values: String,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value = "auto")]
        n_max: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>, Error> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| Error::Parse(format!("bad congestion level `{t}`: {e}")))
        })
        .collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad coordinate `{t}`: {e}")))
        })
        .collect()
}

fn parse_n_max(text: &str) -> Result<NmaxPolicy, Error> {
    if text == "auto" {
        Ok(NmaxPolicy::Auto)
    } else {
        text.parse::<u32>()
            .map(NmaxPolicy::Explicit)
            .map_err(|e| Error::Parse(format!("bad n_max `{text}`: {e}")))
    }
}

/// Stdout, or a named file in `out_dir`.
fn sink(out_dir: &Option<PathBuf>, name: &str) -> Result<Box<dyn Write>, Error> {
    match out_dir {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok(Box::new(std::fs::File::create(dir.join(name))?))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Solve {
            model,
            tol,
            out_dir,
        } => {
            let source = cli::load_model(&model)?;
            let idx = ModelIndex::new(&source.model)?;
            let mut w = sink(&out_dir, "solve.tsv")?;
            cli::run_solve(&mut w, &idx, &source, tol)?;
        }
        Command::Exact {
            model,
            c,
            n_max,
            table,
            out_dir,
        } => {
            let source = cli::load_model(&model)?;
            let idx = ModelIndex::new(&source.model)?;
            let opts = ExactOptions {
                n_max: parse_n_max(&n_max)?,
                tail_tol: 1e-12,
                state_budget: cli::state_budget_from_env(),
            };
            let mut w = sink(&out_dir, &format!("exact_c{c}.tsv"))?;
            let mut table_file = if table {
                let dir = out_dir
                    .clone()
                    .ok_or_else(|| Error::Parse("--table requires --out-dir".into()))?;
                std::fs::create_dir_all(&dir)?;
                Some(std::fs::File::create(dir.join(format!("table_c{c}.tsv")))?)
            } else {
                None
            };
            cli::run_exact(
                &mut w,
                table_file.as_mut().map(|f| f as &mut dyn Write),
                &idx,
                &source,
                c,
                &opts,
            )?;
        }
        Command::Simulate {
            model,
            c,
            seed,
            time,
            warmup,
            reps,
            trace,
            out_dir,
        } => {
            let source = cli::load_model(&model)?;
            let idx = ModelIndex::new(&source.model)?;
            let mut sim = SimConfig::new(seed, c, time).with_replications(reps);
            if let Some(wu) = warmup {
                sim = sim.with_warmup(wu);
            }
            if trace {
                let mut err = std::io::stderr().lock();
                cwndnet::simulate::simulate_with_trace(&idx, &sim, Some(&mut err))?;
            }
            let mut w = sink(&out_dir, &format!("simulate_c{c}.tsv"))?;
            cli::run_simulate(&mut w, &idx, &source, &sim, cli::state_budget_from_env())?;
        }
        Command::Sweep {
            model,
            c_values,
            epsilon,
            tol,
            n_max,
            seed,
            out_dir,
        } => {
            let source = cli::load_model(&model)?;
            let idx = ModelIndex::new(&source.model)?;
            let mut cfg = ExperimentConfig::new(parse_u64_list(&c_values)?);
            cfg.epsilon = epsilon;
            cfg.tolerance = tol;
            cfg.n_max = parse_n_max(&n_max)?;
            cfg.seed = seed;
            cfg.state_budget = cli::state_budget_from_env();
            cfg.out_dir = out_dir.clone();
            let mut w = sink(&out_dir, "sweep.tsv")?;
            cli::run_sweep(&mut w, &idx, &source, &cfg)?;
        }
        Command::LdpCheck {
            model,
            target,
            c_values,
            tol,
            n_max,
            out_dir,
        } => {
            let source = cli::load_model(&model)?;
            let idx = ModelIndex::new(&source.model)?;
            let mut cfg = ExperimentConfig::new(parse_u64_list(&c_values)?);
            cfg.tolerance = tol;
            cfg.n_max = parse_n_max(&n_max)?;
            cfg.state_budget = cli::state_budget_from_env();
            let target = parse_f64_list(&target)?;
            let mut w = sink(&out_dir, "ldp_check.tsv")?;
            cli::run_ldp_check(&mut w, &idx, &source, &target, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // Downstream consumers closing the pipe early is not a failure.
        Err(cwndnet::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
