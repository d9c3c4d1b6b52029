use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stgp_cli::pipeline::{self, BenchOptions, Sweep};
use stgp_cli::{files, posterior_file, CliError, ConfigFile};

#[derive(Parser)]
#[command(name = "stgp", version, about = "Space-time GP state estimation for continuum robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and noisy measurements.
    Simulate(Common),
    /// Solve for the posterior and write estimate.csv, report.json and posterior.bin.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Measurement file; defaults to <out>/measurements.json.
        #[arg(long)]
        measurements: Option<PathBuf>,
    },
    /// Query a saved posterior; prints CSV rows.
    Query {
        /// Directory holding posterior.bin.
        #[arg(long, alias = "out")]
        posterior: PathBuf,
        #[arg(long, requires = "t", conflicts_with = "grid")]
        s: Option<f64>,
        #[arg(long, requires = "s")]
        t: Option<f64>,
        /// Dense resampling over the hull, e.g. 100x50.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Time solves over a size sweep and queries at two grid sizes.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Sizes to sweep, e.g. K=20,40,80; repeat to combine axes.
        #[arg(long)]
        sweep: Vec<String>,
        /// Square grid sizes used for query timing.
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 40])]
        query_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
    },
}

fn load(common: &Common) -> Result<stgp_core::sim::ScenarioConfig, CliError> {
    let mut cfg = ConfigFile::load(&common.config)?.scenario;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = load(&common)?;
            let m = pipeline::simulate(&cfg, &common.out)?;
            eprintln!("wrote {} measurements to {}", m.len(), common.out.display());
        }
        Command::Estimate { common, measurements } => {
            let cfg = load(&common)?;
            let path = pipeline::measurements_path(&common.out, measurements.as_deref());
            let m = files::read_measurements(&path)?;
            let outcome = pipeline::estimate(&cfg, &m, &common.out)?;
            eprintln!(
                "converged in {} iterations, cost {:.6e}",
                outcome.report.iterations, outcome.report.final_cost
            );
        }
        Command::Query { posterior, s, t, grid } => {
            let post = posterior_file::load(&posterior.join(pipeline::POSTERIOR_FILE))?;
            let points = match (s, t, grid) {
                (Some(s), Some(t), None) => vec![(s, t)],
                (None, None, Some(g)) => {
                    let (ns, nt) = pipeline::parse_grid(&g)?;
                    pipeline::grid_points(&post, ns, nt)
                }
                _ => return Err(CliError::Invalid("give either --s and --t, or --grid".into())),
            };
            let rows = pipeline::query_rows(&post, &points)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            files::write_table(&mut lock, &files::state_header(true), &rows)
                .map_err(|e| CliError::Io { path: "<stdout>".into(), source: e.into() })?;
            lock.flush().map_err(|e| CliError::Io { path: "<stdout>".into(), source: e })?;
        }
        Command::Benchmark { common, sweep, query_sizes, reps, queries } => {
            let cfg = load(&common)?;
            let sweeps = sweep.iter().map(|s| s.parse::<Sweep>()).collect::<Result<Vec<_>, _>>()?;
            let mut opts = BenchOptions { query_sizes, reps, queries, ..Default::default() };
            if !sweeps.is_empty() {
                opts.sweeps = sweeps;
            }
            let bench = pipeline::benchmark(&cfg, &opts)?;
            std::fs::create_dir_all(&common.out).map_err(|e| CliError::Io { path: common.out.clone(), source: e })?;
            pipeline::write_bench(&common.out.join(pipeline::BENCH_FILE), &bench)?;
            for r in &bench.solve {
                eprintln!("N={} K={} solve {:.4}s", r.n_space, r.n_time, r.median_seconds);
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("STGP_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Invalid(format!("STGP_THREADS must be a count, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stgp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
