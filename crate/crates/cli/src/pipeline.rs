//! Simulate, estimate, query and benchmark, as library calls.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stgp_core::sim::{generate_measurements, initial_grid, GroundTruth, ScenarioConfig};
use stgp_core::{bind_offgrid, build_prior_factors, gauss_newton, query, Measurement, Posterior, SolverError};

use crate::config::SCHEMA_VERSION;
use crate::error::CliError;
use crate::files::{self, ReportFile};
use crate::posterior_file;

pub const MEASUREMENTS_FILE: &str = "measurements.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const REPORT_FILE: &str = "report.json";
pub const POSTERIOR_FILE: &str = "posterior.bin";
pub const BENCH_FILE: &str = "bench.json";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Ground-truth state rows at every knot, time-major.
pub fn ground_truth_rows(cfg: &ScenarioConfig, truth: &GroundTruth) -> Result<Vec<Vec<f64>>, CliError> {
    let s = cfg.s_knots();
    let mut rows = Vec::with_capacity(s.len() * cfg.n_time);
    for t in cfg.t_knots() {
        for (sv, x) in s.iter().zip(truth.row(&s, t)?) {
            rows.push(files::state_row(*sv, t, &x, None));
        }
    }
    Ok(rows)
}

/// Writes `measurements.json` and `ground_truth.csv`; returns the readings.
pub fn simulate(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<Measurement>, CliError> {
    cfg.validate()?;
    let truth = GroundTruth::new(cfg)?;
    let measurements = generate_measurements(cfg, &truth)?;
    ensure_dir(out)?;
    files::write_measurements(&out.join(MEASUREMENTS_FILE), cfg.seed, &measurements)?;
    files::write_table_file(&out.join(GROUND_TRUTH_FILE), &files::state_header(false), &ground_truth_rows(cfg, &truth)?)?;
    Ok(measurements)
}

/// Builds the factor graph and runs Gauss-Newton. Non-convergence is not an
/// error here; inspect `report.converged`.
pub fn solve(cfg: &ScenarioConfig, measurements: &[Measurement]) -> Result<Posterior, CliError> {
    cfg.validate()?;
    let params = cfg.prior_params();
    let grid = initial_grid(cfg, measurements)?;
    let mut factors = build_prior_factors(&grid, &params);
    for m in measurements {
        factors.measurements.push(bind_offgrid(m.clone(), &grid, &params)?);
    }
    Ok(gauss_newton(grid, &factors, &params, &cfg.solver.options())?)
}

/// State rows with marginal std-devs at the given points.
pub fn query_rows(post: &Posterior, points: &[(f64, f64)]) -> Result<Vec<Vec<f64>>, CliError> {
    points
        .iter()
        .map(|&(s, t)| {
            let (x, cov) = query(post, s, t)?;
            Ok(files::state_row(s, t, &x, Some(&cov)))
        })
        .collect()
}

/// Every knot, time-major.
pub fn knot_points(post: &Posterior) -> Vec<(f64, f64)> {
    let g = &post.grid;
    g.t_knots().iter().flat_map(|&t| g.s_knots().iter().map(move |&s| (s, t))).collect()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

/// `ns × nt` points spanning the hull, time-major.
pub fn grid_points(post: &Posterior, ns: usize, nt: usize) -> Vec<(f64, f64)> {
    let (s, t) = (post.grid.s_knots(), post.grid.t_knots());
    let ss = linspace(s[0], s[s.len() - 1], ns);
    linspace(t[0], t[t.len() - 1], nt).into_iter().flat_map(|tv| ss.iter().map(move |&sv| (sv, tv))).collect()
}

/// Parses `SxT`, e.g. `100x50`.
pub fn parse_grid(spec: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Invalid(format!("grid must look like 100x50, got {spec:?}"));
    let (a, b) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let (ns, nt) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if ns == 0 || nt == 0 {
        return Err(bad());
    }
    Ok((ns, nt))
}

pub struct EstimateOutcome {
    pub posterior: Posterior,
    pub report: ReportFile,
}

/// Writes `report.json`, and on success `estimate.csv` and `posterior.bin`.
/// Returns [`CliError::NotConverged`] after writing everything when the
/// iteration budget ran out.
pub fn estimate(cfg: &ScenarioConfig, measurements: &[Measurement], out: &Path) -> Result<EstimateOutcome, CliError> {
    ensure_dir(out)?;
    let posterior = match solve(cfg, measurements) {
        Ok(p) => p,
        Err(e) => {
            if let CliError::Solver(SolverError::Divergence { iteration, trace }) = &e {
                let mut report = ReportFile::new(cfg.n_space, cfg.n_time, measurements.len(), &Default::default());
                report.iterations = *iteration;
                report.cost_trace = trace.clone();
                report.failure = Some(e.to_string());
                report.save(&out.join(REPORT_FILE))?;
            }
            return Err(e);
        }
    };
    let report = ReportFile::new(cfg.n_space, cfg.n_time, measurements.len(), &posterior.report);
    report.save(&out.join(REPORT_FILE))?;
    posterior_file::save(&out.join(POSTERIOR_FILE), &posterior)?;
    let rows = query_rows(&posterior, &knot_points(&posterior))?;
    files::write_table_file(&out.join(ESTIMATE_FILE), &files::state_header(true), &rows)?;
    if !posterior.report.converged {
        return Err(CliError::NotConverged { iterations: posterior.report.iterations });
    }
    Ok(EstimateOutcome { posterior, report })
}

pub fn measurements_path(out: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| out.join(MEASUREMENTS_FILE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    N,
    K,
}

/// One `--sweep` argument such as `K=20,40,80`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<usize>,
}

impl std::str::FromStr for Sweep {
    type Err = CliError;

    fn from_str(spec: &str) -> Result<Self, CliError> {
        let bad = || CliError::Invalid(format!("sweep must look like K=20,40,80, got {spec:?}"));
        let (axis, list) = spec.split_once('=').ok_or_else(bad)?;
        let axis = match axis.trim() {
            "N" | "n" => Axis::N,
            "K" | "k" => Axis::K,
            _ => return Err(bad()),
        };
        let values: Vec<usize> = list.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        if values.is_empty() || values.contains(&0) {
            return Err(bad());
        }
        Ok(Sweep { axis, values })
    }
}

/// Grid sizes `(N, K)` of the cartesian product of sweeps, the last sweep
/// varying fastest; axes not swept keep the template's size.
pub fn sweep_sizes(template: &ScenarioConfig, sweeps: &[Sweep]) -> Vec<(usize, usize)> {
    let mut sizes = vec![(template.n_space, template.n_time)];
    for sw in sweeps {
        sizes = sizes
            .iter()
            .flat_map(|&(n, k)| {
                sw.values.iter().map(move |&v| match sw.axis {
                    Axis::N => (v, k),
                    Axis::K => (n, v),
                })
            })
            .collect();
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveTiming {
    pub n_space: usize,
    pub n_time: usize,
    pub nodes: usize,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub median_seconds_per_iteration: f64,
    /// Median relative to the previous row; absent on the first.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub n_space: usize,
    pub n_time: usize,
    pub queries: usize,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchFile {
    pub schema_version: String,
    pub reps: usize,
    pub solve: Vec<SolveTiming>,
    pub query: Vec<QueryTiming>,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub sweeps: Vec<Sweep>,
    pub query_sizes: Vec<usize>,
    pub reps: usize,
    pub queries: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            sweeps: vec![Sweep { axis: Axis::K, values: vec![20, 40, 80] }],
            query_sizes: vec![10, 40],
            reps: 5,
            queries: 100,
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn resized(template: &ScenarioConfig, n: usize, k: usize) -> ScenarioConfig {
    let mut c = template.clone();
    c.n_space = n;
    c.n_time = k;
    c
}

fn sample_measurements(cfg: &ScenarioConfig) -> Result<Vec<Measurement>, CliError> {
    cfg.validate()?;
    Ok(generate_measurements(cfg, &GroundTruth::new(cfg)?)?)
}

pub fn time_solves(cfg: &ScenarioConfig, reps: usize) -> Result<SolveTiming, CliError> {
    let measurements = sample_measurements(cfg)?;
    let mut seconds = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let post = solve(cfg, &measurements)?;
        seconds.push(t0.elapsed().as_secs_f64());
        last = Some(post.report);
    }
    let report = last.expect("at least one repetition");
    let med = median(&seconds);
    Ok(SolveTiming {
        n_space: cfg.n_space,
        n_time: cfg.n_time,
        nodes: cfg.n_space * cfg.n_time,
        iterations: report.iterations,
        converged: report.converged,
        median_seconds_per_iteration: med / report.iterations.max(1) as f64,
        seconds,
        median_seconds: med,
        ratio: None,
    })
}

/// Median wall time of single queries at seeded random points in the hull.
pub fn time_queries(post: &Posterior, queries: usize, seed: u64) -> Result<f64, CliError> {
    let (s, t) = (post.grid.s_knots(), post.grid.t_knots());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seconds = Vec::with_capacity(queries);
    for _ in 0..queries.max(1) {
        let sv = rng.random_range(s[0]..=s[s.len() - 1]);
        let tv = rng.random_range(t[0]..=t[t.len() - 1]);
        let t0 = Instant::now();
        let out = query(post, sv, tv)?;
        seconds.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(median(&seconds))
}

pub fn benchmark(template: &ScenarioConfig, opts: &BenchOptions) -> Result<BenchFile, CliError> {
    let mut solve_rows: Vec<SolveTiming> = Vec::new();
    for (n, k) in sweep_sizes(template, &opts.sweeps) {
        let mut row = time_solves(&resized(template, n, k), opts.reps)?;
        row.ratio = solve_rows.last().map(|p| row.median_seconds / p.median_seconds);
        solve_rows.push(row);
    }
    let mut query_rows = Vec::new();
    for &size in &opts.query_sizes {
        let cfg = resized(template, size, size);
        let post = solve(&cfg, &sample_measurements(&cfg)?)?;
        query_rows.push(QueryTiming {
            n_space: size,
            n_time: size,
            queries: opts.queries,
            median_seconds: time_queries(&post, opts.queries, cfg.seed)?,
        });
    }
    Ok(BenchFile { schema_version: SCHEMA_VERSION.to_string(), reps: opts.reps, solve: solve_rows, query: query_rows })
}

pub fn write_bench(path: &Path, bench: &BenchFile) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(bench).expect("bench serializes");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
