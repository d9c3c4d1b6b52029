//! Gauss-Newton batch solver over the space-time factor graph.

mod banded;

pub use banded::{BandCholesky, BandedInverse, BlockBandedSystem, BLOCK};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{PriorError, SolverError};
use crate::graph::{FactorSet, Grid};
use crate::prior::{Mat24, NodeState, PriorParams, Vec24};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Convergence threshold on `‖δ‖∞`.
    pub tol: f64,
    pub max_halvings: usize,
    /// Extract marginals and cell joints after the last iteration.
    pub compute_covariance: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iters: 50, tol: 1e-8, max_halvings: 8, compute_covariance: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Cost at the initial state followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub update_norms: Vec<f64>,
    /// Step scale accepted at each iteration (1 unless halved).
    pub step_scales: Vec<f64>,
    pub final_cost: f64,
    pub touched_blocks: usize,
    pub linearize_seconds: f64,
    pub factorize_seconds: f64,
    pub covariance_seconds: f64,
    pub total_seconds: f64,
}

/// Joint covariance over the distinct corner nodes of one cell, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct CellJoint {
    pub nodes: Vec<usize>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct Posterior {
    pub grid: Grid,
    pub params: PriorParams,
    /// Per-node 24×24 marginals; empty when covariances were not requested.
    pub marginals: Vec<Mat24>,
    /// Row-major over cells `(n, k)`, `max(N−1, 1) × max(K−1, 1)` of them.
    pub cells: Vec<CellJoint>,
    pub report: SolveReport,
}

impl Posterior {
    pub fn has_covariance(&self) -> bool {
        !self.marginals.is_empty()
    }

    fn cell_columns(&self) -> usize {
        self.grid.n_space().saturating_sub(1).max(1)
    }

    pub fn cell_joint(&self, cell: (usize, usize)) -> Option<&CellJoint> {
        self.cells.get(cell.1 * self.cell_columns() + cell.0)
    }

    pub fn marginal(&self, node: usize) -> Option<&Mat24> {
        self.marginals.get(node)
    }
}

/// Whitened linear contribution of one factor.
enum Contribution {
    Prior { nodes: Vec<usize>, jacobians: Vec<Mat24>, error: Vec24 },
    Measurement { nodes: Vec<usize>, jacobians: Vec<DMatrix<f64>>, error: DVector<f64> },
}

impl Contribution {
    fn nodes(&self) -> &[usize] {
        match self {
            Contribution::Prior { nodes, .. } | Contribution::Measurement { nodes, .. } => nodes,
        }
    }

    fn cost(&self) -> f64 {
        match self {
            Contribution::Prior { error, .. } => error.norm_squared(),
            Contribution::Measurement { error, .. } => error.norm_squared(),
        }
    }

    /// `−J_aᵀe`.
    fn gradient(&self, a: usize) -> Vec24 {
        match self {
            Contribution::Prior { jacobians, error, .. } => -jacobians[a].tr_mul(error),
            Contribution::Measurement { jacobians, error, .. } => {
                Vec24::from_column_slice(jacobians[a].tr_mul(error).as_slice()) * -1.0
            }
        }
    }

    /// `J_aᵀJ_b`.
    fn hessian(&self, a: usize, b: usize) -> Mat24 {
        match self {
            Contribution::Prior { jacobians, .. } => jacobians[a].tr_mul(&jacobians[b]),
            Contribution::Measurement { jacobians, .. } => {
                Mat24::from_column_slice(jacobians[a].tr_mul(&jacobians[b]).as_slice())
            }
        }
    }
}

/// Inverse Cholesky factors of the prior factor covariances.
pub fn prior_whiteners(factors: &FactorSet, params: &PriorParams) -> Result<Vec<Mat24>, SolverError> {
    factors
        .prior
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let fail = |source| SolverError::Factor { factor: i, source };
            let cov = f.covariance(params).map_err(fail)?;
            let chol = cov
                .cholesky()
                .ok_or_else(|| fail(PriorError::InvalidParams("factor covariance is not positive definite".into())))?;
            Ok(chol.l().solve_lower_triangular(&Mat24::identity()).expect("nonsingular triangle"))
        })
        .collect()
}

fn contributions(
    factors: &FactorSet,
    grid: &Grid,
    params: &PriorParams,
    whiteners: &[Mat24],
) -> Result<Vec<Contribution>, SolverError> {
    let prior = factors.prior.par_iter().zip(whiteners.par_iter()).enumerate().map(|(i, (f, w))| {
        let nodes = f.nodes();
        let states: Vec<&NodeState> = nodes.iter().map(|&n| &grid.states[n]).collect();
        let (e, jacs) = f.linearize(&states, params).map_err(|source| SolverError::Factor { factor: i, source })?;
        Ok(Contribution::Prior { nodes, jacobians: jacs.iter().map(|j| w * j).collect(), error: w * e })
    });
    let meas = factors.measurements.par_iter().enumerate().map(|(i, m)| {
        let nodes = m.nodes().to_vec();
        let states: Vec<&NodeState> = nodes.iter().map(|&n| &grid.states[n]).collect();
        let (e, jacs) = m.linearize(&states).map_err(|source| SolverError::Measurement { index: i, source })?;
        let w = m.whitener();
        Ok(Contribution::Measurement { nodes, jacobians: jacs.iter().map(|j| w * j).collect(), error: w * e })
    });
    let mut out: Vec<Result<Contribution, SolverError>> = prior.collect();
    out.extend(meas.collect::<Vec<_>>());
    out.into_iter().collect()
}

/// Where each grid node sits in the banded system: space-major
/// (`k·N + n`) or time-major (`n·K + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct NodeOrdering {
    slot: Vec<usize>,
    node: Vec<usize>,
    bandwidth: usize,
}

fn chain_bandwidth(fast: usize, slow: usize) -> usize {
    if slow == 1 {
        fast.saturating_sub(1).min(1)
    } else if fast == 1 {
        1
    } else {
        fast + 1
    }
}

impl NodeOrdering {
    /// The grid's own flattened order.
    pub fn natural(grid: &Grid) -> Self {
        let n = grid.len();
        NodeOrdering { slot: (0..n).collect(), node: (0..n).collect(), bandwidth: grid.block_bandwidth() }
    }

    /// Whichever of the two orders gives the narrower band; space-major on ties.
    pub fn narrowest(grid: &Grid) -> Self {
        let (ns, nt) = (grid.n_space(), grid.n_time());
        let time_major = chain_bandwidth(nt, ns);
        if time_major >= grid.block_bandwidth() {
            return Self::natural(grid);
        }
        let mut slot = vec![0; grid.len()];
        let mut node = vec![0; grid.len()];
        for k in 0..nt {
            for n in 0..ns {
                let i = grid.index(n, k);
                slot[i] = n * nt + k;
                node[n * nt + k] = i;
            }
        }
        NodeOrdering { slot, node, bandwidth: time_major }
    }

    pub fn slot(&self, node: usize) -> usize {
        self.slot[node]
    }

    pub fn node(&self, slot: usize) -> usize {
        self.node[slot]
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn is_natural(&self) -> bool {
        self.slot.iter().enumerate().all(|(i, &s)| i == s)
    }
}

/// Whitened normal equations `Σ JᵀWJ · δ = −Σ JᵀW e` and the cost `Σ eᵀWe`
/// at the current grid states, in the grid's natural node order.
pub fn linearize(
    factors: &FactorSet,
    grid: &Grid,
    params: &PriorParams,
    whiteners: &[Mat24],
) -> Result<(BlockBandedSystem, f64), SolverError> {
    linearize_ordered(factors, grid, params, whiteners, &NodeOrdering::natural(grid))
}

/// As [`linearize`], with node `i` placed at `ordering.slot(i)`.
pub fn linearize_ordered(
    factors: &FactorSet,
    grid: &Grid,
    params: &PriorParams,
    whiteners: &[Mat24],
    ordering: &NodeOrdering,
) -> Result<(BlockBandedSystem, f64), SolverError> {
    let mut sys = BlockBandedSystem::new(grid.len(), system_bandwidth(factors, ordering));
    let cost = linearize_into(factors, grid, params, whiteners, ordering, &mut sys)?;
    Ok((sys, cost))
}

/// Block bandwidth of the normal equations under `ordering`.
pub fn system_bandwidth(factors: &FactorSet, ordering: &NodeOrdering) -> usize {
    let spread = |nodes: &[usize]| {
        let slots = nodes.iter().map(|&n| ordering.slot(n));
        slots.clone().max().unwrap_or(0) - slots.min().unwrap_or(0)
    };
    let prior = factors.prior.iter().map(|f| spread(&f.nodes()));
    let meas = factors.measurements.iter().map(|m| spread(m.nodes()));
    prior.chain(meas).max().unwrap_or(0).max(ordering.bandwidth())
}

/// Accumulates the normal equations into an empty `sys`; returns the cost.
pub fn linearize_into(
    factors: &FactorSet,
    grid: &Grid,
    params: &PriorParams,
    whiteners: &[Mat24],
    ordering: &NodeOrdering,
    sys: &mut BlockBandedSystem,
) -> Result<f64, SolverError> {
    let parts = contributions(factors, grid, params, whiteners)?;
    let mut cost = 0.0;
    // fixed order: factors in declaration order
    for c in &parts {
        cost += c.cost();
        let nodes = c.nodes();
        for (a, &na) in nodes.iter().enumerate() {
            let sa = ordering.slot(na);
            sys.add_rhs(sa, &c.gradient(a));
            for (b, &nb) in nodes.iter().enumerate() {
                let sb = ordering.slot(nb);
                if sb > sa || (sb == sa && b < a) {
                    continue;
                }
                sys.add_block(sa, sb, &c.hessian(a, b));
            }
        }
    }
    Ok(cost)
}

/// `Σ eᵀWe` without Jacobians.
pub fn evaluate_cost(
    factors: &FactorSet,
    grid: &Grid,
    params: &PriorParams,
    whiteners: &[Mat24],
) -> Result<f64, SolverError> {
    let prior: Result<Vec<f64>, SolverError> = factors
        .prior
        .par_iter()
        .zip(whiteners.par_iter())
        .enumerate()
        .map(|(i, (f, w))| {
            let states: Vec<&NodeState> = f.nodes().iter().map(|&n| &grid.states[n]).collect();
            let e = f.error(&states, params).map_err(|source| SolverError::Factor { factor: i, source })?;
            Ok((w * e).norm_squared())
        })
        .collect();
    let meas: Result<Vec<f64>, SolverError> = factors
        .measurements
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let states: Vec<&NodeState> = m.nodes().iter().map(|&n| &grid.states[n]).collect();
            let e = m.error(&states).map_err(|source| SolverError::Measurement { index: i, source })?;
            Ok((m.whitener() * e).norm_squared())
        })
        .collect();
    Ok(prior?.iter().chain(meas?.iter()).sum())
}

/// Solves the system and returns the per-node increments.
pub fn solve_block_banded(system: &BlockBandedSystem) -> Result<Vec<Vec24>, SolverError> {
    let chol = system.factorize()?;
    Ok(split_blocks(&chol.solve(system.rhs())))
}

fn split_blocks(x: &[f64]) -> Vec<Vec24> {
    x.chunks_exact(BLOCK).map(Vec24::from_column_slice).collect()
}

fn retract_grid(grid: &Grid, delta: &[Vec24], scale: f64) -> Grid {
    let mut out = grid.clone();
    for (x, d) in out.states.iter_mut().zip(delta) {
        *x = x.retract(&(d * scale));
    }
    out
}

/// Cell `(n, k)` covers nodes `n..=n+1` × `k..=k+1`, clipped to the grid.
pub fn cell_nodes(grid: &Grid, n: usize, k: usize) -> Vec<usize> {
    let mut nodes = Vec::with_capacity(4);
    for kk in k..=(k + 1).min(grid.n_time() - 1) {
        for nn in n..=(n + 1).min(grid.n_space() - 1) {
            nodes.push(grid.index(nn, kk));
        }
    }
    nodes
}

/// Per-node marginals and per-cell corner joints from a factorization.
pub fn corner_covariances(chol: &BandCholesky, grid: &Grid, ordering: &NodeOrdering) -> (Vec<Mat24>, Vec<CellJoint>) {
    let inv = chol.selected_inverse();
    let marginals = (0..grid.len()).map(|i| inv.block(ordering.slot(i), ordering.slot(i))).collect();
    let cols = grid.n_space().saturating_sub(1).max(1);
    let rows = grid.n_time().saturating_sub(1).max(1);
    let mut cells = Vec::with_capacity(cols * rows);
    for k in 0..rows {
        for n in 0..cols {
            let nodes = cell_nodes(grid, n, k);
            let slots: Vec<usize> = nodes.iter().map(|&i| ordering.slot(i)).collect();
            let mut cov = inv.joint(&slots);
            cov = (&cov + cov.transpose()) * 0.5;
            cells.push(CellJoint { nodes, cov });
        }
    }
    (marginals, cells)
}

fn inf_norm(delta: &[Vec24]) -> f64 {
    delta.iter().map(|d| d.amax()).fold(0.0, f64::max)
}

/// Gauss-Newton with step halving. Returns the posterior even when the
/// iteration budget runs out; `report.converged` says which.
pub fn gauss_newton(
    grid: Grid,
    factors: &FactorSet,
    params: &PriorParams,
    opts: &SolverOptions,
) -> Result<Posterior, SolverError> {
    let start = Instant::now();
    let whiteners = prior_whiteners(factors, params)?;
    let ordering = NodeOrdering::narrowest(&grid);
    let mut grid = grid;
    let mut report = SolveReport::default();
    let mut last_chol: Option<BandCholesky> = None;
    let bandwidth = system_bandwidth(factors, &ordering);
    let mut cost = f64::NAN;
    for iter in 0..opts.max_iters.max(1) {
        let t0 = Instant::now();
        let mut sys = match last_chol.take() {
            Some(chol) => chol.into_system(),
            None => BlockBandedSystem::new(grid.len(), bandwidth),
        };
        let c = linearize_into(factors, &grid, params, &whiteners, &ordering, &mut sys)?;
        report.linearize_seconds += t0.elapsed().as_secs_f64();
        if iter == 0 {
            report.cost_trace.push(c);
        }
        cost = c;
        let t1 = Instant::now();
        let (chol, rhs) = sys.into_cholesky()?;
        let by_slot = split_blocks(&chol.solve(&rhs));
        let delta: Vec<Vec24> = (0..grid.len()).map(|i| by_slot[ordering.slot(i)]).collect();
        report.factorize_seconds += t1.elapsed().as_secs_f64();
        report.touched_blocks = chol.touched_blocks();
        last_chol = Some(chol);
        let norm = inf_norm(&delta);
        report.update_norms.push(norm);
        report.iterations = iter + 1;
        if !norm.is_finite() {
            return Err(SolverError::Divergence { iteration: iter, trace: report.cost_trace });
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = retract_grid(&grid, &delta, scale);
            match evaluate_cost(factors, &cand, params, &whiteners) {
                Ok(cc) if cc.is_finite() && cc <= cost * (1.0 + 1e-12) + 1e-300 => {
                    accepted = Some((cand, cc));
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        let Some((cand, cc)) = accepted else {
            if norm < opts.tol {
                report.converged = true;
                break;
            }
            return Err(SolverError::Divergence { iteration: iter, trace: report.cost_trace });
        };
        grid = cand;
        cost = cc;
        report.cost_trace.push(cc);
        report.step_scales.push(scale);
        if norm < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.final_cost = cost;
    let (marginals, cells) = match (&last_chol, opts.compute_covariance) {
        (Some(chol), true) => {
            let t = Instant::now();
            let out = corner_covariances(chol, &grid, &ordering);
            report.covariance_seconds = t.elapsed().as_secs_f64();
            out
        }
        _ => (Vec::new(), Vec::new()),
    };
    report.total_seconds = start.elapsed().as_secs_f64();
    Ok(Posterior { grid, params: params.clone(), marginals, cells, report })
}
