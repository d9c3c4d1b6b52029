//! Knot grid, prior factor set and the block sparsity of the prior precision.

use std::collections::BTreeSet;

use crate::error::GridError;
use crate::prior::{
    chart_decode, chart_encode, phi_cell, phi_s, phi_t, self_chart, NodeState, PriorFactor, PriorParams,
};
use crate::sensors::MeasurementFactor;

/// `N` arclength knots × `K` time knots. Node `(n, k)` is stored at
/// flattened index `k·N + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    s_knots: Vec<f64>,
    t_knots: Vec<f64>,
    pub states: Vec<NodeState>,
}

/// How [`build_grid`] fills in the initial node states.
pub enum GridInit<'a> {
    /// Noise-free propagation of the prior from its initial condition.
    PriorMean(&'a PriorParams),
    Constant(NodeState),
    /// Arbitrary `(s, t) → state`, e.g. simulator ground truth.
    Field(&'a dyn Fn(f64, f64) -> NodeState),
}

fn check_knots(knots: &[f64], axis: &'static str) -> Result<(), GridError> {
    let ok = !knots.is_empty()
        && knots.iter().all(|v| v.is_finite())
        && knots.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(GridError::BadKnots { axis })
    }
}

pub fn build_grid(s_knots: &[f64], t_knots: &[f64], init: GridInit<'_>) -> Result<Grid, GridError> {
    check_knots(s_knots, "arclength")?;
    check_knots(t_knots, "time")?;
    let states = match &init {
        GridInit::PriorMean(params) => prior_mean_states(s_knots, t_knots, params)?,
        GridInit::Constant(x) => vec![*x; s_knots.len() * t_knots.len()],
        GridInit::Field(f) => t_knots.iter().flat_map(|&t| s_knots.iter().map(move |&s| f(s, t))).collect(),
    };
    Ok(Grid { s_knots: s_knots.to_vec(), t_knots: t_knots.to_vec(), states })
}

/// Noise-free propagation of the prior: every prior factor error is zero.
/// Row 0 and column 0 follow the binary chains; interior nodes solve the
/// cell relation in the chart of their lower corner.
pub fn prior_mean_states(s_knots: &[f64], t_knots: &[f64], params: &PriorParams) -> Result<Vec<NodeState>, GridError> {
    let (n_s, n_t) = (s_knots.len(), t_knots.len());
    let mut x: Vec<NodeState> = Vec::with_capacity(n_s * n_t);
    for k in 0..n_t {
        for n in 0..n_s {
            let state = match (n, k) {
                (0, 0) => params.prior_mean,
                (_, 0) => {
                    let a = &x[n - 1];
                    chart_decode(&(phi_s(s_knots[n] - s_knots[n - 1])? * self_chart(a)), &a.pose)?
                }
                (0, _) => {
                    let a = &x[(k - 1) * n_s];
                    chart_decode(&(phi_t(t_knots[k] - t_knots[k - 1])? * self_chart(a)), &a.pose)?
                }
                _ => {
                    let ds = s_knots[n] - s_knots[n - 1];
                    let dt = t_knots[k] - t_knots[k - 1];
                    let x00 = &x[(k - 1) * n_s + n - 1];
                    let base = &x00.pose;
                    let z10 = chart_encode(&x[(k - 1) * n_s + n], base)?;
                    let z01 = chart_encode(&x[k * n_s + n - 1], base)?;
                    let z11 = phi_s(ds)? * z01 + phi_t(dt)? * z10 - phi_cell(ds, dt)? * self_chart(x00);
                    chart_decode(&z11, base)?
                }
            };
            x.push(state);
        }
    }
    Ok(x)
}

impl Grid {
    pub fn from_states(s_knots: &[f64], t_knots: &[f64], states: Vec<NodeState>) -> Result<Grid, GridError> {
        check_knots(s_knots, "arclength")?;
        check_knots(t_knots, "time")?;
        let expected = s_knots.len() * t_knots.len();
        if states.len() != expected {
            return Err(GridError::StateCount { got: states.len(), expected });
        }
        Ok(Grid { s_knots: s_knots.to_vec(), t_knots: t_knots.to_vec(), states })
    }

    pub fn s_knots(&self) -> &[f64] {
        &self.s_knots
    }

    pub fn t_knots(&self) -> &[f64] {
        &self.t_knots
    }

    pub fn n_space(&self) -> usize {
        self.s_knots.len()
    }

    pub fn n_time(&self) -> usize {
        self.t_knots.len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index(&self, n: usize, k: usize) -> usize {
        k * self.n_space() + n
    }

    /// Inverse of [`Grid::index`]: `(n, k)`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.n_space(), i / self.n_space())
    }

    pub fn state(&self, n: usize, k: usize) -> &NodeState {
        &self.states[self.index(n, k)]
    }

    /// Number of stored neighbors behind a node in flattened order.
    pub fn block_bandwidth(&self) -> usize {
        match (self.n_space(), self.n_time()) {
            (_, 1) => 1.min(self.n_space() - 1),
            (n, _) => n + 1 - usize::from(n == 1),
        }
    }
}

/// Prior and measurement factors over one grid.
#[derive(Clone, Debug, Default)]
pub struct FactorSet {
    pub prior: Vec<PriorFactor>,
    pub measurements: Vec<MeasurementFactor>,
}

impl FactorSet {
    pub fn count_prior(&self) -> usize {
        self.prior.len()
    }
}

/// One unary factor at the initial node, spatial binaries along the first
/// time row, temporal binaries along the first arclength column and a
/// quaternary factor on every cell.
pub fn build_prior_factors(grid: &Grid, _params: &PriorParams) -> FactorSet {
    let (n_s, n_t) = (grid.n_space(), grid.n_time());
    let s = grid.s_knots();
    let t = grid.t_knots();
    let mut prior = Vec::with_capacity(n_s * n_t);
    prior.push(PriorFactor::Unary { node: grid.index(0, 0) });
    for n in 1..n_s {
        prior.push(PriorFactor::BinarySpatial {
            from: grid.index(n - 1, 0),
            to: grid.index(n, 0),
            ds: s[n] - s[n - 1],
        });
    }
    for k in 1..n_t {
        prior.push(PriorFactor::BinaryTemporal {
            from: grid.index(0, k - 1),
            to: grid.index(0, k),
            dt: t[k] - t[k - 1],
        });
    }
    for k in 1..n_t {
        for n in 1..n_s {
            prior.push(PriorFactor::Quaternary {
                corners: [
                    grid.index(n - 1, k - 1),
                    grid.index(n, k - 1),
                    grid.index(n - 1, k),
                    grid.index(n, k),
                ],
                ds: s[n] - s[n - 1],
                dt: t[k] - t[k - 1],
            });
        }
    }
    FactorSet { prior, measurements: Vec::new() }
}

/// Lower-triangular set of nonzero 24×24 blocks `(row, col)`, `row ≥ col`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPattern {
    pub n_nodes: usize,
    pub blocks: BTreeSet<(usize, usize)>,
}

impl BlockPattern {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.blocks.contains(&(i.max(j), i.min(j)))
    }

    /// Largest `row − col` over stored blocks.
    pub fn bandwidth(&self) -> usize {
        self.blocks.iter().map(|(i, j)| i - j).max().unwrap_or(0)
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes).filter(|&j| self.contains(i, j)).collect()
    }
}

pub fn precision_pattern(factors: &FactorSet, grid: &Grid) -> BlockPattern {
    let mut blocks = BTreeSet::new();
    let node_lists = factors
        .prior
        .iter()
        .map(|f| f.nodes())
        .chain(factors.measurements.iter().map(|m| m.nodes().to_vec()));
    for nodes in node_lists {
        for &a in &nodes {
            for &b in &nodes {
                if a >= b {
                    blocks.insert((a, b));
                }
            }
        }
    }
    BlockPattern { n_nodes: grid.len(), blocks }
}
