//! Posterior interpolation at arbitrary `(s, t)` inside the grid hull.
//!
//! Interpolation runs in two 1D stages. Each column of the enclosing cell is
//! first interpolated in time, in a chart based at that column's earlier
//! node; the spatial stage then interpolates between the two column results
//! in a chart based at the lower-arclength one. On knot lines the far
//! weights vanish, so stencils shrink to two nodes on an edge and to one at a
//! node.

use nalgebra::{DMatrix, Matrix2, Matrix6, SMatrix};

use crate::error::{PriorError, QueryError};
use crate::graph::Grid;
use crate::prior::{
    add_base_columns, decode_linearized, encode_linearized, k_matrix_unchecked, kron3, self_chart,
    self_selector, transition_2x2, Axis, Mat24, NodeState, PriorParams,
};
use crate::solver::Posterior;

/// Relative distance below which a coordinate snaps onto a knot.
pub const KNOT_SNAP: f64 = 1e-12;

pub type Mat24x96 = SMatrix<f64, 24, 96>;

/// Interval length and offset of one interpolation stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub delta: f64,
    pub offset: f64,
}

/// Which nodes a point depends on and how.
///
/// `nodes` are ordered `[x00, x10, x01, x11]` (spatial, temporal) when both
/// stages are present, `[lower, upper]` for a single stage and `[node]` at a
/// knot intersection.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    pub nodes: Vec<usize>,
    pub space: Option<Span>,
    pub time: Option<Span>,
    /// Cell `(n, k)` whose corner joint covers every node in `nodes`.
    pub cell: (usize, usize),
}

enum AxisPos {
    Knot(usize),
    Between(usize, Span),
}

fn locate_axis(knots: &[f64], x: f64) -> Option<AxisPos> {
    let tol = |v: f64| KNOT_SNAP * v.abs().max(1.0);
    if !x.is_finite() {
        return None;
    }
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x < first - tol(first) || x > last + tol(last) {
        return None;
    }
    // first knot strictly greater than x
    let upper = knots.partition_point(|&k| k <= x);
    for j in [upper.saturating_sub(1), upper.min(knots.len() - 1)] {
        if (knots[j] - x).abs() <= tol(knots[j]) {
            return Some(AxisPos::Knot(j));
        }
    }
    let n = upper - 1;
    Some(AxisPos::Between(n, Span { delta: knots[n + 1] - knots[n], offset: x - knots[n] }))
}

fn cell_of(pos: &AxisPos, count: usize) -> usize {
    match pos {
        AxisPos::Knot(j) => (*j).min(count.saturating_sub(2)),
        AxisPos::Between(n, _) => *n,
    }
}

pub fn locate(grid: &Grid, s: f64, t: f64) -> Result<Stencil, QueryError> {
    let out = || QueryError::OutOfHull { s, t };
    let sp = locate_axis(grid.s_knots(), s).ok_or_else(out)?;
    let tp = locate_axis(grid.t_knots(), t).ok_or_else(out)?;
    let cell = (cell_of(&sp, grid.n_space()), cell_of(&tp, grid.n_time()));
    let stencil = match (sp, tp) {
        (AxisPos::Knot(n), AxisPos::Knot(k)) => Stencil { nodes: vec![grid.index(n, k)], space: None, time: None, cell },
        (AxisPos::Knot(n), AxisPos::Between(k, span)) => Stencil {
            nodes: vec![grid.index(n, k), grid.index(n, k + 1)],
            space: None,
            time: Some(span),
            cell,
        },
        (AxisPos::Between(n, span), AxisPos::Knot(k)) => Stencil {
            nodes: vec![grid.index(n, k), grid.index(n + 1, k)],
            space: Some(span),
            time: None,
            cell,
        },
        (AxisPos::Between(n, ss), AxisPos::Between(k, ts)) => Stencil {
            nodes: vec![grid.index(n, k), grid.index(n + 1, k), grid.index(n, k + 1), grid.index(n + 1, k + 1)],
            space: Some(ss),
            time: Some(ts),
            cell,
        },
    };
    Ok(stencil)
}

/// 2×2 stage weights `(near, far, residual)` for offset `u` in an interval
/// `Δ`: `far = K(u)·M(Δ−u)ᵀ·K(Δ)⁻¹`, `near = M(u) − far·M(Δ)` and
/// `residual = K(u) − far·K(Δ)·farᵀ`.
pub(crate) fn stage_weights(span: Span) -> (Matrix2<f64>, Matrix2<f64>, Matrix2<f64>) {
    let Span { delta, offset: u } = span;
    if u <= 0.0 {
        return (Matrix2::identity(), Matrix2::zeros(), Matrix2::zeros());
    }
    if u >= delta {
        return (Matrix2::zeros(), Matrix2::identity(), Matrix2::zeros());
    }
    let d2 = delta * delta;
    let k_inv = Matrix2::new(delta, -d2 / 2.0, -d2 / 2.0, d2 * delta / 3.0) * (12.0 / (d2 * d2));
    let ku = k_matrix_unchecked(u);
    let far = ku * transition_2x2(delta - u).transpose() * k_inv;
    let near = transition_2x2(u) - far * transition_2x2(delta);
    let mut res = ku - far * k_matrix_unchecked(delta) * far.transpose();
    res = (res + res.transpose()) * 0.5;
    (near, far, res)
}

/// Lifts stage weights to 24×24 `(near, far, residual)` along `axis`.
fn stage_matrices(axis: Axis, span: Span, params: &PriorParams) -> (Mat24, Mat24, Mat24) {
    let (near, far, res) = stage_weights(span);
    let i2 = Matrix2::identity();
    let i6 = Matrix6::identity();
    match axis {
        Axis::Time => (kron3(&near, &i2, &i6), kron3(&far, &i2, &i6), kron3(&res, &i2, &params.qt_psd)),
        Axis::Space => (kron3(&i2, &near, &i6), kron3(&i2, &far, &i6), kron3(&i2, &res, &params.qs_psd)),
    }
}

fn check_span(span: Span) -> bool {
    span.delta > 0.0 && span.delta.is_finite() && span.offset >= 0.0 && span.offset <= span.delta
}

/// Linear interpolation map: corner chart weights (24×96, corner order
/// `[x00, x10, x01, x11]`) and the conditional residual covariance.
pub struct InterpWeights {
    pub w: Mat24x96,
    pub residual: Mat24,
}

pub fn interp_weights(
    ds: f64,
    dt: f64,
    sigma: f64,
    tau: f64,
    params: &PriorParams,
) -> Result<InterpWeights, QueryError> {
    let ss = Span { delta: ds, offset: sigma };
    let ts = Span { delta: dt, offset: tau };
    if !check_span(ss) || !check_span(ts) {
        return Err(QueryError::OffsetOutOfRange { sigma, tau });
    }
    let (ln_t, lf_t, r_t) = stage_matrices(Axis::Time, ts, params);
    let (ln_s, lf_s, r_s) = stage_matrices(Axis::Space, ss, params);
    let mut w = Mat24x96::zeros();
    for (c, m) in [ln_s * ln_t, lf_s * ln_t, ln_s * lf_t, lf_s * lf_t].iter().enumerate() {
        w.fixed_view_mut::<24, 24>(0, 24 * c).copy_from(m);
    }
    let residual = ln_s * r_t * ln_s.transpose() + lf_s * r_t * lf_s.transpose() + r_s;
    Ok(InterpWeights { w, residual: (residual + residual.transpose()) * 0.5 })
}

/// Per-node linear weights of a stencil plus the residual covariance.
pub fn stencil_weights(stencil: &Stencil, params: &PriorParams) -> (Vec<Mat24>, Mat24) {
    match (stencil.space, stencil.time) {
        (None, None) => (vec![Mat24::identity()], Mat24::zeros()),
        (None, Some(span)) => {
            let (n, f, r) = stage_matrices(Axis::Time, span, params);
            (vec![n, f], r)
        }
        (Some(span), None) => {
            let (n, f, r) = stage_matrices(Axis::Space, span, params);
            (vec![n, f], r)
        }
        (Some(ss), Some(ts)) => {
            let (ln_t, lf_t, r_t) = stage_matrices(Axis::Time, ts, params);
            let (ln_s, lf_s, r_s) = stage_matrices(Axis::Space, ss, params);
            let r = ln_s * r_t * ln_s.transpose() + lf_s * r_t * lf_s.transpose() + r_s;
            (vec![ln_s * ln_t, lf_s * ln_t, ln_s * lf_t, lf_s * lf_t], (r + r.transpose()) * 0.5)
        }
    }
}

/// An interpolated state and its derivatives with respect to left
/// perturbations of the stencil nodes, in stencil order.
#[derive(Clone, Debug)]
pub struct Interpolated {
    pub state: NodeState,
    pub jacobians: Vec<Mat24>,
}

struct Stage {
    x: NodeState,
    d_lo: Mat24,
    d_hi: Mat24,
}

fn interp_stage(axis: Axis, lo: &NodeState, hi: &NodeState, span: Span) -> Result<Stage, PriorError> {
    if span.offset <= 0.0 {
        return Ok(Stage { x: *lo, d_lo: Mat24::identity(), d_hi: Mat24::zeros() });
    }
    if span.offset >= span.delta {
        return Ok(Stage { x: *hi, d_lo: Mat24::zeros(), d_hi: Mat24::identity() });
    }
    let (near, far, _) = stage_weights(span);
    let i2 = Matrix2::identity();
    let i6 = Matrix6::identity();
    let (near, far) = match axis {
        Axis::Time => (kron3(&near, &i2, &i6), kron3(&far, &i2, &i6)),
        Axis::Space => (kron3(&i2, &near, &i6), kron3(&i2, &far, &i6)),
    };
    let base = &lo.pose;
    let enc = encode_linearized(hi, base)?;
    let z = near * self_chart(lo) + far * enc.z;
    let dec = decode_linearized(&z, base)?;
    let d_hi = dec.d_chart * far * enc.d_state;
    let mut inner = near * self_selector();
    add_base_columns(&mut inner, &(far * enc.d_base));
    let mut d_lo = dec.d_chart * inner;
    add_base_columns(&mut d_lo, &dec.d_base);
    Ok(Stage { x: dec.x, d_lo, d_hi })
}

/// Evaluates the stencil on `states` (same order as `stencil.nodes`).
pub fn interpolate(stencil: &Stencil, states: &[&NodeState]) -> Result<Interpolated, PriorError> {
    match (stencil.space, stencil.time) {
        (None, None) => Ok(Interpolated { state: *states[0], jacobians: vec![Mat24::identity()] }),
        (None, Some(span)) => {
            let st = interp_stage(Axis::Time, states[0], states[1], span)?;
            Ok(Interpolated { state: st.x, jacobians: vec![st.d_lo, st.d_hi] })
        }
        (Some(span), None) => {
            let st = interp_stage(Axis::Space, states[0], states[1], span)?;
            Ok(Interpolated { state: st.x, jacobians: vec![st.d_lo, st.d_hi] })
        }
        (Some(ss), Some(ts)) => {
            let c0 = interp_stage(Axis::Time, states[0], states[2], ts)?;
            let c1 = interp_stage(Axis::Time, states[1], states[3], ts)?;
            let sp = interp_stage(Axis::Space, &c0.x, &c1.x, ss)?;
            Ok(Interpolated {
                state: sp.x,
                jacobians: vec![sp.d_lo * c0.d_lo, sp.d_hi * c1.d_lo, sp.d_lo * c0.d_hi, sp.d_hi * c1.d_hi],
            })
        }
    }
}

pub fn query_mean(posterior: &Posterior, s: f64, t: f64) -> Result<NodeState, QueryError> {
    let stencil = locate(&posterior.grid, s, t)?;
    let states: Vec<&NodeState> = stencil.nodes.iter().map(|&i| &posterior.grid.states[i]).collect();
    Ok(interpolate(&stencil, &states)?.state)
}

/// Mean and covariance at `(s, t)`, touching only the enclosing cell.
pub fn query(posterior: &Posterior, s: f64, t: f64) -> Result<(NodeState, Mat24), QueryError> {
    let stencil = locate(&posterior.grid, s, t)?;
    let joint = posterior.cell_joint(stencil.cell).ok_or(QueryError::MissingCovariance)?;
    let states: Vec<&NodeState> = stencil.nodes.iter().map(|&i| &posterior.grid.states[i]).collect();
    let interp = interpolate(&stencil, &states)?;
    let (_, residual) = stencil_weights(&stencil, &posterior.params);
    let slots: Vec<usize> = stencil
        .nodes
        .iter()
        .map(|i| joint.nodes.iter().position(|j| j == i).expect("stencil node outside its cell"))
        .collect();
    let mut cov = residual;
    for (a, ja) in interp.jacobians.iter().enumerate() {
        for (b, jb) in interp.jacobians.iter().enumerate() {
            let block = joint.cov.fixed_view::<24, 24>(24 * slots[a], 24 * slots[b]);
            cov += ja * block * jb.transpose();
        }
    }
    Ok((interp.state, (cov + cov.transpose()) * 0.5))
}

pub fn query_covariance(posterior: &Posterior, s: f64, t: f64) -> Result<Mat24, QueryError> {
    query(posterior, s, t).map(|(_, c)| c)
}

/// Dense copy of a stencil's stacked weights (24 × 24·nodes).
pub fn stacked_weights(weights: &[Mat24]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(24, 24 * weights.len());
    for (i, w) in weights.iter().enumerate() {
        out.view_mut((0, 24 * i), (24, 24)).copy_from(w);
    }
    out
}
