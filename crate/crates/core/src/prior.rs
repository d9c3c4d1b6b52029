//! Space-time GP prior: transition functions, noise covariances, local charts
//! and the unary/binary/quaternary prior error terms.
//!
//! A chart state stacks four 6-blocks `(ξ, ε̃, ϖ̃, ψ̃)`. Block `(a, b)` sits at
//! position `2a + b`, with `a` the temporal derivative order and `b` the
//! spatial one, so every transition and covariance is a Kronecker product
//! `temporal ⊗ spatial ⊗ I₆`.

use nalgebra::{Matrix2, Matrix6, SMatrix, SVector, SymmetricEigen};
use std::f64::consts::PI;

use crate::error::PriorError;
use crate::liegroup::{
    adjoint, left_jacobian, left_jacobian_apply_derivative, left_jacobian_inv_apply_derivative,
    left_jacobian_inv_unchecked, Pose, Twist,
};

pub type Mat24 = SMatrix<f64, 24, 24>;
pub type Vec24 = SVector<f64, 24>;
pub type Mat24x6 = SMatrix<f64, 24, 6>;
pub type ChartState = Vec24;

/// Charts are only used while the relative rotation stays below this angle.
pub const CHART_LIMIT: f64 = 0.9 * PI;

/// Per-node estimate: pose plus left-convention strain, velocity and
/// strain-velocity twists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeState {
    pub pose: Pose,
    pub strain: Twist,
    pub velocity: Twist,
    pub strain_velocity: Twist,
}

impl NodeState {
    pub fn new(pose: Pose, strain: Twist, velocity: Twist, strain_velocity: Twist) -> Self {
        NodeState { pose, strain, velocity, strain_velocity }
    }

    pub fn at_rest(pose: Pose) -> Self {
        NodeState::new(pose, Twist::zeros(), Twist::zeros(), Twist::zeros())
    }

    /// Applies a left increment: `T ← exp(δξ)·T`, additive on the twists.
    pub fn retract(&self, delta: &Vec24) -> NodeState {
        let dxi: Twist = delta.fixed_rows::<6>(0).into_owned();
        NodeState {
            pose: Pose::exp(&dxi) * self.pose,
            strain: self.strain + delta.fixed_rows::<6>(6),
            velocity: self.velocity + delta.fixed_rows::<6>(12),
            strain_velocity: self.strain_velocity + delta.fixed_rows::<6>(18),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.is_finite()
            && self
                .strain
                .iter()
                .chain(self.velocity.iter())
                .chain(self.strain_velocity.iter())
                .all(|v| v.is_finite())
    }

    fn derivatives(&self) -> [Twist; 3] {
        [self.strain, self.velocity, self.strain_velocity]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorParams {
    /// Spatial-chain noise power density (per meter).
    pub qs_psd: Matrix6<f64>,
    /// Temporal-chain noise power density (per second).
    pub qt_psd: Matrix6<f64>,
    /// Cell noise power density (per meter-second).
    pub qst_psd: Matrix6<f64>,
    /// Initial-condition covariance.
    pub p0: Mat24,
    pub prior_mean: NodeState,
}

impl PriorParams {
    pub fn validate(&self) -> Result<(), PriorError> {
        for (name, m) in [("qs_psd", &self.qs_psd), ("qt_psd", &self.qt_psd), ("qst_psd", &self.qst_psd)] {
            check_psd(name, m.as_slice(), 6, false)?;
        }
        check_psd("p0", self.p0.as_slice(), 24, true)?;
        if !self.prior_mean.is_finite() {
            return Err(PriorError::InvalidParams("prior mean is not finite".into()));
        }
        Ok(())
    }
}

fn check_psd(name: &str, data: &[f64], n: usize, strict: bool) -> Result<(), PriorError> {
    let m = nalgebra::DMatrix::from_column_slice(n, n, data);
    if !m.iter().all(|v| v.is_finite()) {
        return Err(PriorError::InvalidParams(format!("{name} is not finite")));
    }
    if (&m - m.transpose()).amax() > 1e-12 {
        return Err(PriorError::InvalidParams(format!("{name} is not symmetric")));
    }
    let min_eig = SymmetricEigen::new(m).eigenvalues.min();
    if min_eig < -1e-10 || (strict && min_eig <= 0.0) {
        return Err(PriorError::InvalidParams(format!(
            "{name} has eigenvalue {min_eig:e}; must be {}",
            if strict { "positive definite" } else { "positive semidefinite" }
        )));
    }
    Ok(())
}

fn check_nonneg(delta: f64) -> Result<(), PriorError> {
    if delta >= 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(PriorError::NegativeInterval(delta))
    }
}

fn check_positive(delta: f64) -> Result<(), PriorError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(PriorError::DegenerateInterval(delta))
    }
}

/// `[[1, Δ], [0, 1]]`
pub(crate) fn transition_2x2(delta: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, delta, 0.0, 1.0)
}

pub(crate) fn k_matrix_unchecked(delta: f64) -> Matrix2<f64> {
    let d2 = delta * delta;
    Matrix2::new(d2 * delta / 3.0, d2 / 2.0, d2 / 2.0, delta)
}

/// Covariance of the (value, slope) pair driven by unit white noise on the
/// slope's derivative over an interval `Δ`: `[[Δ³/3, Δ²/2], [Δ²/2, Δ]]`.
pub fn k_matrix(delta: f64) -> Result<Matrix2<f64>, PriorError> {
    check_nonneg(delta)?;
    Ok(k_matrix_unchecked(delta))
}

/// `temporal ⊗ spatial ⊗ inner` in chart ordering.
pub(crate) fn kron3(temporal: &Matrix2<f64>, spatial: &Matrix2<f64>, inner: &Matrix6<f64>) -> Mat24 {
    let mut out = Mat24::zeros();
    for a in 0..2 {
        for a2 in 0..2 {
            for b in 0..2 {
                for b2 in 0..2 {
                    let w = temporal[(a, a2)] * spatial[(b, b2)];
                    if w != 0.0 {
                        out.fixed_view_mut::<6, 6>((2 * a + b) * 6, (2 * a2 + b2) * 6)
                            .copy_from(&(inner * w));
                    }
                }
            }
        }
    }
    out
}

pub fn phi_s(ds: f64) -> Result<Mat24, PriorError> {
    check_nonneg(ds)?;
    Ok(kron3(&Matrix2::identity(), &transition_2x2(ds), &Matrix6::identity()))
}

pub fn phi_t(dt: f64) -> Result<Mat24, PriorError> {
    check_nonneg(dt)?;
    Ok(kron3(&transition_2x2(dt), &Matrix2::identity(), &Matrix6::identity()))
}

pub fn phi_cell(ds: f64, dt: f64) -> Result<Mat24, PriorError> {
    check_nonneg(ds)?;
    check_nonneg(dt)?;
    Ok(kron3(&transition_2x2(dt), &transition_2x2(ds), &Matrix6::identity()))
}

pub fn q_binary_s(ds: f64, params: &PriorParams) -> Result<Mat24, PriorError> {
    check_positive(ds)?;
    Ok(kron3(&Matrix2::identity(), &k_matrix_unchecked(ds), &params.qs_psd))
}

pub fn q_binary_t(dt: f64, params: &PriorParams) -> Result<Mat24, PriorError> {
    check_positive(dt)?;
    Ok(kron3(&k_matrix_unchecked(dt), &Matrix2::identity(), &params.qt_psd))
}

pub fn q_quaternary(ds: f64, dt: f64, params: &PriorParams) -> Result<Mat24, PriorError> {
    check_positive(ds)?;
    check_positive(dt)?;
    Ok(kron3(&k_matrix_unchecked(dt), &k_matrix_unchecked(ds), &params.qst_psd))
}

/// Which chain a binary factor or interpolation stage runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Space,
    Time,
}

impl Axis {
    pub(crate) fn phi(self, delta: f64) -> Mat24 {
        match self {
            Axis::Space => kron3(&Matrix2::identity(), &transition_2x2(delta), &Matrix6::identity()),
            Axis::Time => kron3(&transition_2x2(delta), &Matrix2::identity(), &Matrix6::identity()),
        }
    }
}

fn chart_point(pose: &Pose, base: &Pose) -> Result<Twist, PriorError> {
    let xi = (*pose * base.inverse()).log();
    let angle = xi.fixed_rows::<3>(3).norm();
    if !(angle < CHART_LIMIT) {
        return Err(PriorError::ChartRange { angle, limit: CHART_LIMIT });
    }
    Ok(xi)
}

/// `ξ = log(T·base⁻¹)`, derivatives transported by `J_l⁻¹(ξ)`.
pub fn chart_encode(x: &NodeState, base: &Pose) -> Result<ChartState, PriorError> {
    let xi = chart_point(&x.pose, base)?;
    let g = left_jacobian_inv_unchecked(&xi);
    let mut z = ChartState::zeros();
    z.fixed_rows_mut::<6>(0).copy_from(&xi);
    for (i, v) in x.derivatives().iter().enumerate() {
        z.fixed_rows_mut::<6>(6 * (i + 1)).copy_from(&(g * v));
    }
    Ok(z)
}

pub fn chart_decode(z: &ChartState, base: &Pose) -> Result<NodeState, PriorError> {
    let xi: Twist = z.fixed_rows::<6>(0).into_owned();
    let angle = xi.fixed_rows::<3>(3).norm();
    if !(angle < CHART_LIMIT) {
        return Err(PriorError::ChartRange { angle, limit: CHART_LIMIT });
    }
    let j = left_jacobian(&xi);
    Ok(NodeState {
        pose: Pose::exp(&xi) * *base,
        strain: j * z.fixed_rows::<6>(6),
        velocity: j * z.fixed_rows::<6>(12),
        strain_velocity: j * z.fixed_rows::<6>(18),
    })
}

/// Chart of a node about its own pose: `(0, ε, ϖ, ψ)`.
pub(crate) fn self_chart(x: &NodeState) -> ChartState {
    let mut z = ChartState::zeros();
    for (i, v) in x.derivatives().iter().enumerate() {
        z.fixed_rows_mut::<6>(6 * (i + 1)).copy_from(v);
    }
    z
}

/// Derivative of [`self_chart`] with respect to the node's own perturbation.
pub(crate) fn self_selector() -> Mat24 {
    let mut s = Mat24::identity();
    s.fixed_view_mut::<6, 6>(0, 0).fill(0.0);
    s
}

/// An encoded chart together with its derivatives with respect to a left
/// perturbation of the state and of the base pose.
pub(crate) struct EncodeLin {
    pub z: ChartState,
    pub d_state: Mat24,
    pub d_base: Mat24x6,
}

pub(crate) fn encode_linearized(x: &NodeState, base: &Pose) -> Result<EncodeLin, PriorError> {
    let xi = chart_point(&x.pose, base)?;
    let g = left_jacobian_inv_unchecked(&xi);
    let h = g * adjoint(&Pose::exp(&xi));
    let mut z = ChartState::zeros();
    let mut d_state = Mat24::zeros();
    let mut d_base = Mat24x6::zeros();
    z.fixed_rows_mut::<6>(0).copy_from(&xi);
    d_state.fixed_view_mut::<6, 6>(0, 0).copy_from(&g);
    d_base.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-h));
    for (i, v) in x.derivatives().iter().enumerate() {
        let r = 6 * (i + 1);
        let dv = left_jacobian_inv_apply_derivative(&xi, v);
        z.fixed_rows_mut::<6>(r).copy_from(&(g * v));
        d_state.fixed_view_mut::<6, 6>(r, 0).copy_from(&(dv * g));
        d_state.fixed_view_mut::<6, 6>(r, r).copy_from(&g);
        d_base.fixed_view_mut::<6, 6>(r, 0).copy_from(&(-dv * h));
    }
    Ok(EncodeLin { z, d_state, d_base })
}

/// A decoded state with derivatives of its left perturbation with respect to
/// the chart coordinates and the base pose.
pub(crate) struct DecodeLin {
    pub x: NodeState,
    pub d_chart: Mat24,
    pub d_base: Mat24x6,
}

pub(crate) fn decode_linearized(z: &ChartState, base: &Pose) -> Result<DecodeLin, PriorError> {
    let x = chart_decode(z, base)?;
    let xi: Twist = z.fixed_rows::<6>(0).into_owned();
    let j = left_jacobian(&xi);
    let mut d_chart = Mat24::zeros();
    let mut d_base = Mat24x6::zeros();
    d_chart.fixed_view_mut::<6, 6>(0, 0).copy_from(&j);
    d_base.fixed_view_mut::<6, 6>(0, 0).copy_from(&adjoint(&Pose::exp(&xi)));
    for i in 1..4 {
        let r = 6 * i;
        let v: Twist = z.fixed_rows::<6>(r).into_owned();
        d_chart.fixed_view_mut::<6, 6>(r, 0).copy_from(&left_jacobian_apply_derivative(&xi, &v));
        d_chart.fixed_view_mut::<6, 6>(r, r).copy_from(&j);
    }
    Ok(DecodeLin { x, d_chart, d_base })
}

/// Adds a 24×6 base derivative into the pose columns of a 24×24 Jacobian.
pub(crate) fn add_base_columns(jac: &mut Mat24, d_base: &Mat24x6) {
    let mut cols = jac.fixed_view_mut::<24, 6>(0, 0);
    cols += d_base;
}

fn mean_offset(params: &PriorParams) -> ChartState {
    self_chart(&params.prior_mean)
}

pub fn error_unary(x00: &NodeState, params: &PriorParams) -> Result<Vec24, PriorError> {
    Ok(chart_encode(x00, &params.prior_mean.pose)? - mean_offset(params))
}

fn error_binary(axis: Axis, xa: &NodeState, xb: &NodeState, delta: f64) -> Result<Vec24, PriorError> {
    check_positive(delta)?;
    Ok(chart_encode(xb, &xa.pose)? - axis.phi(delta) * self_chart(xa))
}

/// Spatial chain step from `x_a` to `x_b` over `Δs`.
pub fn error_binary_spatial(
    xa: &NodeState,
    xb: &NodeState,
    ds: f64,
    _params: &PriorParams,
) -> Result<Vec24, PriorError> {
    error_binary(Axis::Space, xa, xb, ds)
}

pub fn error_binary_temporal(
    xa: &NodeState,
    xb: &NodeState,
    dt: f64,
    _params: &PriorParams,
) -> Result<Vec24, PriorError> {
    error_binary(Axis::Time, xa, xb, dt)
}

/// Cell error over corners indexed (spatial, temporal):
/// `z₁₁ − Φ_s·z₀₁ − Φ_t·z₁₀ + Φ_s Φ_t·z₀₀`, all charts about `x₀₀`.
pub fn error_quaternary(
    x00: &NodeState,
    x10: &NodeState,
    x01: &NodeState,
    x11: &NodeState,
    ds: f64,
    dt: f64,
    _params: &PriorParams,
) -> Result<Vec24, PriorError> {
    check_positive(ds)?;
    check_positive(dt)?;
    let base = &x00.pose;
    let z11 = chart_encode(x11, base)?;
    let z01 = chart_encode(x01, base)?;
    let z10 = chart_encode(x10, base)?;
    let ps = Axis::Space.phi(ds);
    let pt = Axis::Time.phi(dt);
    Ok(z11 - ps * z01 - pt * z10 + pt * ps * self_chart(x00))
}

/// A prior factor and the node indices it touches.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorFactor {
    Unary { node: usize },
    BinarySpatial { from: usize, to: usize, ds: f64 },
    BinaryTemporal { from: usize, to: usize, dt: f64 },
    /// Corners in (spatial, temporal) order: `[x00, x10, x01, x11]`.
    Quaternary { corners: [usize; 4], ds: f64, dt: f64 },
}

impl PriorFactor {
    pub fn nodes(&self) -> Vec<usize> {
        match self {
            PriorFactor::Unary { node } => vec![*node],
            PriorFactor::BinarySpatial { from, to, .. } | PriorFactor::BinaryTemporal { from, to, .. } => {
                vec![*from, *to]
            }
            PriorFactor::Quaternary { corners, .. } => corners.to_vec(),
        }
    }

    pub fn covariance(&self, params: &PriorParams) -> Result<Mat24, PriorError> {
        match self {
            PriorFactor::Unary { .. } => Ok(params.p0),
            PriorFactor::BinarySpatial { ds, .. } => q_binary_s(*ds, params),
            PriorFactor::BinaryTemporal { dt, .. } => q_binary_t(*dt, params),
            PriorFactor::Quaternary { ds, dt, .. } => q_quaternary(*ds, *dt, params),
        }
    }

    /// Error only; `states` follows the order of [`PriorFactor::nodes`].
    pub fn error(&self, states: &[&NodeState], params: &PriorParams) -> Result<Vec24, PriorError> {
        match self {
            PriorFactor::Unary { .. } => error_unary(states[0], params),
            PriorFactor::BinarySpatial { ds, .. } => error_binary(Axis::Space, states[0], states[1], *ds),
            PriorFactor::BinaryTemporal { dt, .. } => error_binary(Axis::Time, states[0], states[1], *dt),
            PriorFactor::Quaternary { ds, dt, .. } => {
                error_quaternary(states[0], states[1], states[2], states[3], *ds, *dt, params)
            }
        }
    }

    /// Error and one 24×24 Jacobian per node, with respect to left
    /// perturbations of each state.
    pub fn linearize(
        &self,
        states: &[&NodeState],
        params: &PriorParams,
    ) -> Result<(Vec24, Vec<Mat24>), PriorError> {
        match self {
            PriorFactor::Unary { .. } => {
                let enc = encode_linearized(states[0], &params.prior_mean.pose)?;
                Ok((enc.z - mean_offset(params), vec![enc.d_state]))
            }
            PriorFactor::BinarySpatial { ds, .. } => binary_linearized(Axis::Space, states[0], states[1], *ds),
            PriorFactor::BinaryTemporal { dt, .. } => binary_linearized(Axis::Time, states[0], states[1], *dt),
            PriorFactor::Quaternary { ds, dt, .. } => {
                check_positive(*ds)?;
                check_positive(*dt)?;
                let (x00, x10, x01, x11) = (states[0], states[1], states[2], states[3]);
                let base = &x00.pose;
                let e10 = encode_linearized(x10, base)?;
                let e01 = encode_linearized(x01, base)?;
                let e11 = encode_linearized(x11, base)?;
                let ps = Axis::Space.phi(*ds);
                let pt = Axis::Time.phi(*dt);
                let pc = pt * ps;
                let err = e11.z - ps * e01.z - pt * e10.z + pc * self_chart(x00);
                let mut j00 = pc * self_selector();
                add_base_columns(&mut j00, &(e11.d_base - ps * e01.d_base - pt * e10.d_base));
                let j10 = -pt * e10.d_state;
                let j01 = -ps * e01.d_state;
                Ok((err, vec![j00, j10, j01, e11.d_state]))
            }
        }
    }
}

fn binary_linearized(
    axis: Axis,
    xa: &NodeState,
    xb: &NodeState,
    delta: f64,
) -> Result<(Vec24, Vec<Mat24>), PriorError> {
    check_positive(delta)?;
    let enc = encode_linearized(xb, &xa.pose)?;
    let phi = axis.phi(delta);
    let err = enc.z - phi * self_chart(xa);
    let mut ja = -phi * self_selector();
    add_base_columns(&mut ja, &enc.d_base);
    Ok((err, vec![ja, enc.d_state]))
}

/// Default isotropic parameters, mostly for tests and examples.
pub fn isotropic_params(qs: f64, qt: f64, qst: f64, p0: f64) -> PriorParams {
    PriorParams {
        qs_psd: Matrix6::identity() * qs,
        qt_psd: Matrix6::identity() * qt,
        qst_psd: Matrix6::identity() * qst,
        p0: Mat24::identity() * p0,
        prior_mean: NodeState::at_rest(Pose::identity()),
    }
}

#[cfg(test)]
pub(crate) fn twist(v: [f64; 6]) -> Twist {
    Twist::from(v)
}
