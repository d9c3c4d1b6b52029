//! Measurement models for strain gauges, gyroscopes, pose sensors and
//! position markers, and their binding to grid nodes.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};

use crate::error::SensorError;
use crate::graph::Grid;
use crate::liegroup::{ad, adjoint, angular, hat, left_jacobian_inv_unchecked, Pose, Twist};
use crate::prior::{NodeState, PriorParams};
use crate::query::{interpolate, locate, Stencil};

#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementKind {
    /// Body-frame strain; only masked components are observed.
    Strain { value: Twist, mask: [bool; 6] },
    /// Body-frame angular rate.
    Gyro { value: Vector3<f64> },
    Pose { value: Pose },
    Position { value: Vector3<f64> },
}

impl MeasurementKind {
    pub fn dim(&self) -> usize {
        match self {
            MeasurementKind::Strain { mask, .. } => mask.iter().filter(|&&m| m).count(),
            MeasurementKind::Gyro { .. } | MeasurementKind::Position { .. } => 3,
            MeasurementKind::Pose { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MeasurementKind::Strain { .. } => "strain6",
            MeasurementKind::Gyro { .. } => "gyro3",
            MeasurementKind::Pose { .. } => "pose6",
            MeasurementKind::Position { .. } => "position3",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub s: f64,
    pub t: f64,
    /// Noise covariance of the observed components.
    pub noise_cov: DMatrix<f64>,
}

impl Measurement {
    pub fn new(kind: MeasurementKind, s: f64, t: f64, noise_cov: DMatrix<f64>) -> Self {
        Measurement { kind, s, t, noise_cov }
    }

    /// Isotropic noise with standard deviation `std` on each observed component.
    pub fn isotropic(kind: MeasurementKind, s: f64, t: f64, std: f64) -> Self {
        let m = kind.dim();
        Measurement { kind, s, t, noise_cov: DMatrix::identity(m, m) * (std * std) }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    /// Inverse Cholesky factor of the noise covariance.
    fn whitener(&self) -> Result<DMatrix<f64>, SensorError> {
        let m = self.dim();
        if m == 0 {
            return Err(SensorError::EmptyMask);
        }
        let c = &self.noise_cov;
        if c.nrows() != m || c.ncols() != m {
            return Err(SensorError::NoiseDimension { got: c.nrows(), expected: m });
        }
        if !c.iter().all(|v| v.is_finite()) || (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
            return Err(SensorError::NoiseNotPd);
        }
        let chol = c.clone().cholesky().ok_or(SensorError::NoiseNotPd)?;
        let l_inv = chol.l().solve_lower_triangular(&DMatrix::identity(m, m)).ok_or(SensorError::NoiseNotPd)?;
        if !l_inv.iter().all(|v| v.is_finite()) {
            return Err(SensorError::NoiseNotPd);
        }
        Ok(l_inv)
    }
}

/// `log(T_meas·T⁻¹)`.
pub fn error_pose_meas(x: &NodeState, t_meas: &Pose) -> Twist {
    (*t_meas * x.pose.inverse()).log()
}

pub fn error_position_meas(x: &NodeState, p_meas: &Vector3<f64>) -> Vector3<f64> {
    p_meas - x.pose.translation
}

/// `ω − Rᵀ·ω_world` with `ω_world` the angular part of the velocity.
pub fn error_gyro_meas(x: &NodeState, w_meas: &Vector3<f64>) -> Vector3<f64> {
    w_meas - x.pose.rotation.matrix().transpose() * angular(&x.velocity)
}

/// Masked `ε_meas − Ad(T)⁻¹·ε`.
pub fn error_strain_meas(x: &NodeState, e_meas: &Twist, mask: &[bool; 6]) -> Result<DVector<f64>, SensorError> {
    let full = e_meas - adjoint(&x.pose.inverse()) * x.strain;
    let picked: Vec<f64> = (0..6).filter(|&i| mask[i]).map(|i| full[i]).collect();
    if picked.is_empty() {
        return Err(SensorError::EmptyMask);
    }
    Ok(DVector::from_vec(picked))
}

/// Error and its m×24 Jacobian with respect to a left perturbation of `x`.
pub fn node_error(kind: &MeasurementKind, x: &NodeState) -> Result<(DVector<f64>, DMatrix<f64>), SensorError> {
    match kind {
        MeasurementKind::Pose { value } => {
            let e = error_pose_meas(x, value);
            let j = -left_jacobian_inv_unchecked(&-e);
            let mut jac = DMatrix::zeros(6, 24);
            jac.view_mut((0, 0), (6, 6)).copy_from(&j);
            Ok((DVector::from_column_slice(e.as_slice()), jac))
        }
        MeasurementKind::Position { value } => {
            let e = error_position_meas(x, value);
            let mut jac = DMatrix::zeros(3, 24);
            jac.view_mut((0, 0), (3, 3)).copy_from(&-Matrix3::identity());
            jac.view_mut((0, 3), (3, 3)).copy_from(&hat(&x.pose.translation));
            Ok((DVector::from_column_slice(e.as_slice()), jac))
        }
        MeasurementKind::Gyro { value } => {
            let e = error_gyro_meas(x, value);
            let rt = x.pose.rotation.matrix().transpose();
            let mut jac = DMatrix::zeros(3, 24);
            jac.view_mut((0, 3), (3, 3)).copy_from(&(-rt * hat(&angular(&x.velocity))));
            jac.view_mut((0, 15), (3, 3)).copy_from(&-rt);
            Ok((DVector::from_column_slice(e.as_slice()), jac))
        }
        MeasurementKind::Strain { value, mask } => {
            let e = error_strain_meas(x, value, mask)?;
            let ad_inv = adjoint(&x.pose.inverse());
            let d_pose: Matrix6<f64> = -ad_inv * ad(&x.strain);
            let rows: Vec<usize> = (0..6).filter(|&i| mask[i]).collect();
            let mut jac = DMatrix::zeros(rows.len(), 24);
            for (r, &i) in rows.iter().enumerate() {
                for c in 0..6 {
                    jac[(r, c)] = d_pose[(i, c)];
                    jac[(r, 6 + c)] = -ad_inv[(i, c)];
                }
            }
            Ok((e, jac))
        }
    }
}

/// A measurement attached to the nodes of its stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFactor {
    pub measurement: Measurement,
    pub stencil: Stencil,
    whitener: DMatrix<f64>,
}

impl MeasurementFactor {
    pub fn nodes(&self) -> &[usize] {
        &self.stencil.nodes
    }

    /// Inverse Cholesky factor `L⁻¹` of the noise covariance.
    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    /// Error at the interpolated state; `states` follows [`Self::nodes`].
    pub fn error(&self, states: &[&NodeState]) -> Result<DVector<f64>, SensorError> {
        let x = interpolate(&self.stencil, states)?.state;
        Ok(node_error(&self.measurement.kind, &x)?.0)
    }

    /// Error and one m×24 Jacobian per stencil node.
    pub fn linearize(&self, states: &[&NodeState]) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), SensorError> {
        let interp = interpolate(&self.stencil, states)?;
        let (e, j) = node_error(&self.measurement.kind, &interp.state)?;
        let jacs = interp
            .jacobians
            .iter()
            .map(|w| &j * DMatrix::from_column_slice(24, 24, w.as_slice()))
            .collect();
        Ok((e, jacs))
    }
}

/// Attaches a measurement to the 1, 2 or 4 nodes that determine the state
/// at its `(s, t)`.
pub fn bind_offgrid(meas: Measurement, grid: &Grid, _params: &PriorParams) -> Result<MeasurementFactor, SensorError> {
    let whitener = meas.whitener()?;
    let stencil = locate(grid, meas.s, meas.t).map_err(|_| SensorError::OutOfHull { s: meas.s, t: meas.t })?;
    Ok(MeasurementFactor { measurement: meas, stencil, whitener })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_grid, GridInit};
    use crate::liegroup::tests::random_twist;
    use crate::prior::tests::{assert_jacobian_close, fd_jacobians, nearby_state, random_state};
    use crate::prior::{isotropic_params, twist};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kind(rng: &mut impl Rng, which: usize) -> MeasurementKind {
        match which % 4 {
            0 => MeasurementKind::Strain {
                value: random_twist(rng, 1.0),
                mask: [true, rng.random(), true, rng.random(), true, true],
            },
            1 => MeasurementKind::Gyro { value: random_twist(rng, 1.0).fixed_rows::<3>(0).into_owned() },
            2 => MeasurementKind::Pose { value: Pose::exp(&random_twist(rng, 2.0)) },
            _ => MeasurementKind::Position { value: random_twist(rng, 1.0).fixed_rows::<3>(3).into_owned() },
        }
    }

    #[test]
    fn zero_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&mut rng, 2.5);
        assert!(error_pose_meas(&x, &x.pose).amax() < 1e-14);
        assert_eq!(error_position_meas(&x, &x.pose.translation), Vector3::zeros());
        let body_rate = x.pose.rotation.matrix().transpose() * angular(&x.velocity);
        assert_abs_diff_eq!(error_gyro_meas(&x, &body_rate), Vector3::zeros(), epsilon = 1e-14);
        let body_strain = adjoint(&x.pose.inverse()) * x.strain;
        assert!(error_strain_meas(&x, &body_strain, &[true; 6]).unwrap().amax() < 1e-14);
    }

    #[test]
    fn direct_error_examples() {
        let x = NodeState::at_rest(Pose::identity());
        let shifted = Pose::from_translation(Vector3::new(0.01, 0.0, 0.0));
        assert_abs_diff_eq!(error_pose_meas(&x, &shifted), twist([0.01, 0.0, 0.0, 0.0, 0.0, 0.0]), epsilon = 1e-16);
        let p = Vector3::new(0.0, 0.05, 0.0);
        assert_eq!(error_position_meas(&x, &p), p);
        let mut spin = x;
        spin.velocity = twist([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(error_gyro_meas(&spin, &Vector3::new(0.0, 0.0, 1.0)), Vector3::zeros());
        let mut bent = x;
        bent.strain = twist([1.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let meas = twist([1.1, 0.2, 0.0, 0.0, 0.0, 0.4]);
        let e = error_strain_meas(&bent, &meas, &[true, true, false, false, false, true]).unwrap();
        assert_abs_diff_eq!(e, DVector::from_vec(vec![0.1, 0.2, -0.1]), epsilon = 1e-15);
        assert_eq!(error_strain_meas(&bent, &meas, &[false; 6]), Err(SensorError::EmptyMask));
    }

    #[test]
    fn pose_error_matches_log_oracle() {
        // an independent evaluation through the homogeneous matrix logarithm series
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_state(&mut rng, 2.0);
            let delta = random_twist(&mut rng, 0.5);
            let meas = Pose::exp(&delta) * x.pose;
            assert_abs_diff_eq!(error_pose_meas(&x, &meas), delta, epsilon = 1e-10);
        }
    }

    #[test]
    fn strain_and_gyro_match_frame_transport() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let x = random_state(&mut rng, 2.5);
            // body-frame twist = Ad(T⁻¹)·ε computed from the 4×4 conjugation T⁻¹·ε^·T
            let th = x.pose.to_homogeneous();
            let th_inv = x.pose.inverse().to_homogeneous();
            let hat4 = |v: &Twist| crate::liegroup::tests::twist_hat(v);
            let body = th_inv * hat4(&x.strain) * th;
            let body_twist = twist([body[(0, 3)], body[(1, 3)], body[(2, 3)], body[(2, 1)], body[(0, 2)], body[(1, 0)]]);
            let e = error_strain_meas(&x, &body_twist, &[true; 6]).unwrap();
            assert!(e.amax() < 1e-12);
            let bv = th_inv * hat4(&x.velocity) * th;
            let e = error_gyro_meas(&x, &Vector3::new(bv[(2, 1)], bv[(0, 2)], bv[(1, 0)]));
            assert!(e.amax() < 1e-12);
        }
    }

    #[test]
    fn node_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let kind = random_kind(&mut rng, trial);
            let x = random_state(&mut rng, 2.5);
            let (_, jac) = node_error(&kind, &x).unwrap();
            let fd = fd_jacobians(&[x], kind.dim(), |s| node_error(&kind, &s[0]).unwrap().0);
            assert_jacobian_close(&jac, &fd[0]);
        }
    }

    fn test_grid(rng: &mut impl Rng) -> Grid {
        let anchor = random_state(rng, 2.0);
        let s = [0.0, 0.2, 0.5];
        let t = [0.0, 0.3, 0.7];
        let mut states = Vec::new();
        for _ in 0..9 {
            states.push(nearby_state(rng, &anchor.pose));
        }
        Grid::from_states(&s, &t, states).unwrap()
    }

    #[test]
    fn binding_degrades_on_knot_lines() {
        let p = isotropic_params(1.0, 1.0, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = test_grid(&mut rng);
        let kind = MeasurementKind::Position { value: Vector3::zeros() };
        let on_node = bind_offgrid(Measurement::isotropic(kind.clone(), 0.2, 0.3, 0.01), &g, &p).unwrap();
        assert_eq!(on_node.nodes(), &[g.index(1, 1)]);
        let x = g.state(1, 1);
        let direct = error_position_meas(x, &Vector3::zeros());
        assert_eq!(on_node.error(&[x]).unwrap().as_slice(), direct.as_slice());
        let edge = bind_offgrid(Measurement::isotropic(kind.clone(), 0.2, 0.5, 0.01), &g, &p).unwrap();
        assert_eq!(edge.nodes(), &[g.index(1, 1), g.index(1, 2)]);
        let cell = bind_offgrid(Measurement::isotropic(kind.clone(), 0.3, 0.5, 0.01), &g, &p).unwrap();
        assert_eq!(cell.nodes().len(), 4);
        assert!(matches!(
            bind_offgrid(Measurement::isotropic(kind.clone(), 0.6, 0.5, 0.01), &g, &p),
            Err(SensorError::OutOfHull { .. })
        ));
        let bad = Measurement::new(kind, 0.1, 0.1, DMatrix::identity(2, 2));
        assert!(matches!(bind_offgrid(bad, &g, &p), Err(SensorError::NoiseDimension { .. })));
    }

    #[test]
    fn bound_jacobians_match_finite_differences() {
        let p = isotropic_params(1.0, 1.0, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..100 {
            let g = test_grid(&mut rng);
            let (s, t) = match trial % 3 {
                0 => (0.2, rng.random::<f64>() * 0.7),
                1 => (rng.random::<f64>() * 0.5, 0.7),
                _ => (rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.7),
            };
            let kind = random_kind(&mut rng, trial / 3);
            let f = bind_offgrid(Measurement::isotropic(kind.clone(), s, t, 0.1), &g, &p).unwrap();
            let states: Vec<NodeState> = f.nodes().iter().map(|&i| g.states[i]).collect();
            let refs: Vec<&NodeState> = states.iter().collect();
            let (_, jacs) = f.linearize(&refs).unwrap();
            let fd = fd_jacobians(&states, kind.dim(), |xs| {
                let r: Vec<&NodeState> = xs.iter().collect();
                f.error(&r).unwrap()
            });
            for (a, n) in jacs.iter().zip(&fd) {
                assert_jacobian_close(a, n);
            }
        }
    }

    #[test]
    fn whitener_inverts_covariance() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let m = Measurement::new(MeasurementKind::Gyro { value: Vector3::zeros() }, 0.0, 0.0, cov.clone());
        let w = m.whitener().unwrap();
        assert_abs_diff_eq!(w.transpose() * &w, cov.try_inverse().unwrap(), epsilon = 1e-12);
        let not_pd = Measurement::new(MeasurementKind::Gyro { value: Vector3::zeros() }, 0.0, 0.0, -DMatrix::identity(3, 3));
        assert_eq!(not_pd.whitener(), Err(SensorError::NoiseNotPd));
    }

    #[test]
    fn constant_field_binding() {
        let p = isotropic_params(1.0, 1.0, 1.0, 1.0);
        let pose = Pose::exp(&twist([0.1, 0.2, 0.3, 0.4, -0.2, 0.1]));
        let g = build_grid(&[0.0, 0.2, 0.5], &[0.0, 0.3, 0.7], GridInit::Constant(NodeState::at_rest(pose))).unwrap();
        let f = bind_offgrid(Measurement::isotropic(MeasurementKind::Pose { value: pose }, 0.33, 0.41, 0.1), &g, &p).unwrap();
        let refs: Vec<&NodeState> = f.nodes().iter().map(|&i| &g.states[i]).collect();
        assert!(f.error(&refs).unwrap().amax() < 1e-14);
    }
}
