//! SO(3)/SE(3) kernels.
//!
//! Twists are ordered linear-then-angular, `(v_x, v_y, v_z, ω_x, ω_y, ω_z)`.
//! Perturbations are applied on the left everywhere: `T ← exp(δ)·T`.
//!
//! `so3_log` at an angle of exactly π returns the axis whose first nonzero
//! component is positive.

use nalgebra::{Matrix3, Matrix4, Matrix6, SVector, Vector3, Vector6};
use num_dual::{jacobian, DualNum, DualSVec64};
use std::f64::consts::PI;
use std::ops::Mul;

use crate::error::LieError;

pub type Twist = Vector6<f64>;

/// Below this rotation angle `so3_exp`/`so3_log` switch to their series forms.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Below this angle the Jacobian coefficient functions use their Taylor series.
const SERIES_ANGLE: f64 = 0.1;

const ORTHO_TOL: f64 = 1e-9;

/// A rotation matrix with orthonormal columns and unit determinant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and handedness.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, LieError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(LieError::NonFinite);
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(LieError::NotARotation { ortho, det });
        }
        Ok(Rotation(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Rodrigues formula; callers guarantee a finite argument.
    pub(crate) fn exp(phi: &Vector3<f64>) -> Self {
        let theta2 = phi.norm_squared();
        let k = hat(phi);
        if theta2.sqrt() < SMALL_ANGLE {
            return Rotation(Matrix3::identity() + k + 0.5 * k * k);
        }
        let theta = theta2.sqrt();
        let (s, c) = theta.sin_cos();
        Rotation(Matrix3::identity() + (s / theta) * k + ((1.0 - c) / theta2) * k * k)
    }

    pub(crate) fn log(&self) -> Vector3<f64> {
        let r = &self.0;
        let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        // 2·sinθ·axis, robust away from θ = π.
        let sin_theta = 0.5 * skew.norm();
        let theta = sin_theta.atan2(cos_theta);
        if theta < SMALL_ANGLE {
            return 0.5 * skew;
        }
        if theta < PI - 1e-3 {
            return (theta / (2.0 * theta.sin())) * skew;
        }
        // Near π: recover the axis from the symmetric part, (1 − cosθ)·aaᵀ.
        let sym = 0.5 * (r + r.transpose()) - cos_theta * Matrix3::identity();
        let col = (0..3)
            .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = sym.column(col).into_owned();
        axis /= axis.norm();
        let along = axis.dot(&skew);
        if along.abs() > 1e-12 {
            if along < 0.0 {
                axis = -axis;
            }
        } else {
            let first = axis.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(1.0);
            if first < 0.0 {
                axis = -axis;
            }
        }
        theta * axis
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose { rotation: Rotation::identity(), translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub(crate) fn exp(xi: &Twist) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        Pose { rotation: Rotation::exp(&phi), translation: so3_left_jacobian(&phi) * rho }
    }

    pub(crate) fn log(&self) -> Twist {
        let phi = self.rotation.log();
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        stack(&rho, &phi)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.0.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.0 * rhs.translation + self.translation,
        }
    }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub(crate) fn stack(lin: &Vector3<f64>, ang: &Vector3<f64>) -> Twist {
    Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
}

pub(crate) fn linear(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(0).into_owned()
}

pub(crate) fn angular(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(3).into_owned()
}

fn check_finite(v: &[f64]) -> Result<(), LieError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LieError::NonFinite)
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Result<Rotation, LieError> {
    check_finite(phi.as_slice())?;
    Ok(Rotation::exp(phi))
}

/// Principal-branch logarithm, `‖result‖ ≤ π`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    r.log()
}

pub fn se3_exp(xi: &Twist) -> Result<Pose, LieError> {
    check_finite(xi.as_slice())?;
    Ok(Pose::exp(xi))
}

pub fn se3_log(t: &Pose) -> Result<Twist, LieError> {
    if !t.is_finite() {
        return Err(LieError::NonFinite);
    }
    Ok(t.log())
}

/// Twist transport `Ad(T)` with `exp(Ad(T)·ξ) = T·exp(ξ)·T⁻¹`.
pub fn adjoint(t: &Pose) -> Matrix6<f64> {
    let r = t.rotation.0;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&t.translation) * r));
    m
}

/// The 6×6 matrix of `ad(ξ)`, so that `ad(ξ)·η` is the Lie bracket `[ξ, η]`.
pub fn ad(xi: &Twist) -> Matrix6<f64> {
    let rho_hat = hat(&linear(xi));
    let phi_hat = hat(&angular(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&phi_hat);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&phi_hat);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&rho_hat);
    m
}

// Coefficient functions of θ² shared by the Jacobians. Each has a Taylor
// branch for small θ; generic so the same code drives forward-mode AD.

fn series<T: DualNum<Primitive = f64>>(theta2: &T, coeffs: &[f64]) -> T {
    coeffs
        .iter()
        .rev()
        .fold(T::from(0.0), |acc, c| acc * theta2.clone() + T::from(*c))
}

/// (1 − cos θ)/θ²
fn coeff_b<T: DualNum<Primitive = f64>>(theta2: &T) -> T {
    if theta2.re() < SERIES_ANGLE * SERIES_ANGLE {
        series(theta2, &[1.0 / 2.0, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40320.0, 1.0 / 3628800.0])
    } else {
        let theta = theta2.sqrt();
        (T::from(1.0) - theta.cos()) / theta2.clone()
    }
}

/// (θ − sin θ)/θ³
fn coeff_c<T: DualNum<Primitive = f64>>(theta2: &T) -> T {
    if theta2.re() < SERIES_ANGLE * SERIES_ANGLE {
        series(theta2, &[1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0, 1.0 / 39916800.0])
    } else {
        let theta = theta2.sqrt();
        (theta.clone() - theta.sin()) / (theta2.clone() * theta)
    }
}

/// (θ² + 2cos θ − 2)/(2θ⁴)
fn coeff_c2<T: DualNum<Primitive = f64>>(theta2: &T) -> T {
    if theta2.re() < SERIES_ANGLE * SERIES_ANGLE {
        series(theta2, &[1.0 / 24.0, -1.0 / 720.0, 1.0 / 40320.0, -1.0 / 3628800.0, 1.0 / 479001600.0])
    } else {
        let theta = theta2.sqrt();
        (theta2.clone() + theta.cos() * 2.0 - T::from(2.0)) / (theta2.clone() * theta2.clone() * 2.0)
    }
}

/// (2θ − 3 sin θ + θ cos θ)/(2θ⁵)
fn coeff_c3<T: DualNum<Primitive = f64>>(theta2: &T) -> T {
    if theta2.re() < SERIES_ANGLE * SERIES_ANGLE {
        series(
            theta2,
            &[1.0 / 120.0, -2.0 / 5040.0, 3.0 / 362880.0, -4.0 / 39916800.0, 5.0 / 6227020800.0],
        )
    } else {
        let theta = theta2.sqrt();
        let num = theta.clone() * 2.0 - theta.sin() * 3.0 + theta.clone() * theta.cos();
        num / (theta2.clone() * theta2.clone() * theta * 2.0)
    }
}

/// 1/θ² − (1 + cos θ)/(2θ sin θ)
fn coeff_d<T: DualNum<Primitive = f64>>(theta2: &T) -> T {
    if theta2.re() < SERIES_ANGLE * SERIES_ANGLE {
        series(
            theta2,
            &[1.0 / 12.0, 1.0 / 720.0, 1.0 / 30240.0, 1.0 / 1209600.0, 1.0 / 47900160.0],
        )
    } else {
        let theta = theta2.sqrt();
        theta2.recip() - (T::from(1.0) + theta.cos()) / (theta.clone() * theta.sin() * 2.0)
    }
}

/// SO(3) left Jacobian.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let k = hat(phi);
    Matrix3::identity() + coeff_b(&t2) * k + coeff_c(&t2) * k * k
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let k = hat(phi);
    Matrix3::identity() - 0.5 * k + coeff_d(&t2) * k * k
}

/// Upper-right block of the SE(3) left Jacobian.
fn q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    0.5 * r
        + coeff_c(&t2) * (pr + rp + prp)
        + coeff_c2(&t2) * (p * pr + rp * p - 3.0 * prp)
        + coeff_c3(&t2) * (prp * p + p * prp)
}

/// `J_l(ξ)`: `exp(ξ + δ) ≈ exp(J_l(ξ)·δ)·exp(ξ)`.
pub fn left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let phi = angular(xi);
    let j = so3_left_jacobian(&phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q_block(&linear(xi), &phi));
    m
}

/// Angular norms at or beyond this distance from 2π are rejected by
/// [`left_jacobian_inv`].
const INV_MARGIN: f64 = 1e-6;

pub fn left_jacobian_inv(xi: &Twist) -> Result<Matrix6<f64>, LieError> {
    let phi = angular(xi);
    let theta = phi.norm();
    if !theta.is_finite() || theta > 2.0 * PI - INV_MARGIN {
        return Err(LieError::JacobianSingular { angle: theta });
    }
    Ok(left_jacobian_inv_unchecked(xi))
}

pub(crate) fn left_jacobian_inv_unchecked(xi: &Twist) -> Matrix6<f64> {
    let phi = angular(xi);
    let jinv = so3_left_jacobian_inv(&phi);
    let q = q_block(&linear(xi), &phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * q * jinv));
    m
}

// Generic vector forms of J_l·v and J_l⁻¹·v, used to differentiate the
// chart transport with respect to the chart point.

type V3<T> = [T; 3];

fn cross<T: DualNum<Primitive = f64>>(a: &V3<T>, b: &V3<T>) -> V3<T> {
    [
        a[1].clone() * b[2].clone() - a[2].clone() * b[1].clone(),
        a[2].clone() * b[0].clone() - a[0].clone() * b[2].clone(),
        a[0].clone() * b[1].clone() - a[1].clone() * b[0].clone(),
    ]
}

fn axpy<T: DualNum<Primitive = f64>>(acc: &mut V3<T>, k: &T, v: &V3<T>) {
    for i in 0..3 {
        acc[i] += k.clone() * v[i].clone();
    }
}

fn split<T: DualNum<Primitive = f64>>(v: &[T; 6]) -> (V3<T>, V3<T>) {
    (
        [v[0].clone(), v[1].clone(), v[2].clone()],
        [v[3].clone(), v[4].clone(), v[5].clone()],
    )
}

/// `Q(ρ, φ)·w` via cross products.
fn q_apply<T: DualNum<Primitive = f64>>(rho: &V3<T>, phi: &V3<T>, theta2: &T, w: &V3<T>) -> V3<T> {
    let c1 = coeff_c(theta2);
    let c2 = coeff_c2(theta2);
    let c3 = coeff_c3(theta2);
    let rw = cross(rho, w);
    let pw = cross(phi, w);
    let prw = cross(phi, &rw);
    let rpw = cross(rho, &pw);
    let ppw = cross(phi, &pw);
    let prpw = cross(phi, &rpw);
    let pprw = cross(phi, &prw);
    let rppw = cross(rho, &ppw);
    let prppw = cross(phi, &cross(rho, &ppw));
    let pprpw = cross(phi, &prpw);
    let mut out: V3<T> = [T::from(0.0), T::from(0.0), T::from(0.0)];
    axpy(&mut out, &T::from(0.5), &rw);
    let mut t1 = prw.clone();
    axpy(&mut t1, &T::from(1.0), &rpw);
    axpy(&mut t1, &T::from(1.0), &prpw);
    axpy(&mut out, &c1, &t1);
    let mut t2 = pprw;
    axpy(&mut t2, &T::from(1.0), &rppw);
    axpy(&mut t2, &T::from(-3.0), &prpw);
    axpy(&mut out, &c2, &t2);
    let mut t3 = prppw;
    axpy(&mut t3, &T::from(1.0), &pprpw);
    axpy(&mut out, &c3, &t3);
    out
}

fn jphi_apply<T: DualNum<Primitive = f64>>(phi: &V3<T>, theta2: &T, u: &V3<T>, inverse: bool) -> V3<T> {
    let pu = cross(phi, u);
    let ppu = cross(phi, &pu);
    let mut out = u.clone();
    if inverse {
        axpy(&mut out, &T::from(-0.5), &pu);
        axpy(&mut out, &coeff_d(theta2), &ppu);
    } else {
        axpy(&mut out, &coeff_b(theta2), &pu);
        axpy(&mut out, &coeff_c(theta2), &ppu);
    }
    out
}

fn jl_apply_generic<T: DualNum<Primitive = f64>>(xi: &[T; 6], v: &[T; 6]) -> [T; 6] {
    let (rho, phi) = split(xi);
    let (vr, vp) = split(v);
    let t2 = phi[0].clone() * phi[0].clone()
        + phi[1].clone() * phi[1].clone()
        + phi[2].clone() * phi[2].clone();
    let mut top = jphi_apply(&phi, &t2, &vr, false);
    let q = q_apply(&rho, &phi, &t2, &vp);
    axpy(&mut top, &T::from(1.0), &q);
    let bot = jphi_apply(&phi, &t2, &vp, false);
    let [a, b, c] = top;
    let [d, e, f] = bot;
    [a, b, c, d, e, f]
}

fn jl_inv_apply_generic<T: DualNum<Primitive = f64>>(xi: &[T; 6], v: &[T; 6]) -> [T; 6] {
    let (rho, phi) = split(xi);
    let (vr, vp) = split(v);
    let t2 = phi[0].clone() * phi[0].clone()
        + phi[1].clone() * phi[1].clone()
        + phi[2].clone() * phi[2].clone();
    let bot = jphi_apply(&phi, &t2, &vp, true);
    let q = q_apply(&rho, &phi, &t2, &bot);
    let qi = jphi_apply(&phi, &t2, &q, true);
    let mut top = jphi_apply(&phi, &t2, &vr, true);
    axpy(&mut top, &T::from(-1.0), &qi);
    let [a, b, c] = top;
    let [d, e, f] = bot;
    [a, b, c, d, e, f]
}

fn derivative_wrt_xi(
    xi: &Twist,
    v: &Twist,
    f: fn(&[DualSVec64<6>; 6], &[DualSVec64<6>; 6]) -> [DualSVec64<6>; 6],
) -> Matrix6<f64> {
    let vd: [DualSVec64<6>; 6] = std::array::from_fn(|i| DualSVec64::from_re(v[i]));
    let (_, jac) = jacobian(
        |x: SVector<DualSVec64<6>, 6>| {
            let xa: [DualSVec64<6>; 6] = std::array::from_fn(|i| x[i]);
            SVector::<DualSVec64<6>, 6>::from(f(&xa, &vd))
        },
        xi,
    );
    jac
}

/// `∂(J_l(ξ)·v)/∂ξ`.
pub fn left_jacobian_apply_derivative(xi: &Twist, v: &Twist) -> Matrix6<f64> {
    derivative_wrt_xi(xi, v, jl_apply_generic)
}

/// `∂(J_l⁻¹(ξ)·v)/∂ξ`.
pub fn left_jacobian_inv_apply_derivative(xi: &Twist, v: &Twist) -> Matrix6<f64> {
    derivative_wrt_xi(xi, v, jl_inv_apply_generic)
}
