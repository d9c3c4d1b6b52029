//! Dense reference implementations for tests.
//!
//! Everything here works on raw stacked 24-vectors (the linear regime) and
//! builds full matrices, so sizes are capped.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::error::PriorError;
use crate::prior::{phi_s, phi_t, q_binary_s, q_binary_t, q_quaternary, Mat24, PriorParams, Vec24};

/// Largest node count the dense routines accept.
pub const MAX_NODES: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("{nodes} nodes exceeds the dense limit of {MAX_NODES}")]
    TooLarge { nodes: usize },
    #[error("singular system")]
    Singular,
    #[error("point ({s}, {t}) is not a node of the refined grid")]
    NotANode { s: f64, t: f64 },
    #[error(transparent)]
    Prior(#[from] PriorError),
}

fn guard(s: &[f64], t: &[f64]) -> Result<(), OracleError> {
    let nodes = s.len() * t.len();
    if nodes > MAX_NODES {
        return Err(OracleError::TooLarge { nodes });
    }
    Ok(())
}

fn put(m: &mut DMatrix<f64>, i: usize, j: usize, block: &Mat24) {
    m.view_mut((24 * i, 24 * j), (24, 24)).copy_from(block);
}

/// Lifted transition `A = A_t ⊠ A_s`: block `((n,k), (m,l))` is
/// `Φ_t(t_k − t_l)·Φ_s(s_n − s_m)` for `l ≤ k`, `m ≤ n`. Nodes are stacked
/// space-major, index `k·N + n`.
pub fn lifted_transition(s: &[f64], t: &[f64]) -> Result<DMatrix<f64>, OracleError> {
    guard(s, t)?;
    let (n_s, n_t) = (s.len(), t.len());
    let mut a = DMatrix::zeros(24 * n_s * n_t, 24 * n_s * n_t);
    for k in 0..n_t {
        for l in 0..=k {
            let at = phi_t(t[k] - t[l])?;
            for n in 0..n_s {
                for m in 0..=n {
                    put(&mut a, k * n_s + n, l * n_s + m, &(at * phi_s(s[n] - s[m])?));
                }
            }
        }
    }
    Ok(a)
}

/// Block-diagonal process noise: `p0` at the origin, spatial and temporal
/// binary noise along the first row and column, quaternary noise elsewhere.
pub fn lifted_noise(s: &[f64], t: &[f64], params: &PriorParams) -> Result<DMatrix<f64>, OracleError> {
    guard(s, t)?;
    let (n_s, n_t) = (s.len(), t.len());
    let mut q = DMatrix::zeros(24 * n_s * n_t, 24 * n_s * n_t);
    for k in 0..n_t {
        for n in 0..n_s {
            let block = match (n, k) {
                (0, 0) => params.p0,
                (n, 0) => q_binary_s(s[n] - s[n - 1], params)?,
                (0, k) => q_binary_t(t[k] - t[k - 1], params)?,
                (n, k) => q_quaternary(s[n] - s[n - 1], t[k] - t[k - 1], params)?,
            };
            let i = k * n_s + n;
            put(&mut q, i, i, &block);
        }
    }
    Ok(q)
}

/// `A·Q·Aᵀ`.
pub fn dense_prior_covariance(s: &[f64], t: &[f64], params: &PriorParams) -> Result<DMatrix<f64>, OracleError> {
    let a = lifted_transition(s, t)?;
    let q = lifted_noise(s, t, params)?;
    let p = &a * q * a.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

/// `A⁻ᵀ·Q⁻¹·A⁻¹`, inverting the lifted matrices directly.
pub fn dense_prior_precision(s: &[f64], t: &[f64], params: &PriorParams) -> Result<DMatrix<f64>, OracleError> {
    let a = lifted_transition(s, t)?;
    let q = lifted_noise(s, t, params)?;
    let a_inv = a.try_inverse().ok_or(OracleError::Singular)?;
    let q_inv = q.try_inverse().ok_or(OracleError::Singular)?;
    let p = a_inv.transpose() * q_inv * a_inv;
    Ok((&p + p.transpose()) * 0.5)
}

/// Prior mean `A·[m₀; 0; …]` for an origin mean `m₀`.
pub fn dense_prior_mean(s: &[f64], t: &[f64], origin: &Vec24) -> Result<DVector<f64>, OracleError> {
    let a = lifted_transition(s, t)?;
    Ok(a.columns(0, 24) * origin)
}

/// Gaussian conditioning of `x ~ N(mean, cov)` on `y = H·x + v`, `v ~ N(0, R)`,
/// in covariance (gain) form.
pub fn dense_linear_regress(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), OracleError> {
    if h.nrows() == 0 {
        return Ok((mean.clone(), cov.clone()));
    }
    let s = h * cov * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(OracleError::Singular)?;
    let gain = cov * h.transpose() * s_inv;
    let post_mean = mean + &gain * (y - h * mean);
    // Joseph form keeps the result symmetric PSD
    let i_kh = DMatrix::identity(cov.nrows(), cov.nrows()) - &gain * h;
    let post = &i_kh * cov * i_kh.transpose() + &gain * r * gain.transpose();
    Ok((post_mean, (&post + post.transpose()) * 0.5))
}

fn insert_sorted(knots: &[f64], x: f64) -> Vec<f64> {
    let mut out = knots.to_vec();
    if !out.contains(&x) {
        out.push(x);
        out.sort_by(f64::total_cmp);
    }
    out
}

/// Conditional of the point `(s, t)` on the given corner points under the
/// discrete prior of the grid refined to contain `(s, t)`. Returns one
/// 24×24 weight per corner and the residual covariance.
pub fn dense_condition_query(
    s_knots: &[f64],
    t_knots: &[f64],
    s: f64,
    t: f64,
    corners: &[(f64, f64)],
    params: &PriorParams,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>), OracleError> {
    let rs = insert_sorted(s_knots, s);
    let rt = insert_sorted(t_knots, t);
    let p = dense_prior_covariance(&rs, &rt, params)?;
    let index = |a: f64, b: f64| -> Result<usize, OracleError> {
        let n = rs.iter().position(|&v| v == a).ok_or(OracleError::NotANode { s: a, t: b })?;
        let k = rt.iter().position(|&v| v == b).ok_or(OracleError::NotANode { s: a, t: b })?;
        Ok(k * rs.len() + n)
    };
    let q = index(s, t)?;
    let c: Vec<usize> = corners.iter().map(|&(a, b)| index(a, b)).collect::<Result<_, _>>()?;
    let m = c.len();
    let mut p_cc = DMatrix::zeros(24 * m, 24 * m);
    let mut p_qc = DMatrix::zeros(24, 24 * m);
    for (i, &ci) in c.iter().enumerate() {
        p_qc.view_mut((0, 24 * i), (24, 24)).copy_from(&p.view((24 * q, 24 * ci), (24, 24)));
        for (j, &cj) in c.iter().enumerate() {
            p_cc.view_mut((24 * i, 24 * j), (24, 24)).copy_from(&p.view((24 * ci, 24 * cj), (24, 24)));
        }
    }
    let chol = p_cc.cholesky().ok_or(OracleError::Singular)?;
    let w = chol.solve(&p_qc.transpose()).transpose();
    let p_qq = p.view((24 * q, 24 * q), (24, 24)).into_owned();
    let res = p_qq - &w * p_qc.transpose();
    let weights = (0..m).map(|i| w.columns(24 * i, 24).into_owned()).collect();
    Ok((weights, (&res + res.transpose()) * 0.5))
}
