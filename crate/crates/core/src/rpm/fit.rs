//! Regularized weighted least-squares affine fit.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, PointCloud};

use super::matching::MatchMatrix;

/// Below this total inner weight the fit has nothing to fit.
pub const MIN_TOTAL_WEIGHT: f64 = 1e-12;

/// Squared pivot ratio below which the normal matrix is treated as singular.
const PIVOT_RATIO_SQ: f64 = 1e-14;

/// Minimizes `Σ_i w_i ‖A m_i + t‖² − 2 Σ_i (A m_i + t)·ŝ_i + alpha ‖A − I‖²_F`,
/// i.e. the match-weighted residual with `ŝ_i = Σ_j µ_ij s_j`, `w_i = Σ_j µ_ij`.
///
/// Points are shifted to their weighted centroid first; that only
/// reparameterizes `t`, so the minimizer is unchanged but better conditioned.
pub(crate) fn fit_affine(moving: &[[f64; 3]], w: &[f64], targets: &[[f64; 3]], alpha: f64) -> Result<AffineTransform> {
    let total: f64 = w.iter().sum();
    if !(total > MIN_TOTAL_WEIGHT) {
        return Err(Error::NoCorrespondence(total));
    }
    let mut c = [0.0; 3];
    for (m, &wi) in moving.iter().zip(w) {
        for a in 0..3 {
            c[a] += wi * m[a];
        }
    }
    let c = c.map(|v| v / total);

    let mut h = Matrix4::<f64>::zeros();
    let mut rhs = [Vector4::<f64>::zeros(); 3];
    for ((m, &wi), s) in moving.iter().zip(w).zip(targets) {
        let x = Vector4::new(m[0] - c[0], m[1] - c[1], m[2] - c[2], 1.0);
        h += wi * x * x.transpose();
        for k in 0..3 {
            rhs[k] += s[k] * x;
        }
    }
    for a in 0..3 {
        h[(a, a)] += alpha;
        rhs[a][a] += alpha;
    }

    let chol = h.cholesky().ok_or(Error::SingularSystem)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > 0.0) || (lo / hi).powi(2) < PIVOT_RATIO_SQ {
        return Err(Error::SingularSystem);
    }
    let mut linear = Matrix3::zeros();
    let mut shifted_t = Vector3::zeros();
    for k in 0..3 {
        let theta = chol.solve(&rhs[k]);
        linear[(k, 0)] = theta[0];
        linear[(k, 1)] = theta[1];
        linear[(k, 2)] = theta[2];
        shifted_t[k] = theta[3];
    }
    let translation = shifted_t - linear * Vector3::from(c);
    let out = AffineTransform::new(linear, translation);
    if !out.is_finite() {
        return Err(Error::SingularSystem);
    }
    Ok(out)
}

/// Weighted least-squares affine update minimizing
/// `Σ µ_ij ‖s_j − (A m_i + t)‖² + alpha ‖A − I‖²_F` over inner entries.
pub fn update_affine(mu: &MatchMatrix, moving: &PointCloud, fixed: &PointCloud, alpha: f64) -> Result<AffineTransform> {
    check_shape(mu, moving, fixed)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be finite and nonnegative, got {alpha}"
        )));
    }
    let m: Vec<[f64; 3]> = moving.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let mut w = vec![0.0; m.len()];
    let mut targets = vec![[0.0; 3]; m.len()];
    for i in 0..m.len() {
        for (j, s) in fixed.points.iter().enumerate() {
            let mu_ij = mu.get(i, j);
            w[i] += mu_ij;
            targets[i][0] += mu_ij * s.x;
            targets[i][1] += mu_ij * s.y;
            targets[i][2] += mu_ij * s.z;
        }
    }
    fit_affine(&m, &w, &targets, alpha)
}

pub(crate) fn check_shape(mu: &MatchMatrix, moving: &PointCloud, fixed: &PointCloud) -> Result<()> {
    if mu.shape() != (moving.len(), fixed.len()) {
        return Err(Error::Shape(format!(
            "match matrix is {:?} (+slack) but clouds have {} moving and {} fixed points",
            mu.shape(),
            moving.len(),
            fixed.len()
        )));
    }
    Ok(())
}
