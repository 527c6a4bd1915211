//! Soft correspondences with outlier slack.
//!
//! The working representation is a row-compressed kernel plus row / column
//! scaling vectors; Sinkhorn balancing only updates the scalings. A dense
//! [`MatchMatrix`] is materialized on request.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Soft match matrix of shape `(M + 1) x (N + 1)`.
///
/// Rows `0..M` are moving points, columns `0..N` fixed points; row `M` and
/// column `N` are the outlier slack. The corner entry is unused and zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    moving: usize,
    fixed: usize,
    weights: Vec<f64>,
}

impl MatchMatrix {
    pub fn zeros(moving: usize, fixed: usize) -> Self {
        Self {
            moving,
            fixed,
            weights: vec![0.0; (moving + 1) * (fixed + 1)],
        }
    }

    /// One-to-one matching of moving point `i` to fixed point `i`; extra rows
    /// or columns go to slack.
    pub fn identity(moving: usize, fixed: usize) -> Self {
        let mut mu = Self::zeros(moving, fixed);
        for i in 0..moving {
            if i < fixed {
                mu.set(i, i, 1.0);
            } else {
                mu.set(i, fixed, 1.0);
            }
        }
        for j in moving..fixed {
            mu.set(moving, j, 1.0);
        }
        mu
    }

    pub fn from_weights(moving: usize, fixed: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != (moving + 1) * (fixed + 1) {
            return Err(Error::Shape(format!(
                "{} weights for a {}x{} match matrix",
                weights.len(),
                moving + 1,
                fixed + 1
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "match weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { moving, fixed, weights })
    }

    /// `(M, N)`: moving and fixed point counts, excluding slack.
    pub fn shape(&self) -> (usize, usize) {
        (self.moving, self.fixed)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * (self.fixed + 1) + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, w: f64) {
        self.weights[i * (self.fixed + 1) + j] = w;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Inner (non-slack) entries of moving row `i`.
    pub fn inner_row(&self, i: usize) -> &[f64] {
        let start = i * (self.fixed + 1);
        &self.weights[start..start + self.fixed]
    }

    pub fn row_slack(&self, i: usize) -> f64 {
        self.get(i, self.fixed)
    }

    pub fn column_slack(&self, j: usize) -> f64 {
        self.get(self.moving, j)
    }

    /// Row sum of moving point `i`, slack included.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.inner_row(i).iter().sum::<f64>() + self.row_slack(i)
    }

    /// Column sum of fixed point `j`, slack included.
    pub fn column_sum(&self, j: usize) -> f64 {
        (0..=self.moving).map(|i| self.get(i, j)).sum()
    }

    pub fn inner_total(&self) -> f64 {
        (0..self.moving).map(|i| self.inner_row(i).iter().sum::<f64>()).sum()
    }

    /// Fraction of moving-point mass matched to fixed points.
    pub fn inlier_fraction_moving(&self) -> f64 {
        if self.moving == 0 {
            return 0.0;
        }
        let slack: f64 = (0..self.moving).map(|i| self.row_slack(i)).sum();
        (self.moving as f64 - slack) / self.moving as f64
    }
}

/// Entries this far (in log units) below their row maximum are dropped.
/// e^-25 ≈ 1.4e-11 of the row's largest weight, so even a thousand dropped
/// entries move a row sum by less than 1e-7 relative.
pub(crate) const LOG_DROP: f64 = 25.0;

/// Points that take no part in matching: hidden rows go wholly to slack and
/// hidden columns receive no inner mass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Hidden<'a> {
    pub rows: Option<&'a [bool]>,
    pub cols: Option<&'a [bool]>,
}

/// Row-compressed correspondence kernel with Sinkhorn scalings.
///
/// Row `i` is stored shifted by its log-maximum `m_i` (taken over the inner
/// entries and the unit slack entry), so inner values are `exp(l_ij - m_i)` and
/// the slack value is `exp(-m_i)`. Row normalization is invariant to that
/// shift, so the balanced result equals the unshifted one.
#[derive(Default)]
pub(crate) struct Kernel {
    pub fixed: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
    pub row_slack: Vec<f64>,
    pub row_scale: Vec<f64>,
    pub col_scale: Vec<f64>,
}

impl Kernel {
    /// Builds `exp(-(‖s_j − m_i‖² − beta) / temp)` with unit slack entries.
    /// `drop_log = f64::INFINITY` keeps every entry.
    pub fn build(
        moved: &[[f64; 3]],
        fixed: &[[f64; 3]],
        temp: f64,
        beta: f64,
        drop_log: f64,
        hidden: Hidden<'_>,
    ) -> Self {
        let mut k = Self::default();
        k.rebuild(moved, fixed, temp, beta, drop_log, hidden);
        k
    }

    /// Same as [`Kernel::build`] but reuses this kernel's buffers.
    pub fn rebuild(
        &mut self,
        moved: &[[f64; 3]],
        fixed: &[[f64; 3]],
        temp: f64,
        beta: f64,
        drop_log: f64,
        hidden: Hidden<'_>,
    ) {
        let n = fixed.len();
        let (fx, fy, fz): (Vec<f64>, Vec<f64>, Vec<f64>) = (
            fixed.iter().map(|p| p[0]).collect(),
            fixed.iter().map(|p| p[1]).collect(),
            fixed.iter().map(|p| p[2]).collect(),
        );
        let inv_t = 1.0 / temp;
        let mut logs = vec![0.0f64; n];
        let mut row_cols = vec![0u32; n];
        let mut row_vals = vec![0.0f64; n];
        let Self {
            row_ptr,
            cols,
            vals,
            row_slack,
            ..
        } = self;
        row_ptr.clear();
        cols.clear();
        vals.clear();
        row_slack.clear();
        row_ptr.push(0);
        for (i, m) in moved.iter().enumerate() {
            if hidden.rows.is_some_and(|h| h[i]) {
                row_slack.push(1.0);
                row_ptr.push(cols.len());
                continue;
            }
            for (((l, x), y), z) in logs.iter_mut().zip(&fx).zip(&fy).zip(&fz) {
                let (dx, dy, dz) = (x - m[0], y - m[1], z - m[2]);
                *l = (beta - (dx * dx + dy * dy + dz * dz)) * inv_t;
            }
            if let Some(h) = hidden.cols {
                for (l, _) in logs.iter_mut().zip(h).filter(|(_, h)| **h) {
                    *l = f64::NEG_INFINITY;
                }
            }
            let max_log = row_max(&logs);
            let floor = max_log - drop_log;
            let mut kept = 0;
            for (j, &l) in logs.iter().enumerate() {
                row_cols[kept] = j as u32;
                row_vals[kept] = l - max_log;
                kept += (l >= floor) as usize;
            }
            for v in &mut row_vals[..kept] {
                *v = v.exp();
            }
            cols.extend_from_slice(&row_cols[..kept]);
            vals.extend_from_slice(&row_vals[..kept]);
            row_slack.push((-max_log).exp());
            row_ptr.push(cols.len());
        }
        self.fixed = n;
        self.row_scale.clear();
        self.row_scale.resize(moved.len(), 1.0);
        self.col_scale.clear();
        self.col_scale.resize(n, 1.0);
    }

    pub fn moving(&self) -> usize {
        self.row_slack.len()
    }

    #[cfg(test)]
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn normalize_rows(&mut self) {
        for i in 0..self.moving() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let sum = gather_dot(&self.vals[s..e], &self.cols[s..e], &self.col_scale);
            self.row_scale[i] = 1.0 / (self.row_slack[i] + sum);
        }
    }

    /// `acc_j = Σ_i r_i K_ij` (the slack row contributes `1` separately).
    fn column_accumulate(&self, acc: &mut [f64]) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..self.moving() {
            let r = self.row_scale[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc[self.cols[k] as usize] += r * self.vals[k];
            }
        }
    }

    /// Starts balancing from previously converged column scalings. Column
    /// scalings do not depend on the per-row shifts, so any positive start is
    /// valid; a nearby one converges in far fewer passes.
    pub fn warm_start(&mut self, col_scale: &[f64]) {
        if col_scale.len() == self.fixed {
            self.col_scale.copy_from_slice(col_scale);
        }
    }

    /// Alternating row / column balancing, ending with a row pass so moving
    /// rows sum to one. Stops early once every fixed column sums to one within
    /// `tol`. Returns the number of column passes performed.
    pub fn sinkhorn(&mut self, iters: usize, tol: f64) -> usize {
        let mut acc = vec![0.0; self.fixed];
        for it in 0..iters {
            self.normalize_rows();
            self.column_accumulate(&mut acc);
            let worst = acc
                .iter()
                .zip(&self.col_scale)
                .map(|(a, c)| (c * (a + 1.0) - 1.0).abs())
                .fold(0.0, f64::max);
            if worst <= tol {
                return it;
            }
            for (c, a) in self.col_scale.iter_mut().zip(&acc) {
                *c = 1.0 / (a + 1.0);
            }
        }
        self.normalize_rows();
        iters
    }

    /// Per moving point: total inner weight and weighted sum of fixed points.
    pub fn weighted_targets(&self, fixed: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let m = self.moving();
        let mut w = vec![0.0; m];
        let mut targets = vec![[0.0; 3]; m];
        for i in 0..m {
            let r = self.row_scale[i];
            let (mut sw, mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k] as usize;
                let mu = self.vals[k] * self.col_scale[j];
                sw += mu;
                sx += mu * fixed[j][0];
                sy += mu * fixed[j][1];
                sz += mu * fixed[j][2];
            }
            w[i] = r * sw;
            targets[i] = [r * sx, r * sy, r * sz];
        }
        (w, targets)
    }

    /// `Σ µ_ij ‖s_j − m'_i‖²` and `Σ µ_ij` over inner entries.
    pub fn residual_and_mass(&self, moved: &[[f64; 3]], fixed: &[[f64; 3]]) -> (f64, f64) {
        let (mut residual, mut mass) = (0.0, 0.0);
        for (i, m) in moved.iter().enumerate() {
            let r = self.row_scale[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k] as usize;
                let mu = r * self.vals[k] * self.col_scale[j];
                let s = fixed[j];
                let (dx, dy, dz) = (s[0] - m[0], s[1] - m[1], s[2] - m[2]);
                residual += mu * (dx * dx + dy * dy + dz * dz);
                mass += mu;
            }
        }
        (residual, mass)
    }

    pub fn to_match_matrix(&self) -> MatchMatrix {
        let (m, n) = (self.moving(), self.fixed);
        let mut mu = MatchMatrix::zeros(m, n);
        for i in 0..m {
            let r = self.row_scale[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k] as usize;
                mu.set(i, j, r * self.vals[k] * self.col_scale[j]);
            }
            mu.set(i, n, r * self.row_slack[i]);
        }
        for j in 0..n {
            mu.set(m, j, self.col_scale[j]);
        }
        mu
    }
}

/// `Σ_k vals_k · scale[cols_k]` over four independent partial sums.
fn gather_dot(vals: &[f64], cols: &[u32], scale: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (vc, cc) = (vals.chunks_exact(4), cols.chunks_exact(4));
    let (vr, cr) = (vc.remainder(), cc.remainder());
    for (v, c) in vc.zip(cc) {
        for l in 0..4 {
            acc[l] += v[l] * scale[c[l] as usize];
        }
    }
    let tail: f64 = vr.iter().zip(cr).map(|(v, &c)| v * scale[c as usize]).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Largest of `0` and `xs`, with independent lanes so the loop pipelines.
fn row_max(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = if x > *a { x } else { *a };
        }
    }
    rest.iter().chain(&acc).fold(0.0, |a, &x| if x > a { x } else { a })
}

pub(crate) fn as_arrays(cloud: &PointCloud) -> Vec<[f64; 3]> {
    cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn check_temp(temp: f64) -> Result<()> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    Ok(())
}

/// Unnormalized softassign weights: inner entries
/// `exp(-(‖s_j − m'_i‖² − beta) / temp)`, slack entries `1`.
pub fn softassign_weights(
    moving_transformed: &PointCloud,
    fixed: &PointCloud,
    temp: f64,
    beta: f64,
) -> Result<MatchMatrix> {
    check_temp(temp)?;
    let (m, n) = (moving_transformed.len(), fixed.len());
    let mut mu = MatchMatrix::zeros(m, n);
    for (i, p) in moving_transformed.points.iter().enumerate() {
        for (j, s) in fixed.points.iter().enumerate() {
            mu.set(i, j, (-((s - p).norm_squared() - beta) / temp).exp());
        }
        mu.set(i, n, 1.0);
    }
    for j in 0..n {
        mu.set(m, j, 1.0);
    }
    Ok(mu)
}

/// Softassign with exactly `sinkhorn_iters` row/column passes (plus a final
/// row pass). No entries are dropped.
pub fn softassign(
    moving_transformed: &PointCloud,
    fixed: &PointCloud,
    temp: f64,
    beta: f64,
    sinkhorn_iters: usize,
) -> Result<MatchMatrix> {
    softassign_with_tolerance(moving_transformed, fixed, temp, beta, sinkhorn_iters, 0.0)
}

/// Softassign that stops balancing once column sums are within `tol` of one.
pub fn softassign_with_tolerance(
    moving_transformed: &PointCloud,
    fixed: &PointCloud,
    temp: f64,
    beta: f64,
    sinkhorn_iters: usize,
    tol: f64,
) -> Result<MatchMatrix> {
    check_temp(temp)?;
    if !beta.is_finite() {
        return Err(Error::InvalidConfig(format!("beta must be finite, got {beta}")));
    }
    let mut kernel = Kernel::build(
        &as_arrays(moving_transformed),
        &as_arrays(fixed),
        temp,
        beta,
        f64::INFINITY,
        Hidden::default(),
    );
    kernel.sinkhorn(sinkhorn_iters, tol);
    Ok(kernel.to_match_matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(), "t")
    }

    /// Balanced value of the inner entry for two coincident single points:
    /// with `k = exp(beta / temp)` both scalings equal `x` solving `x (k x + 1) = 1`.
    fn single_pair_fixed_point(temp: f64, beta: f64) -> f64 {
        let k = (beta / temp).exp();
        let x = (-1.0 + (1.0 + 4.0 * k).sqrt()) / (2.0 * k);
        k * x * x
    }

    #[test]
    fn identical_single_points() {
        let a = cloud(&[[1.0, 2.0, 3.0]]);
        for (temp, beta) in [(5.0, 0.0), (5.0, 10.0), (1.0, 6.0)] {
            let init = softassign_weights(&a, &a, temp, beta).unwrap();
            assert!(init.get(0, 0) >= init.row_slack(0));
            let target = single_pair_fixed_point(temp, beta);
            let mut prev_gap = f64::INFINITY;
            for iters in [1, 4, 16, 64, 256] {
                let gap = (softassign(&a, &a, temp, beta, iters).unwrap().get(0, 0) - target).abs();
                assert!(gap <= prev_gap);
                prev_gap = gap;
            }
            assert!(prev_gap < 1e-9, "{prev_gap}");
        }
        assert!(single_pair_fixed_point(1.0, 0.0) < 0.5);
        assert!(single_pair_fixed_point(0.5, 10.0) > 0.99);
        let mu = softassign(&a, &a, 1.0, 6.0, 64).unwrap();
        assert!(mu.get(0, 0) > mu.row_slack(0));
    }

    #[test]
    fn far_point_goes_to_slack() {
        let moving = cloud(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]);
        let fixed = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let temp = 10.0;
        // Evaluating the exponentials directly: exp(-(99²)/10) vs slack 1.
        let direct = (-(99.0f64 * 99.0) / temp).exp();
        assert!(direct < 1e-300);
        let mu = softassign(&moving, &fixed, temp, 0.0, 30).unwrap();
        assert!(mu.row_slack(1) >= 0.99);
        assert!((mu.row_sum(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equidistant_fixed_points_get_equal_weight() {
        let moving = cloud(&[[0.0, 0.0, 0.0]]);
        let fixed = cloud(&[[-2.0, 0.5, 0.0], [2.0, 0.5, 0.0]]);
        let mu = softassign(&moving, &fixed, 3.0, 1.0, 30).unwrap();
        assert!((mu.get(0, 0) - mu.get(0, 1)).abs() <= 1e-12);
    }

    #[test]
    fn rows_sum_to_one_and_entries_nonnegative() {
        let moving = cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [5.0, -2.0, 1.0], [3.0, 3.0, 3.0]]);
        let fixed = cloud(&[[0.2, 0.1, 0.0], [1.1, 0.9, 0.1], [4.0, -2.0, 1.0]]);
        let mu = softassign(&moving, &fixed, 2.0, 1.5, 40).unwrap();
        for i in 0..4 {
            assert!((mu.row_sum(i) - 1.0).abs() < 1e-6);
        }
        assert!(mu.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
        assert_eq!(mu.shape(), (4, 3));
    }

    #[test]
    fn large_beta_over_temp_does_not_overflow() {
        let a = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let mu = softassign(&a, &a, 0.5, 900.0, 50).unwrap();
        assert!(mu.weights().iter().all(|w| w.is_finite()));
        assert!(mu.get(0, 0) > 0.99 && mu.get(1, 1) > 0.99);
    }

    #[test]
    fn dropping_tiny_entries_matches_dense_kernel() {
        let moving: Vec<[f64; 3]> = (0..30)
            .map(|i| [i as f64 * 1.7, (i % 5) as f64, (i % 3) as f64 * 2.0])
            .collect();
        let fixed: Vec<[f64; 3]> = (0..25).map(|i| [i as f64 * 2.0 + 0.3, (i % 4) as f64, 1.0]).collect();
        let mut dense = Kernel::build(&moving, &fixed, 0.7, 4.0, f64::INFINITY, Hidden::default());
        let mut sparse = Kernel::build(&moving, &fixed, 0.7, 4.0, LOG_DROP, Hidden::default());
        assert!(sparse.nnz() < dense.nnz());
        dense.sinkhorn(40, 0.0);
        sparse.sinkhorn(40, 0.0);
        let (a, b) = (dense.to_match_matrix(), sparse.to_match_matrix());
        let worst = a
            .weights()
            .iter()
            .zip(b.weights())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let bound = fixed.len() as f64 * (-LOG_DROP).exp();
        assert!(worst < bound, "{worst} vs {bound}");
    }

    #[test]
    fn hidden_rows_and_columns_take_no_inner_mass() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let rows = [false, true, false];
        let cols = [false, false, true];
        let hidden = Hidden {
            rows: Some(&rows),
            cols: Some(&cols),
        };
        let mut k = Kernel::build(&pts, &pts, 1.0, 2.0, LOG_DROP, hidden);
        k.sinkhorn(50, 0.0);
        let mu = k.to_match_matrix();
        assert_eq!(mu.row_slack(1), 1.0);
        for i in 0..3 {
            assert_eq!(mu.get(i, 2), 0.0);
            assert!((mu.row_sum(i) - 1.0).abs() < 1e-12);
        }
        assert_eq!(mu.column_slack(2), 1.0);
        assert!(mu.get(0, 0) > mu.get(0, 1));
    }

    #[test]
    fn rejects_bad_temperature() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(softassign(&a, &a, 0.0, 0.0, 3), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            softassign_weights(&a, &a, -1.0, 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }
}
