//! Robust point matching: deterministic annealing over soft correspondences
//! with outlier slack, alternating with a regularized affine fit.

mod fit;
mod matching;

use std::cell::RefCell;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decompose_affine, AffineParams, AffineTransform, Point3, PointCloud};
use crate::volume::FovSpec;

pub use fit::{update_affine, MIN_TOTAL_WEIGHT};
pub use matching::{softassign, softassign_weights, softassign_with_tolerance, MatchMatrix};

use matching::{Hidden, Kernel, LOG_DROP};

pub const MIN_POINTS: usize = 4;

/// Default `t_init` as a multiple of `t_final`.
pub const T_INIT_FACTOR: f64 = 12.0;

/// Richardson passes sharpening the fixed cloud against its own blur at `t_final`.
const DEBLUR_PASSES: usize = 3;
/// Passes of the visible-centroid alignment used to start an FOV solve.
const FOV_ALIGN_PASSES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpmConfig {
    /// Regularization weight per unit of matched mass at `t_final`.
    pub alpha: f64,
    /// The weight on `‖A − I‖²_F` at temperature `T` is
    /// `alpha × Σ µ_ij × (T / t_final)^alpha_anneal_power`; zero keeps it constant.
    pub alpha_anneal_power: f64,
    /// Correspondence bias in mm². Unset: `t_final`.
    pub beta: Option<f64>,
    /// Starting temperature in mm². Unset: `T_INIT_FACTOR × t_final`.
    pub t_init: Option<f64>,
    pub t_final: f64,
    pub anneal_rate: f64,
    pub sinkhorn_iters: usize,
    /// Balancing stops early once every fixed column sums to one within this.
    pub sinkhorn_tol: f64,
    pub inner_iters: usize,
    /// Relative cost change ending a temperature early.
    pub conv_tol: f64,
    /// Extra alternations at `t_final` after annealing.
    pub final_iters: usize,
    /// The final refinement stops once the estimated remaining change of the
    /// linear part (translation relative to the cloud's RMS radius) is below this.
    pub final_tol: f64,
    /// Band (mm) inside the field-of-view boundary ignored on both sides of an
    /// FOV-aware solve.
    pub fov_margin: f64,
}

impl Default for RpmConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            alpha_anneal_power: 3.0,
            beta: None,
            t_init: None,
            t_final: 25.0,
            anneal_rate: 0.93,
            sinkhorn_iters: 30,
            sinkhorn_tol: 1e-4,
            inner_iters: 5,
            conv_tol: 1e-4,
            final_iters: 300,
            final_tol: 1e-6,
            fov_margin: 2.0,
        }
    }
}

impl RpmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !nonneg(self.alpha) {
            return bad(format!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        if !nonneg(self.alpha_anneal_power) {
            return bad(format!(
                "alpha_anneal_power must be finite and nonnegative, got {}",
                self.alpha_anneal_power
            ));
        }
        if let Some(b) = self.beta {
            if !nonneg(b) {
                return bad(format!("beta must be finite and nonnegative, got {b}"));
            }
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if let Some(t) = self.t_init {
            if !(t.is_finite() && t > self.t_final) {
                return bad(format!("t_init ({t}) must exceed t_final ({})", self.t_final));
            }
        }
        if !(self.anneal_rate > 0.0 && self.anneal_rate < 1.0) {
            return bad(format!("anneal_rate must lie in (0, 1), got {}", self.anneal_rate));
        }
        if self.inner_iters == 0 {
            return bad("inner_iters must be at least 1".into());
        }
        if !nonneg(self.sinkhorn_tol) {
            return bad(format!("sinkhorn_tol must be nonnegative, got {}", self.sinkhorn_tol));
        }
        if !nonneg(self.conv_tol) {
            return bad(format!("conv_tol must be nonnegative, got {}", self.conv_tol));
        }
        if !nonneg(self.final_tol) {
            return bad(format!("final_tol must be nonnegative, got {}", self.final_tol));
        }
        if !nonneg(self.fov_margin) {
            return bad(format!("fov_margin must be nonnegative, got {}", self.fov_margin));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn t_init_or_default(&self) -> f64 {
        self.t_init.unwrap_or(T_INIT_FACTOR * self.t_final)
    }

    pub fn beta_or_default(&self) -> f64 {
        self.beta.unwrap_or(self.t_final)
    }
}

#[derive(Debug, Clone)]
pub struct RpmResult {
    pub transform: AffineTransform,
    pub params: AffineParams,
    pub final_cost: f64,
    pub temperatures_run: usize,
    /// Softassign / affine alternations over the whole solve.
    pub iterations: usize,
    /// Balanced correspondences at `t_final` under the final transform.
    pub r#match: MatchMatrix,
    pub inlier_fraction_moving: f64,
    pub t_init: f64,
    pub beta: f64,
    /// Regularization weight in effect for the final cost.
    pub alpha_effective: f64,
}

/// `Σ µ_ij ‖s_j − (A m_i + t)‖² + alpha ‖A − I‖²_F − beta Σ µ_ij` over inner
/// entries.
pub fn rpm_cost(
    mu: &MatchMatrix,
    moving: &PointCloud,
    fixed: &PointCloud,
    t: &AffineTransform,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    fit::check_shape(mu, moving, fixed)?;
    let mut residual = 0.0;
    let mut mass = 0.0;
    for (i, m) in moving.points.iter().enumerate() {
        let tm = t.apply(m);
        for (j, s) in fixed.points.iter().enumerate() {
            let w = mu.get(i, j);
            residual += w * (s - tm).norm_squared();
            mass += w;
        }
    }
    Ok(residual + alpha * regularizer(&t.linear) - beta * mass)
}

fn regularizer(a: &Matrix3<f64>) -> f64 {
    (a - Matrix3::identity()).norm_squared()
}

fn transform_points(t: &AffineTransform, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let a = &t.linear;
    let d = &t.translation;
    pts.iter()
        .map(|p| std::array::from_fn(|r| a[(r, 0)] * p[0] + a[(r, 1)] * p[1] + a[(r, 2)] * p[2] + d[r]))
        .collect()
}

fn centred(cloud: &PointCloud) -> (Vector3<f64>, Vec<[f64; 3]>) {
    let c = cloud.centroid().expect("non-empty cloud").coords;
    let pts = cloud.points.iter().map(|p| [p.x - c.x, p.y - c.y, p.z - c.z]).collect();
    (c, pts)
}

fn mean_sq_norm(pts: &[[f64; 3]]) -> f64 {
    pts.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum::<f64>() / pts.len() as f64
}

fn outside(fov: &FovSpec, pts: &[[f64; 3]]) -> Vec<bool> {
    pts.iter()
        .map(|p| !fov.contains(&Point3::new(p[0], p[1], p[2])))
        .collect()
}

struct Step {
    transform: AffineTransform,
    col_scale: Vec<f64>,
    cost: f64,
}

struct Solver<'a> {
    cfg: &'a RpmConfig,
    moving: Vec<[f64; 3]>,
    fixed: Vec<[f64; 3]>,
    beta: f64,
    /// Eroded field of view in the centred fixed frame.
    fov: Option<FovSpec>,
    fixed_hidden: Option<Vec<bool>>,
    /// Fixed points the affine fit pulls towards.
    fit_fixed: Vec<[f64; 3]>,
    spare: RefCell<Kernel>,
}

impl Solver<'_> {
    fn assign(&self, moved: &[[f64; 3]], temp: f64, warm: Option<&[f64]>) -> Kernel {
        let rows = self.fov.as_ref().map(|f| outside(f, moved));
        let hidden = Hidden {
            rows: rows.as_deref(),
            cols: self.fixed_hidden.as_deref(),
        };
        let mut kernel = self.spare.take();
        kernel.rebuild(moved, &self.fixed, temp, self.beta, LOG_DROP, hidden);
        if let Some(c) = warm {
            kernel.warm_start(c);
        }
        kernel.sinkhorn(self.cfg.sinkhorn_iters, self.cfg.sinkhorn_tol);
        kernel
    }

    fn alpha_for(&self, mass: f64, temp: f64) -> f64 {
        self.cfg.alpha * mass * (temp / self.cfg.t_final).powf(self.cfg.alpha_anneal_power)
    }

    fn cost(&self, kernel: &Kernel, t: &AffineTransform, temp: f64) -> (f64, f64) {
        let moved = transform_points(t, &self.moving);
        let (residual, mass) = kernel.residual_and_mass(&moved, &self.fixed);
        let alpha = self.alpha_for(mass, temp);
        (residual + alpha * regularizer(&t.linear) - self.beta * mass, alpha)
    }

    fn step(&self, t: &AffineTransform, temp: f64, warm: Option<&[f64]>) -> Result<Step> {
        let kernel = self.assign(&transform_points(t, &self.moving), temp, warm);
        let (w, targets) = kernel.weighted_targets(&self.fit_fixed);
        let mass: f64 = w.iter().sum();
        let transform = fit::fit_affine(&self.moving, &w, &targets, self.alpha_for(mass, temp))?;
        let (cost, _) = self.cost(&kernel, &transform, temp);
        let col_scale = kernel.col_scale.clone();
        self.spare.replace(kernel);
        Ok(Step {
            transform,
            col_scale,
            cost,
        })
    }

    /// Points whose blur at `temp` reproduces the fixed surface. Matched
    /// targets are blurred averages that sit on the concave side of a curved
    /// surface; fitting towards these points cancels that shrinkage.
    fn deblurred_fixed(&self, temp: f64) -> Vec<[f64; 3]> {
        let hidden = Hidden {
            rows: self.fixed_hidden.as_deref(),
            cols: self.fixed_hidden.as_deref(),
        };
        let mut kernel = Kernel::build(&self.fixed, &self.fixed, temp, self.beta, LOG_DROP, hidden);
        kernel.sinkhorn(self.cfg.sinkhorn_iters, self.cfg.sinkhorn_tol);
        let mut pts = self.fixed.clone();
        for _ in 0..DEBLUR_PASSES {
            let (w, blurred) = kernel.weighted_targets(&pts);
            for ((p, s), (&w, b)) in pts.iter_mut().zip(&self.fixed).zip(w.iter().zip(&blurred)) {
                if w > fit::MIN_TOTAL_WEIGHT {
                    for a in 0..3 {
                        p[a] += s[a] - b[a] / w;
                    }
                }
            }
        }
        pts
    }

    /// Translation placing the centroid of the moving points that land inside
    /// the field of view on the centroid of the visible fixed points.
    fn visible_alignment(&self, fov: &FovSpec, hidden: &[bool]) -> Vector3<f64> {
        let mean = |pts: &mut dyn Iterator<Item = [f64; 3]>| {
            let (mut c, mut k) = (Vector3::zeros(), 0usize);
            for p in pts {
                c += Vector3::from(p);
                k += 1;
            }
            (k > 0).then(|| c / k as f64)
        };
        let target = mean(&mut self.fixed.iter().zip(hidden).filter(|(_, h)| !**h).map(|(p, _)| *p))
            .unwrap_or_else(Vector3::zeros);
        let mut shift = Vector3::zeros();
        for _ in 0..FOV_ALIGN_PASSES {
            let moved = transform_points(&AffineTransform::from_translation(shift), &self.moving);
            let Some(c) = mean(
                &mut moved
                    .into_iter()
                    .filter(|p| fov.contains(&Point3::new(p[0], p[1], p[2]))),
            ) else {
                break;
            };
            let delta = target - c;
            shift += delta;
            if delta.amax() < 1e-9 {
                break;
            }
        }
        shift
    }
}

fn check_clouds(moving: &PointCloud, fixed: &PointCloud) -> Result<()> {
    for (label, cloud) in [("moving", moving), ("fixed", fixed)] {
        if cloud.len() < MIN_POINTS {
            return Err(Error::InsufficientPoints {
                label: label.into(),
                count: cloud.len(),
                min: MIN_POINTS,
            });
        }
        if !cloud.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{label} cloud has non-finite coordinates"
            )));
        }
    }
    Ok(())
}

/// Estimates the affine transform taking `moving` onto `fixed`.
///
/// Both clouds are centred first; the solve starts from the identity in that
/// frame and the centring is folded back into the returned transform.
pub fn rpm_solve(moving: &PointCloud, fixed: &PointCloud, cfg: &RpmConfig) -> Result<RpmResult> {
    solve(moving, fixed, None, cfg)
}

/// Like [`rpm_solve`] for a fixed cloud observed only inside `fov` (world
/// coordinates of the fixed cloud).
///
/// Fixed points within `cfg.fov_margin` of the boundary or beyond it are
/// ignored, and moving points that the current transform carries there go to
/// slack, so anatomy cut off by the field of view neither attracts nor repels
/// the fit. The solve starts from the translation aligning the visible parts'
/// centroids. Subsample the fixed surface from [`visible_points`] so that
/// points on the cut face do not take up the sampling budget.
pub fn rpm_solve_in_fov(moving: &PointCloud, fixed: &PointCloud, fov: &FovSpec, cfg: &RpmConfig) -> Result<RpmResult> {
    solve(moving, fixed, Some(fov), cfg)
}

/// The points of `cloud` lying at least `margin` inside `fov`.
pub fn visible_points(cloud: &PointCloud, fov: &FovSpec, margin: f64) -> Result<PointCloud> {
    let inner = fov.eroded(margin)?;
    let points = cloud.points.iter().filter(|p| inner.contains(p)).copied().collect();
    Ok(PointCloud::new(points, cloud.frame_label.clone()))
}

fn solve(moving: &PointCloud, fixed: &PointCloud, fov: Option<&FovSpec>, cfg: &RpmConfig) -> Result<RpmResult> {
    cfg.validate()?;
    check_clouds(moving, fixed)?;
    let (cm, moving_c) = centred(moving);
    let (cf, fixed_c) = centred(fixed);
    let t_init = cfg.t_init_or_default();
    let beta = cfg.beta_or_default();

    let fov = match fov {
        Some(f) => {
            let eroded = f.eroded(cfg.fov_margin)?;
            Some(FovSpec::new(eroded.shape, eroded.center - cf, eroded.radius)?)
        }
        None => None,
    };
    let fixed_hidden = fov.as_ref().map(|f| outside(f, &fixed_c));
    if let Some(h) = &fixed_hidden {
        let visible = h.iter().filter(|x| !**x).count();
        if visible < MIN_POINTS {
            return Err(Error::InsufficientPoints {
                label: "fixed (inside the field of view)".into(),
                count: visible,
                min: MIN_POINTS,
            });
        }
    }
    let mut solver = Solver {
        cfg,
        moving: moving_c,
        fit_fixed: fixed_c.clone(),
        fixed: fixed_c,
        beta,
        fov,
        fixed_hidden,
        spare: RefCell::default(),
    };

    let mut transform = match (&solver.fov, &solver.fixed_hidden) {
        (Some(f), Some(h)) => AffineTransform::from_translation(solver.visible_alignment(f, h)),
        _ => AffineTransform::identity(),
    };
    let mut temp = t_init;
    let mut temperatures_run = 0;
    let mut iterations = 0;
    let mut col_scale: Option<Vec<f64>> = None;
    loop {
        if temp <= cfg.t_final {
            solver.fit_fixed = solver.deblurred_fixed(temp);
        }
        let mut prev_cost: Option<f64> = None;
        for _ in 0..cfg.inner_iters {
            let step = solver.step(&transform, temp, col_scale.as_deref())?;
            iterations += 1;
            transform = step.transform;
            col_scale = Some(step.col_scale);
            let converged = prev_cost
                .map(|p| (step.cost - p).abs() <= cfg.conv_tol * p.abs().max(f64::MIN_POSITIVE))
                .unwrap_or(false);
            prev_cost = Some(step.cost);
            if converged {
                break;
            }
        }
        temperatures_run += 1;
        if temp <= cfg.t_final {
            break;
        }
        temp = (temp * cfg.anneal_rate).max(cfg.t_final);
    }

    let extent = mean_sq_norm(&solver.moving).sqrt().max(f64::MIN_POSITIVE);
    let (mut prev_change, mut prev_rate) = (None, 1.0f64);
    for _ in 0..cfg.final_iters {
        let step = solver.step(&transform, cfg.t_final, col_scale.as_deref())?;
        iterations += 1;
        let change = (step.transform.linear - transform.linear)
            .amax()
            .max((step.transform.translation - transform.translation).amax() / extent);
        transform = step.transform;
        col_scale = Some(step.col_scale);
        // Geometric tail estimate of the distance still to go.
        let latest = prev_change.map_or(1.0, |p: f64| if p > 0.0 { change / p } else { 0.0 });
        let rate = latest.max(prev_rate);
        (prev_change, prev_rate) = (Some(change), latest);
        if rate < 1.0 && change * rate / (1.0 - rate) <= cfg.final_tol && change <= cfg.final_tol {
            break;
        }
    }

    let kernel = solver.assign(
        &transform_points(&transform, &solver.moving),
        cfg.t_final,
        col_scale.as_deref(),
    );
    let (final_cost, alpha_effective) = solver.cost(&kernel, &transform, cfg.t_final);
    let mu = kernel.to_match_matrix();

    // p ↦ A (p − c_m) + t + c_f
    let world = AffineTransform::new(transform.linear, transform.translation + cf - transform.linear * cm);
    let params = decompose_affine(&world)?;
    Ok(RpmResult {
        transform: world,
        params,
        final_cost,
        temperatures_run,
        iterations,
        inlier_fraction_moving: mu.inlier_fraction_moving(),
        r#match: mu,
        t_init,
        beta,
        alpha_effective,
    })
}
