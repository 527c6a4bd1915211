//! Synthetic superellipsoid masks and known-transform registration cases.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_affine, AffineParams, AffineTransform, Point3};
use crate::volume::{crop_fov, extract_surface, warp_mask, FovShape, FovSpec, Grid, MaskVolume};

/// Voxels kept free between the phantom and the grid border.
pub const MARGIN_VOXELS: usize = 2;

const PERTURB_TERMS: usize = 6;

/// Largest seed TOML can carry as an integer.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// A superellipsoid `Σ |(p_i − c_i) / a_i|^e ≤ 1` on a grid centred at the
/// world origin, optionally with a smooth seeded radial perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub semi_axes: [f64; 3],
    pub exponent: f64,
    pub center: [f64; 3],
    pub grid_dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub perturb_amp: f64,
}

impl PhantomSpec {
    /// Liver-sized random phantom on a 1 mm grid large enough to hold it under
    /// any transform drawn by [`random_affine_params`].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            semi_axes: [
                rng.gen_range(55.0..75.0),
                rng.gen_range(45.0..60.0),
                rng.gen_range(35.0..50.0),
            ],
            exponent: rng.gen_range(2.5..3.5),
            center: [0.0; 3],
            grid_dims: [304, 264, 240],
            spacing: [1.0; 3],
            seed: rng.gen_range(0..=MAX_SEED),
            perturb_amp: 10.0,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::centered(self.grid_dims, self.spacing).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad(format!("semi-axes must be positive, got {:?}", self.semi_axes));
        }
        if !(self.exponent.is_finite() && self.exponent >= 1.0) {
            return bad(format!("exponent must be at least 1, got {}", self.exponent));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return bad("center must be finite".into());
        }
        if self.seed > MAX_SEED {
            return bad(format!("seed must not exceed {MAX_SEED}, got {}", self.seed));
        }
        if !(self.perturb_amp.is_finite() && self.perturb_amp >= 0.0) {
            return bad(format!("perturb_amp must be nonnegative, got {}", self.perturb_amp));
        }
        let grid = self.grid()?;
        let (lo, hi) = self.bounds();
        if !inside_with_margin(&grid, &lo, &hi) {
            return bad(format!(
                "phantom spans {lo:?}..{hi:?} mm, which does not fit the grid with a {MARGIN_VOXELS}-voxel margin"
            ));
        }
        Ok(())
    }

    /// Axis-aligned bounds of the phantom including the perturbation.
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|a| self.center[a] - self.semi_axes[a] - self.perturb_amp);
        let hi = std::array::from_fn(|a| self.center[a] + self.semi_axes[a] + self.perturb_amp);
        (lo, hi)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }
}

fn inside_with_margin(grid: &Grid, lo: &[f64; 3], hi: &[f64; 3]) -> bool {
    (0..3).all(|a| {
        let first = grid.origin[a] + MARGIN_VOXELS as f64 * grid.spacing[a];
        let last = grid.origin[a] + (grid.dims[a] as f64 - 1.0 - MARGIN_VOXELS as f64) * grid.spacing[a];
        lo[a] >= first && hi[a] <= last
    })
}

/// Smooth function on directions with values in `[-1, 1]`.
struct RadialPerturbation {
    freqs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
    weights: Vec<f64>,
}

impl RadialPerturbation {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freqs = Vec::with_capacity(PERTURB_TERMS);
        let mut phases = Vec::with_capacity(PERTURB_TERMS);
        let mut weights = Vec::with_capacity(PERTURB_TERMS);
        for _ in 0..PERTURB_TERMS {
            let dir = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 0.1 && n <= 1.0 {
                    break v / n;
                }
            };
            freqs.push(dir * rng.gen_range(1.5..8.0));
            phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
            weights.push(rng.gen_range(0.5..1.0));
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { freqs, phases, weights }
    }

    fn eval(&self, unit: &Vector3<f64>) -> f64 {
        self.freqs
            .iter()
            .zip(&self.phases)
            .zip(&self.weights)
            .map(|((f, p), w)| w * (f.dot(unit) + p).sin())
            .sum()
    }
}

/// Rasterizes the phantom: a voxel is foreground when its centre lies inside.
pub fn generate_phantom(s: &PhantomSpec) -> Result<MaskVolume> {
    s.validate()?;
    let grid = s.grid()?;
    let (lo, hi) = s.bounds();
    let c = Vector3::from(s.center);
    let inv_a = s.semi_axes.map(|a| 1.0 / a);
    let e = s.exponent;
    let perturb = (s.perturb_amp > 0.0).then(|| RadialPerturbation::new(s.seed));

    let first = grid
        .continuous_index(&Point3::from(lo))
        .map(|v| v.floor().max(0.0) as usize);
    let last = grid.continuous_index(&Point3::from(hi)).map(|v| v.ceil() as usize);
    let mut mask = MaskVolume::empty(grid);
    for k in first[2]..=last[2].min(grid.dims[2] - 1) {
        for j in first[1]..=last[1].min(grid.dims[1] - 1) {
            for i in first[0]..=last[0].min(grid.dims[0] - 1) {
                let d = grid.world(i, j, k).coords - c;
                let gauge_e: f64 = (0..3).map(|a| (d[a] * inv_a[a]).abs().powf(e)).sum();
                let inside = match &perturb {
                    None => gauge_e <= 1.0,
                    Some(p) => {
                        let r = d.norm();
                        if r == 0.0 {
                            true
                        } else {
                            // Boundary radius along d is r / gauge, shifted by the perturbation.
                            let gauge = gauge_e.powf(1.0 / e);
                            r <= r / gauge + s.perturb_amp * p.eval(&(d / r))
                        }
                    }
                };
                if inside {
                    mask.set(i, j, k, true);
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct TestCase {
    pub fixed: MaskVolume,
    pub moving: MaskVolume,
    pub gt_transform: AffineTransform,
}

/// Moving is the phantom; fixed is the phantom warped by `gt` and, when
/// `fov` is given, cropped to it.
pub fn make_test_case(s: &PhantomSpec, gt: &AffineParams, fov: Option<&FovSpec>) -> Result<TestCase> {
    let moving = generate_phantom(s)?;
    let gt_transform = compose_affine(gt)?;
    let (lo, hi) = s.bounds();
    let mut wlo = [f64::INFINITY; 3];
    let mut whi = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let p = Point3::from(std::array::from_fn(
            |a| if corner >> a & 1 == 0 { lo[a] } else { hi[a] },
        ));
        let q = gt_transform.apply(&p);
        for a in 0..3 {
            wlo[a] = wlo[a].min(q[a]);
            whi[a] = whi[a].max(q[a]);
        }
    }
    if !inside_with_margin(&moving.grid, &wlo, &whi) {
        return Err(Error::Spec(format!(
            "warped phantom spans {wlo:?}..{whi:?} mm and leaves the grid"
        )));
    }
    let mut fixed = warp_mask(&moving, &gt_transform, &moving.grid)?;
    if let Some(fov) = fov {
        fixed = crop_fov(&fixed, fov);
    }
    Ok(TestCase {
        fixed,
        moving,
        gt_transform,
    })
}

/// Ranges for random ground-truth transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub scale: (f64, f64),
    pub shear_abs: f64,
    pub translation_abs: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            scale: (0.9, 1.1),
            shear_abs: 0.1,
            translation_abs: 30.0,
        }
    }
}

pub fn random_affine_params(seed: u64, ranges: &AffineRanges) -> AffineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s0, s1) = ranges.scale;
    let mut v = [0.0; 12];
    for x in &mut v[0..3] {
        *x = rng.gen_range(s0..=s1);
    }
    for x in &mut v[3..9] {
        *x = rng.gen_range(-ranges.shear_abs..=ranges.shear_abs);
    }
    for x in &mut v[9..12] {
        *x = rng.gen_range(-ranges.translation_abs..=ranges.translation_abs);
    }
    AffineParams::from_array(v)
}

/// Fraction of `mask`'s surface voxels whose centres fall outside `fov`.
pub fn surface_fraction_outside(mask: &MaskVolume, fov: &FovSpec) -> Result<f64> {
    let surface = extract_surface(mask)?;
    let outside = surface.points.iter().filter(|p| !fov.contains(p)).count();
    Ok(outside as f64 / surface.len() as f64)
}

/// A z-aligned cylinder of `radius`, shifted from the mask centroid along
/// `direction` (in the xy-plane) until it leaves `target` of the mask's
/// surface voxels outside.
pub fn truncating_cylinder(mask: &MaskVolume, radius: f64, target: f64, direction: [f64; 2]) -> Result<FovSpec> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidParameter(format!(
            "target fraction must lie in [0, 1), got {target}"
        )));
    }
    let dir_norm = direction[0].hypot(direction[1]);
    if !(dir_norm > 0.0) {
        return Err(Error::InvalidParameter("offset direction must be nonzero".into()));
    }
    let u = [direction[0] / dir_norm, direction[1] / dir_norm];
    let c = mask.centroid().ok_or(Error::EmptyMask)?;
    let surface = extract_surface(mask)?;
    let fov_at = |offset: f64| {
        FovSpec::new(
            FovShape::CylinderZ,
            Point3::new(c.x + offset * u[0], c.y + offset * u[1], c.z),
            radius,
        )
    };
    let frac = |offset: f64| -> Result<f64> {
        let fov = fov_at(offset)?;
        Ok(surface.points.iter().filter(|p| !fov.contains(p)).count() as f64 / surface.len() as f64)
    };
    let (mut lo, mut hi) = (0.0, 2.0 * radius);
    if frac(lo)? >= target {
        return fov_at(lo);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if frac(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    fov_at(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::gamma;

    fn sphere_spec() -> PhantomSpec {
        PhantomSpec {
            semi_axes: [20.0; 3],
            exponent: 2.0,
            center: [0.0; 3],
            grid_dims: [50, 50, 50],
            spacing: [1.0; 3],
            seed: 0,
            perturb_amp: 0.0,
        }
    }

    fn superellipsoid_volume(a: [f64; 3], e: f64) -> f64 {
        8.0 * a[0] * a[1] * a[2] * gamma(1.0 + 1.0 / e).powi(3) / gamma(1.0 + 3.0 / e)
    }

    #[test]
    fn sphere_volume() {
        let count = generate_phantom(&sphere_spec()).unwrap().count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 20f64.powi(3);
        assert!((superellipsoid_volume([20.0; 3], 2.0) - analytic).abs() < 1e-9 * analytic);
        assert!((count - analytic).abs() <= 0.02 * analytic, "{count} vs {analytic}");
    }

    #[test]
    fn superellipsoid_volumes() {
        for (a, e) in [
            ([30.0, 22.0, 15.0], 2.7),
            ([25.0, 25.0, 18.0], 4.0),
            ([15.0, 20.0, 24.0], 1.5),
        ] {
            let spec = PhantomSpec {
                semi_axes: a,
                exponent: e,
                center: [1.3, -0.7, 0.4],
                grid_dims: [70, 70, 70],
                ..sphere_spec()
            };
            let count = generate_phantom(&spec).unwrap().count() as f64;
            let analytic = superellipsoid_volume(a, e);
            assert!(
                (count - analytic).abs() <= 0.02 * analytic,
                "e={e}: {count} vs {analytic}"
            );
        }
    }

    #[test]
    fn deterministic_and_perturbation_changes_shape() {
        let a = generate_phantom(&sphere_spec()).unwrap();
        assert_eq!(a, generate_phantom(&sphere_spec()).unwrap());
        let p = PhantomSpec {
            perturb_amp: 2.0,
            seed: 9,
            ..sphere_spec()
        };
        let b = generate_phantom(&p).unwrap();
        assert_eq!(b, generate_phantom(&p).unwrap());
        assert_ne!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 10, ..p }).unwrap();
        assert_ne!(b, c);
    }

    #[test]
    fn oversized_phantom_is_rejected() {
        let spec = PhantomSpec {
            semi_axes: [30.0, 20.0, 20.0],
            ..sphere_spec()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
        let spec = PhantomSpec {
            semi_axes: [23.0, 20.0, 20.0],
            ..sphere_spec()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn toml_round_trip() {
        let spec = PhantomSpec::random(3);
        assert_eq!(PhantomSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
        assert!(PhantomSpec::from_toml_str("exponent = 2.0").is_err());
    }

    #[test]
    fn identity_case_is_bitwise_equal() {
        let case = make_test_case(&sphere_spec(), &AffineParams::identity(), None).unwrap();
        assert_eq!(case.fixed, case.moving);
        assert!(case.gt_transform.is_identity());
    }

    #[test]
    fn translation_shifts_centroid() {
        let spec = PhantomSpec {
            grid_dims: [90, 90, 90],
            perturb_amp: 1.5,
            seed: 4,
            ..sphere_spec()
        };
        let case = make_test_case(&spec, &AffineParams::translation(10.0, -5.0, 20.0), None).unwrap();
        let shift = case.fixed.centroid().unwrap() - case.moving.centroid().unwrap();
        assert!((shift - Vector3::new(10.0, -5.0, 20.0)).amax() <= 0.5, "{shift}");
    }

    #[test]
    fn warped_phantom_leaving_grid_is_rejected() {
        let r = make_test_case(&sphere_spec(), &AffineParams::translation(10.0, 0.0, 0.0), None);
        assert!(matches!(r, Err(Error::Spec(_))));
    }

    #[test]
    fn truncated_case_is_strict_subset() {
        let spec = PhantomSpec {
            semi_axes: [60.0, 50.0, 40.0],
            exponent: 3.0,
            grid_dims: [150, 130, 110],
            ..sphere_spec()
        };
        let gt = AffineParams::translation(3.0, 2.0, -1.0);
        let full = make_test_case(&spec, &gt, None).unwrap().fixed;
        let fov = truncating_cylinder(&full, 70.0, 0.3, [1.0, 0.0]).unwrap();
        let frac = surface_fraction_outside(&full, &fov).unwrap();
        assert!((frac - 0.3).abs() < 0.02, "{frac}");
        let truncated = make_test_case(&spec, &gt, Some(&fov)).unwrap().fixed;
        assert!(truncated.is_subset_of(&full));
        assert!(truncated.count() < full.count());
    }

    #[test]
    fn random_params_respect_ranges() {
        let r = AffineRanges::default();
        for seed in 0..50 {
            let p = random_affine_params(seed, &r);
            assert!(p.scales().iter().all(|s| (0.9..=1.1).contains(s)));
            assert!(p.shears().iter().all(|h| h.abs() <= 0.1));
            assert!(p.translations().iter().all(|d| d.abs() <= 30.0));
        }
        assert_eq!(random_affine_params(7, &r), random_affine_params(7, &r));
    }
}
