//! Binary mask volumes on a regular grid.
//!
//! World coordinate of voxel `(i, j, k)` is `origin + (i, j, k) ⊙ spacing`
//! (the voxel centre). Voxels are stored x-fastest. Out-of-bounds samples
//! are background everywhere in this module.

mod metaimage;
mod points_io;
mod surface;

pub use metaimage::{read_mask, read_raster, write_mask, write_raster, ElementType, Raster};
pub use points_io::{read_points_csv, write_points_csv};
pub use surface::{extract_surface, subsample_fps};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, Point3};

/// Radius of the simulated CBCT field of view, mm.
pub const DEFAULT_FOV_RADIUS_MM: f64 = 125.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// A grid of `dims` voxels whose centre is at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -((dims[a] as f64) - 1.0) * 0.5 * spacing[a]);
        Self::new(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Point3 {
        Point3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn continuous_index(&self, p: &Point3) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// Nearest voxel to a world point, `None` when outside the grid.
    pub fn nearest_voxel(&self, p: &Point3) -> Option<[usize; 3]> {
        nearest_in_bounds(self.continuous_index(p), self.dims)
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self == other
    }

    /// Index-space affine map `reference index -> continuous index in self`
    /// for world points pulled back through `world_map`.
    fn index_map_from(&self, reference: &Grid, world_map: &AffineTransform) -> (Matrix3<f64>, Vector3<f64>) {
        let ref_scale = Matrix3::from_diagonal(&Vector3::from(reference.spacing));
        let inv_scale = Matrix3::from_diagonal(&Vector3::from(self.spacing.map(|s| 1.0 / s)));
        let ref_origin = Vector3::from(reference.origin);
        let own_origin = Vector3::from(self.origin);
        let m = inv_scale * world_map.linear * ref_scale;
        let b = inv_scale * (world_map.linear * ref_origin + world_map.translation - own_origin);
        (m, b)
    }
}

#[inline]
fn nearest_in_bounds(c: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (c[a] + 0.5).floor();
        if !(n >= 0.0 && n < dims[a] as f64) {
            return None;
        }
        out[a] = n as usize;
    }
    Some(out)
}

/// A binary (0/1) voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub grid: Grid,
    pub voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(grid: Grid, voxels: Vec<u8>) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} voxels for a grid of {}",
                voxels.len(),
                grid.len()
            )));
        }
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParameter(format!("mask voxel value {v} is not 0/1")));
        }
        Ok(Self { grid, voxels })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            voxels: vec![0; grid.len()],
            grid,
        }
    }

    /// Fills from a predicate on voxel indices.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut voxels = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    voxels.push(f(i, j, k) as u8);
                }
            }
        }
        Self { grid, voxels }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels[self.grid.linear_index(i, j, k)] != 0
    }

    /// Like [`get`](Self::get) but out-of-bounds (including negative) indices are background.
    #[inline]
    pub fn get_or_background(&self, i: isize, j: isize, k: isize) -> bool {
        let d = self.grid.dims;
        if i < 0 || j < 0 || k < 0 || i as usize >= d[0] || j as usize >= d[1] || k as usize >= d[2] {
            return false;
        }
        self.get(i as usize, j as usize, k as usize)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.grid.linear_index(i, j, k);
        self.voxels[idx] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    /// World-coordinate mean of foreground voxel centres.
    pub fn centroid(&self) -> Option<Point3> {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        self.for_each_foreground(|i, j, k| {
            sum += self.grid.world(i, j, k).coords;
            n += 1;
        });
        (n > 0).then(|| Point3::from(sum / n as f64))
    }

    pub fn for_each_foreground(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [nx, ny, _] = self.grid.dims;
        for (idx, _) in self.voxels.iter().enumerate().filter(|(_, &v)| v != 0) {
            f(idx % nx, (idx / nx) % ny, idx / (nx * ny));
        }
    }

    /// Inclusive index bounds of the foreground, `None` for an empty mask.
    pub fn foreground_bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        self.for_each_foreground(|i, j, k| {
            any = true;
            for (a, v) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        });
        any.then_some((lo, hi))
    }

    /// Whether every foreground voxel of `self` is also foreground in `other` (same grid).
    pub fn is_subset_of(&self, other: &MaskVolume) -> bool {
        self.grid == other.grid && self.voxels.iter().zip(&other.voxels).all(|(&a, &b)| a == 0 || b != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FovShape {
    /// Infinite cylinder along z; axial (xy) distance is tested.
    CylinderZ,
    Sphere,
}

impl std::str::FromStr for FovShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cylinder" | "cylinder-z" => Ok(FovShape::CylinderZ),
            "sphere" => Ok(FovShape::Sphere),
            other => Err(Error::InvalidParameter(format!(
                "unknown FOV shape `{other}` (expected cylinder or sphere)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovSpec {
    pub shape: FovShape,
    pub center: Point3,
    pub radius: f64,
}

impl FovSpec {
    pub fn new(shape: FovShape, center: Point3, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "FOV radius must be positive, got {radius}"
            )));
        }
        if center.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("FOV centre must be finite".into()));
        }
        Ok(Self { shape, center, radius })
    }

    /// Cylinder of the default 125 mm radius.
    pub fn cylinder(center: Point3) -> Self {
        Self {
            shape: FovShape::CylinderZ,
            center,
            radius: DEFAULT_FOV_RADIUS_MM,
        }
    }

    /// The same region shrunk by `margin` mm.
    pub fn eroded(&self, margin: f64) -> Result<Self> {
        Self::new(self.shape, self.center, self.radius - margin)
    }

    #[inline]
    pub fn contains(&self, p: &Point3) -> bool {
        let d = p - self.center;
        let r2 = match self.shape {
            FovShape::CylinderZ => d.x * d.x + d.y * d.y,
            FovShape::Sphere => d.norm_squared(),
        };
        r2 <= self.radius * self.radius
    }
}

/// Nearest-neighbour resampling onto an isotropic grid covering the same
/// physical extent (voxel cells, not just centres).
pub fn resample_isotropic(v: &MaskVolume, spacing_mm: f64) -> Result<MaskVolume> {
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "resample spacing must be positive, got {spacing_mm}"
        )));
    }
    let g = &v.grid;
    if g.spacing.iter().all(|&s| s == spacing_mm) {
        return Ok(v.clone());
    }
    let mut dims = [0usize; 3];
    let mut origin = [0f64; 3];
    for a in 0..3 {
        let extent = g.dims[a] as f64 * g.spacing[a];
        dims[a] = ((extent / spacing_mm).round() as usize).max(1);
        origin[a] = g.origin[a] - 0.5 * g.spacing[a] + 0.5 * spacing_mm;
    }
    let target = Grid::new(dims, [spacing_mm; 3], origin)?;
    Ok(sample_onto(v, &AffineTransform::identity(), &target, false))
}

/// Keeps foreground voxels whose centres lie inside the field of view.
pub fn crop_fov(v: &MaskVolume, fov: &FovSpec) -> MaskVolume {
    let mut out = v.clone();
    let g = v.grid;
    let [nx, ny, _] = g.dims;
    for (idx, voxel) in out.voxels.iter_mut().enumerate() {
        if *voxel != 0 {
            let p = g.world(idx % nx, (idx / nx) % ny, idx / (nx * ny));
            if !fov.contains(&p) {
                *voxel = 0;
            }
        }
    }
    out
}

/// Resamples `v` through `t` onto the `reference` grid: the output voxel at
/// world point `p` is the nearest input voxel to `t⁻¹(p)`.
pub fn warp_mask(v: &MaskVolume, t: &AffineTransform, reference: &Grid) -> Result<MaskVolume> {
    let inverse = t.inverse()?;
    Ok(sample_onto(v, &inverse, reference, true))
}

/// Nearest-neighbour pull-back sampling: `out(p) = v(pullback(p))`.
fn sample_onto(v: &MaskVolume, pullback: &AffineTransform, target: &Grid, clip_to_foreground: bool) -> MaskVolume {
    let mut out = MaskVolume::empty(*target);
    let Some((lo, hi)) = v.foreground_bounds() else {
        return out;
    };
    let (m, b) = v.grid.index_map_from(target, pullback);

    // Only target voxels whose pre-image can land in the input's foreground box
    // need evaluating.
    let (t_lo, t_hi) = if clip_to_foreground {
        match target_box(v, &lo, &hi, pullback, target) {
            Some(bx) => bx,
            None => return out,
        }
    } else {
        ([0; 3], [target.dims[0] - 1, target.dims[1] - 1, target.dims[2] - 1])
    };

    for k in t_lo[2]..=t_hi[2] {
        for j in t_lo[1]..=t_hi[1] {
            for i in t_lo[0]..=t_hi[0] {
                let (x, y, z) = (i as f64, j as f64, k as f64);
                let c = [
                    m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)] * z + b[0],
                    m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)] * z + b[1],
                    m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)] * z + b[2],
                ];
                if let Some([si, sj, sk]) = nearest_in_bounds(c, v.grid.dims) {
                    if v.get(si, sj, sk) {
                        out.set(i, j, k, true);
                    }
                }
            }
        }
    }
    out
}

/// Conservative index box in `target` containing every voxel whose pull-back
/// can round into the input foreground box `[lo, hi]`.
fn target_box(
    v: &MaskVolume,
    lo: &[usize; 3],
    hi: &[usize; 3],
    pullback: &AffineTransform,
    target: &Grid,
) -> Option<([usize; 3], [usize; 3])> {
    let forward = pullback.inverse().ok()?;
    let mut t_min = [f64::INFINITY; 3];
    let mut t_max = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let idx = [0, 1, 2].map(|a| {
            if corner >> a & 1 == 0 {
                lo[a] as f64 - 1.0
            } else {
                hi[a] as f64 + 1.0
            }
        });
        let world = Point3::new(
            v.grid.origin[0] + idx[0] * v.grid.spacing[0],
            v.grid.origin[1] + idx[1] * v.grid.spacing[1],
            v.grid.origin[2] + idx[2] * v.grid.spacing[2],
        );
        let c = target.continuous_index(&forward.apply(&world));
        for a in 0..3 {
            t_min[a] = t_min[a].min(c[a]);
            t_max[a] = t_max[a].max(c[a]);
        }
    }
    let mut out_lo = [0usize; 3];
    let mut out_hi = [0usize; 3];
    for a in 0..3 {
        let lo_f = (t_min[a] - 1.0).floor().max(0.0);
        let hi_f = (t_max[a] + 1.0).ceil().min(target.dims[a] as f64 - 1.0);
        if !(lo_f <= hi_f) {
            return None;
        }
        out_lo[a] = lo_f as usize;
        out_hi[a] = hi_f as usize;
    }
    Some((out_lo, out_hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Grid {
        Grid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn resample_identity_and_empty() {
        let g = unit_grid(6);
        let v = MaskVolume::from_fn(g, |i, j, k| (i + 2 * j + 3 * k) % 4 == 0);
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);

        let coarse = Grid::new([5, 4, 3], [2.0, 2.0, 3.0], [1.0, -2.0, 0.5]).unwrap();
        let out = resample_isotropic(&MaskVolume::empty(coarse), 1.0).unwrap();
        assert_eq!(out.grid.dims, [10, 8, 9]);
        assert_eq!(out.count(), 0);
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn resample_two_mm_cube_by_brute_force() {
        let g = Grid::new([14; 3], [2.0; 3], [-13.0; 3]).unwrap();
        let v = MaskVolume::from_fn(g, |i, j, k| [i, j, k].iter().all(|&c| (2..12).contains(&c)));
        assert_eq!(v.count(), 1000);
        let out = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(out.grid.spacing, [1.0; 3]);

        // Oracle: nearest input voxel centre for every output centre, by exhaustive search.
        let mut expected = 0usize;
        for k in 0..out.grid.dims[2] {
            for j in 0..out.grid.dims[1] {
                for i in 0..out.grid.dims[0] {
                    let p = out.grid.world(i, j, k);
                    let mut best = (f64::INFINITY, false);
                    for kk in 0..14 {
                        for jj in 0..14 {
                            for ii in 0..14 {
                                let q = g.world(ii, jj, kk);
                                let d = (p - q).norm_squared();
                                if d < best.0 {
                                    best = (d, v.get(ii, jj, kk));
                                }
                            }
                        }
                    }
                    if best.1 {
                        expected += 1;
                    }
                    assert_eq!(out.get(i, j, k), best.1, "voxel ({i},{j},{k})");
                }
            }
        }
        assert_eq!(out.count(), expected);
        assert_eq!(expected, 20 * 20 * 20);
    }

    #[test]
    fn crop_geometry_at_125mm() {
        let g = Grid::new([300, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut v = MaskVolume::empty(g);
        v.set(130, 0, 0, true);
        v.set(120, 0, 0, true);
        let fov = FovSpec::cylinder(Point3::new(0.0, 0.0, 40.0));
        let out = crop_fov(&v, &fov);
        assert!(!out.get(130, 0, 0));
        assert!(out.get(120, 0, 0));
        assert!(out.is_subset_of(&v));
        assert_eq!(crop_fov(&out, &fov), out);
    }

    #[test]
    fn crop_large_radius_is_identity() {
        let g = unit_grid(8);
        let v = MaskVolume::from_fn(g, |i, j, _| i > j);
        let fov = FovSpec::new(FovShape::Sphere, Point3::new(3.0, 3.0, 3.0), 100.0).unwrap();
        assert_eq!(crop_fov(&v, &fov), v);
        assert!(FovSpec::new(FovShape::Sphere, Point3::origin(), 0.0).is_err());
    }

    #[test]
    fn sphere_and_cylinder_differ_along_z() {
        let g = Grid::new([1, 1, 11], [1.0; 3], [0.0, 0.0, -5.0]).unwrap();
        let v = MaskVolume::from_fn(g, |_, _, _| true);
        let cyl = FovSpec::new(FovShape::CylinderZ, Point3::origin(), 2.0).unwrap();
        let sph = FovSpec::new(FovShape::Sphere, Point3::origin(), 2.0).unwrap();
        assert_eq!(crop_fov(&v, &cyl).count(), 11);
        assert_eq!(crop_fov(&v, &sph).count(), 5);
    }

    #[test]
    fn warp_identity_and_one_voxel_shift() {
        let g = Grid::new([7, 6, 5], [1.5, 2.0, 2.5], [3.0, -1.0, 10.0]).unwrap();
        let v = MaskVolume::from_fn(g, |i, j, k| {
            (2..5).contains(&i) && (1..4).contains(&j) && (1..4).contains(&k)
        });
        assert_eq!(warp_mask(&v, &AffineTransform::identity(), &g).unwrap(), v);

        let t = AffineTransform::from_translation(Vector3::new(1.5, 0.0, 0.0));
        let shifted = warp_mask(&v, &t, &g).unwrap();
        // Oracle: inverse-map every reference voxel by hand.
        for k in 0..5 {
            for j in 0..6 {
                for i in 0..7 {
                    let expected = i >= 1 && v.get(i - 1, j, k);
                    assert_eq!(shifted.get(i, j, k), expected);
                }
            }
        }
    }

    #[test]
    fn warp_out_of_grid_is_empty() {
        let g = unit_grid(5);
        let v = MaskVolume::from_fn(g, |i, j, k| i == 2 && j == 2 && k == 2);
        let t = AffineTransform::from_translation(Vector3::new(100.0, 0.0, 0.0));
        assert!(warp_mask(&v, &t, &g).unwrap().is_empty_mask());
        let singular = AffineTransform::new(Matrix3::zeros(), Vector3::zeros());
        assert!(matches!(
            warp_mask(&v, &singular, &g),
            Err(Error::SingularTransform { .. })
        ));
    }

    #[test]
    fn warp_box_clipping_matches_full_scan() {
        let g = Grid::new([20, 18, 16], [1.0, 1.2, 0.8], [-3.0, 2.0, 1.0]).unwrap();
        let v = MaskVolume::from_fn(g, |i, j, k| {
            let (x, y, z) = (i as f64 - 9.0, j as f64 - 8.0, k as f64 - 7.0);
            x * x / 30.0 + y * y / 20.0 + z * z / 15.0 <= 1.0
        });
        let t = AffineTransform::new(
            Matrix3::new(1.05, 0.1, -0.05, 0.02, 0.95, 0.08, -0.1, 0.04, 1.1),
            Vector3::new(1.3, -0.7, 2.2),
        );
        let clipped = warp_mask(&v, &t, &g).unwrap();
        let full = sample_onto(&v, &t.inverse().unwrap(), &g, false);
        assert_eq!(clipped, full);
        assert!(clipped.count() > 0);
    }
}
