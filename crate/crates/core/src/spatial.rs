//! Exact nearest-neighbour queries over a uniform cell grid.
//!
//! Voxel-centre clouds have many points sharing each axis value, which trips
//! up median-split kd-trees; bucketing into cubic cells has no such issue.

use crate::geometry::Point3;

pub struct NearestIndex {
    points: Vec<Point3>,
    /// Point indices grouped by cell; `cell_start[c]..cell_start[c + 1]`.
    order: Vec<u32>,
    cell_start: Vec<u32>,
    lo: Point3,
    cell: f64,
    dims: [i64; 3],
}

impl NearestIndex {
    /// Panics if `points` is empty.
    pub fn new(points: &[Point3]) -> Self {
        assert!(!points.is_empty(), "nearest-neighbour index needs at least one point");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = hi - lo;
        let max_extent = extent.max();
        // A few points per occupied cell for surface-like clouds.
        let per_axis = (1.5 * (points.len() as f64).cbrt()).ceil().max(1.0);
        let cell = if max_extent > 0.0 { max_extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as i64 + 1).max(1));

        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0u32; n_cells + 1];
        let cell_of: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor() as i64).clamp(0, dims[a] - 1));
                (c[0] + dims[0] * (c[1] + dims[1] * c[2])) as usize
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self {
            points: points.to_vec(),
            order,
            cell_start: counts,
            lo,
            cell,
            dims,
        }
    }

    /// Squared distance to, and index of, the nearest indexed point.
    /// Ties resolve to the lowest point index.
    pub fn nearest(&self, q: &Point3) -> (f64, usize) {
        let center = [0, 1, 2].map(|a| ((q[a] - self.lo[a]) / self.cell).floor() as i64);
        // Shells closer than this cannot intersect the grid.
        let mut r = 0i64;
        for (c, d) in center.iter().zip(&self.dims) {
            r = r.max(-c).max(c - (d - 1));
        }
        let max_r = (0..3)
            .map(|a| center[a].abs().max((center[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap();

        let mut best = (f64::INFINITY, usize::MAX);
        while r <= max_r {
            self.scan_shell(q, center, r, &mut best);
            // Every unscanned point lies outside the (2r+1)^3 cell block.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                let block_lo = self.lo[a] + (center[a] - r) as f64 * self.cell;
                let block_hi = self.lo[a] + (center[a] + r + 1) as f64 * self.cell;
                bound = bound.min(q[a] - block_lo).min(block_hi - q[a]);
            }
            if best.0.is_finite() && bound >= 0.0 && best.0 < bound * bound {
                break;
            }
            r += 1;
        }
        best
    }

    pub fn nearest_distance(&self, q: &Point3) -> f64 {
        self.nearest(q).0.sqrt()
    }

    fn scan_shell(&self, q: &Point3, c: [i64; 3], r: i64, best: &mut (f64, usize)) {
        let range = |a: usize| ((c[a] - r).max(0), (c[a] + r).min(self.dims[a] - 1));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for z in z0..=z1 {
            let z_edge = (z - c[2]).abs() == r;
            for y in y0..=y1 {
                let yz_edge = z_edge || (y - c[1]).abs() == r;
                if yz_edge {
                    for x in x0..=x1 {
                        self.scan_cell(q, x, y, z, best);
                    }
                } else {
                    // Interior rows of a shell (r > 0 here) only touch its two x faces.
                    for x in [c[0] - r, c[0] + r] {
                        if x >= x0 && x <= x1 {
                            self.scan_cell(q, x, y, z, best);
                        }
                    }
                }
            }
        }
    }

    #[inline]
    fn scan_cell(&self, q: &Point3, x: i64, y: i64, z: i64, best: &mut (f64, usize)) {
        let c = (x + self.dims[0] * (y + self.dims[1] * z)) as usize;
        let (s, e) = (self.cell_start[c] as usize, self.cell_start[c + 1] as usize);
        for &i in &self.order[s..e] {
            let i = i as usize;
            let d = (self.points[i] - q).norm_squared();
            if d < best.0 || (d == best.0 && i < best.1) {
                *best = (d, i);
            }
        }
    }
}
