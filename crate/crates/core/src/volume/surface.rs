use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

use super::MaskVolume;

const FACE_NEIGHBOURS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// World centres of foreground voxels with at least one background face
/// neighbour (outside the grid counts as background), in storage order.
pub fn extract_surface(v: &MaskVolume) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut any = false;
    v.for_each_foreground(|i, j, k| {
        any = true;
        let (ii, jj, kk) = (i as isize, j as isize, k as isize);
        let exposed = FACE_NEIGHBOURS
            .iter()
            .any(|d| !v.get_or_background(ii + d[0], jj + d[1], kk + d[2]));
        if exposed {
            points.push(v.grid.world(i, j, k));
        }
    });
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(PointCloud::new(points, "surface"))
}

/// Farthest-point subsample to at most `n` points.
///
/// The seed picks a random probe point; sampling starts from the point
/// farthest from the probe, so the first pick is always an extreme point.
/// Ties go to the lowest index. Output keeps the input order.
pub fn subsample_fps(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidParameter("subsample size must be at least 1".into()));
    }
    let pts = &cloud.points;
    if pts.len() <= n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = pts[rng.gen_range(0..pts.len())];

    let mut first = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = (p - probe).norm_squared();
        if d > best {
            best = d;
            first = i;
        }
    }

    let mut selected = vec![false; pts.len()];
    let mut min_dist = vec![f64::INFINITY; pts.len()];
    let mut current = first;
    for _ in 0..n {
        selected[current] = true;
        let c = pts[current];
        let mut next = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = (p - c).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > far {
                far = min_dist[i];
                next = i;
            }
        }
        if next == usize::MAX {
            break;
        }
        current = next;
    }

    let points = pts
        .iter()
        .zip(&selected)
        .filter_map(|(p, &s)| s.then_some(*p))
        .collect();
    Ok(PointCloud::new(points, cloud.frame_label.clone()))
}
