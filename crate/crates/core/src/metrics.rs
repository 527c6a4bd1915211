//! Overlap, surface-distance and transform-parameter error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineParams, PointCloud};
use crate::spatial::NearestIndex;
use crate::volume::{extract_surface, MaskVolume};

/// Absolute per-parameter differences, in [`AffineParams`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamErrors(pub AffineParams);

impl ParamErrors {
    pub fn to_array(&self) -> [f64; 12] {
        self.0.to_array()
    }

    pub fn max_scale(&self) -> f64 {
        self.0.scales().into_iter().fold(0.0, f64::max)
    }

    pub fn max_shear(&self) -> f64 {
        self.0.shears().into_iter().fold(0.0, f64::max)
    }

    pub fn max_translation(&self) -> f64 {
        self.0.translations().into_iter().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dsc: f64,
    pub asd_mm: f64,
    /// Present when a ground-truth transform was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_abs_errors: Option<ParamErrors>,
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid, b.grid)));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Sum of directed nearest-surface distances from `from` to `to`.
pub fn directed_surface_distance_sum(from: &PointCloud, to: &PointCloud) -> f64 {
    let index = NearestIndex::new(&to.points);
    from.points.iter().map(|p| index.nearest_distance(p)).sum()
}

/// Average symmetric surface distance in mm: both directed sums over the
/// total number of surface points.
pub fn asd(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    if a.grid.spacing != b.grid.spacing {
        return Err(Error::GridMismatch(format!(
            "spacing {:?} vs {:?}",
            a.grid.spacing, b.grid.spacing
        )));
    }
    let sa = extract_surface(a)?;
    let sb = extract_surface(b)?;
    Ok(surface_asd(&sa, &sb))
}

pub fn surface_asd(sa: &PointCloud, sb: &PointCloud) -> f64 {
    let total = directed_surface_distance_sum(sa, sb) + directed_surface_distance_sum(sb, sa);
    total / (sa.len() + sb.len()) as f64
}

pub fn param_errors(est: &AffineParams, gt: &AffineParams) -> ParamErrors {
    let (e, g) = (est.to_array(), gt.to_array());
    ParamErrors(AffineParams::from_array(std::array::from_fn(|i| (e[i] - g[i]).abs())))
}
