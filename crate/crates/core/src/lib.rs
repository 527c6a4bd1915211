//! Affine point-set registration of organ masks.
//!
//! Masks become surface point clouds, robust point matching recovers the
//! affine transform between them, and overlap / surface-distance metrics score
//! the result. Image-level loss functions for segmentation networks live in
//! [`losses`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod phantom;
pub mod rpm;
pub mod spatial;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{
    apply_transform, compose_affine, decompose_affine, invert_transform, AffineParams, AffineTransform, Axis, Point3,
    PointCloud,
};
pub use metrics::{asd, dsc, param_errors, EvalReport, ParamErrors};
pub use rpm::{
    rpm_cost, rpm_solve, rpm_solve_in_fov, softassign, update_affine, visible_points, MatchMatrix, RpmConfig, RpmResult,
};
pub use volume::{
    crop_fov, extract_surface, resample_isotropic, subsample_fps, warp_mask, FovShape, FovSpec, Grid, MaskVolume,
};
