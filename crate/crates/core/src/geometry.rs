//! Affine transform algebra.
//!
//! Transforms act on world coordinates in millimetres as `T(p) = A p + t`.
//! The canonical parameterization is translation · scale · shear:
//!
//! ```text
//! | s_x        s_x h_xy   s_x h_xz   d_x |
//! | s_y h_yx   s_y        s_y h_yz   d_y |
//! | s_z h_zx   s_z h_zy   s_z        d_z |
//! ```
//!
//! so the scales sit on the diagonal of the linear part and each shear is an
//! off-diagonal entry divided by its row's scale.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

/// Diagonal entries (and determinants) at or below this magnitude are treated as zero.
pub const DEGENERACY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// An ordered set of points in world coordinates (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame_label: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame_label: impl Into<String>) -> Self {
        Self {
            points,
            frame_label: frame_label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.coords.iter().all(|c| c.is_finite()))
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p + offset).collect(),
            frame_label: self.frame_label.clone(),
        }
    }
}

/// `T(p) = linear * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { linear, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    pub fn is_identity(&self) -> bool {
        self.linear == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.linear * p.coords + self.translation)
    }

    /// The transform that applies `self` first and then `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        AffineTransform {
            linear: next.linear * self.linear,
            translation: next.linear * self.translation + next.translation,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.linear.determinant()
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        invert_transform(self)
    }

    pub fn to_document(&self) -> TransformDocument {
        let m = &self.linear;
        TransformDocument {
            matrix: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            units: MM.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("transform serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TransformDocument =
            serde_json::from_str(text).map_err(|e| Error::format("transform", e.to_string()))?;
        AffineTransform::try_from(doc)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

const MM: &str = "mm";

/// On-disk form of an [`AffineTransform`]: row-major `matrix`, `translation`,
/// and `units` (always `"mm"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformDocument {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub units: String,
}

impl TryFrom<TransformDocument> for AffineTransform {
    type Error = Error;

    fn try_from(doc: TransformDocument) -> Result<Self> {
        if doc.units != MM {
            return Err(Error::format(
                "units",
                format!("expected \"mm\", found {:?}", doc.units),
            ));
        }
        let m = doc.matrix;
        let t = AffineTransform::new(
            Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            Vector3::from(doc.translation),
        );
        if !t.is_finite() {
            return Err(Error::format("matrix", "non-finite entry"));
        }
        Ok(t)
    }
}

impl Serialize for AffineTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = TransformDocument::deserialize(d)?;
        AffineTransform::try_from(doc).map_err(serde::de::Error::custom)
    }
}

/// The twelve scale / shear / translation parameters of an affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineParams {
    pub s_x: f64,
    pub s_y: f64,
    pub s_z: f64,
    pub h_xy: f64,
    pub h_xz: f64,
    pub h_yx: f64,
    pub h_yz: f64,
    pub h_zx: f64,
    pub h_zy: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const NAMES: [&'static str; 12] = [
        "s_x", "s_y", "s_z", "h_xy", "h_xz", "h_yx", "h_yz", "h_zx", "h_zy", "d_x", "d_y", "d_z",
    ];

    pub fn identity() -> Self {
        Self::from_array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn translation(d_x: f64, d_y: f64, d_z: f64) -> Self {
        Self {
            d_x,
            d_y,
            d_z,
            ..Self::identity()
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.s_x, self.s_y, self.s_z, self.h_xy, self.h_xz, self.h_yx, self.h_yz, self.h_zx, self.h_zy, self.d_x,
            self.d_y, self.d_z,
        ]
    }

    pub fn from_array(v: [f64; 12]) -> Self {
        Self {
            s_x: v[0],
            s_y: v[1],
            s_z: v[2],
            h_xy: v[3],
            h_xz: v[4],
            h_yx: v[5],
            h_yz: v[6],
            h_zx: v[7],
            h_zy: v[8],
            d_x: v[9],
            d_y: v[10],
            d_z: v[11],
        }
    }

    pub fn scales(&self) -> [f64; 3] {
        [self.s_x, self.s_y, self.s_z]
    }

    pub fn shears(&self) -> [f64; 6] {
        [self.h_xy, self.h_xz, self.h_yx, self.h_yz, self.h_zx, self.h_zy]
    }

    pub fn translations(&self) -> [f64; 3] {
        [self.d_x, self.d_y, self.d_z]
    }

    pub fn compose(&self) -> Result<AffineTransform> {
        compose_affine(self)
    }
}

/// Builds `Translation · Scale · Shear` from the twelve parameters.
pub fn compose_affine(p: &AffineParams) -> Result<AffineTransform> {
    let values = p.to_array();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{} is not finite ({})",
            AffineParams::NAMES[i],
            values[i]
        )));
    }
    for (axis, s) in Axis::ALL.iter().zip(p.scales()) {
        if s.abs() <= DEGENERACY_EPS {
            return Err(Error::InvalidParameter(format!("scale on the {axis} axis is zero")));
        }
    }
    let linear = Matrix3::new(
        p.s_x,
        p.s_x * p.h_xy,
        p.s_x * p.h_xz,
        p.s_y * p.h_yx,
        p.s_y,
        p.s_y * p.h_yz,
        p.s_z * p.h_zx,
        p.s_z * p.h_zy,
        p.s_z,
    );
    Ok(AffineTransform::new(linear, Vector3::new(p.d_x, p.d_y, p.d_z)))
}

/// Reads scales off the diagonal and shears as row-normalized off-diagonals.
pub fn decompose_affine(t: &AffineTransform) -> Result<AffineParams> {
    if !t.is_finite() {
        return Err(Error::InvalidParameter("transform has non-finite entries".into()));
    }
    let a = &t.linear;
    for axis in Axis::ALL {
        let i = axis.index();
        if a[(i, i)].abs() <= DEGENERACY_EPS {
            return Err(Error::NonDecomposable(axis));
        }
    }
    let (s_x, s_y, s_z) = (a[(0, 0)], a[(1, 1)], a[(2, 2)]);
    Ok(AffineParams {
        s_x,
        s_y,
        s_z,
        h_xy: a[(0, 1)] / s_x,
        h_xz: a[(0, 2)] / s_x,
        h_yx: a[(1, 0)] / s_y,
        h_yz: a[(1, 2)] / s_y,
        h_zx: a[(2, 0)] / s_z,
        h_zy: a[(2, 1)] / s_z,
        d_x: t.translation.x,
        d_y: t.translation.y,
        d_z: t.translation.z,
    })
}

pub fn apply_transform(t: &AffineTransform, cloud: &PointCloud) -> Result<PointCloud> {
    if !t.is_finite() {
        return Err(Error::InvalidParameter("transform has non-finite entries".into()));
    }
    if !cloud.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "point cloud `{}` has non-finite coordinates",
            cloud.frame_label
        )));
    }
    if t.is_identity() {
        return Ok(cloud.clone());
    }
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        frame_label: cloud.frame_label.clone(),
    })
}

pub fn invert_transform(t: &AffineTransform) -> Result<AffineTransform> {
    let det = t.determinant();
    if !det.is_finite() || det.abs() <= DEGENERACY_EPS {
        return Err(Error::SingularTransform { det });
    }
    let inv = t.linear.try_inverse().ok_or(Error::SingularTransform { det })?;
    Ok(AffineTransform::new(inv, -(inv * t.translation)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn example_params() -> AffineParams {
        AffineParams {
            s_x: 2.0,
            s_y: 1.0,
            s_z: 0.5,
            h_xy: 0.3,
            d_x: 5.0,
            d_y: -3.0,
            d_z: 7.0,
            ..AffineParams::identity()
        }
    }

    #[test]
    fn compose_identity() {
        let t = compose_affine(&AffineParams::identity()).unwrap();
        assert!(t.is_identity());
    }

    #[test]
    fn compose_hand_expanded_example() {
        let t = compose_affine(&example_params()).unwrap();
        let expected = Matrix3::new(2.0, 0.6, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5);
        assert_relative_eq!(t.linear, expected, epsilon = 1e-15);
        assert_eq!(t.translation, Vector3::new(5.0, -3.0, 7.0));
    }

    #[test]
    fn compose_rejects_zero_scale_and_nan() {
        let p = AffineParams {
            s_x: 0.0,
            ..AffineParams::identity()
        };
        assert!(matches!(compose_affine(&p), Err(Error::InvalidParameter(_))));
        let p = AffineParams {
            h_zy: f64::NAN,
            ..AffineParams::identity()
        };
        assert!(matches!(compose_affine(&p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn decompose_identity_and_example() {
        assert_eq!(
            decompose_affine(&AffineTransform::identity()).unwrap(),
            AffineParams::identity()
        );
        let t = compose_affine(&example_params()).unwrap();
        let back = decompose_affine(&t).unwrap();
        // 2 * 0.3 / 2 is not exactly 0.3 in binary, so compare at ulp scale.
        for (a, b) in back.to_array().iter().zip(example_params().to_array()) {
            assert_relative_eq!(*a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn decompose_permutation_names_axis() {
        let t = AffineTransform::new(
            Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            Vector3::zeros(),
        );
        match decompose_affine(&t) {
            Err(Error::NonDecomposable(axis)) => assert_eq!(axis, Axis::X),
            other => panic!("expected non-decomposable, got {other:?}"),
        }
    }

    #[test]
    fn apply_examples() {
        let cloud = PointCloud::new(
            vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-0.0, 1e-300, 7.5)],
            "moving",
        );
        let same = apply_transform(&AffineTransform::identity(), &cloud).unwrap();
        assert_eq!(same, cloud);

        let shift = AffineTransform::from_translation(Vector3::new(10.0, 0.0, 0.0));
        let moved = apply_transform(&shift, &cloud).unwrap();
        assert_eq!(moved.points[0], Point3::new(11.0, 2.0, 3.0));
        assert_eq!(moved.len(), cloud.len());

        let t = compose_affine(&example_params()).unwrap();
        let p = t.apply(&Point3::new(1.0, 0.0, 0.0));
        assert_eq!(p, Point3::new(7.0, -3.0, 7.0));
    }

    #[test]
    fn apply_rejects_non_finite() {
        let cloud = PointCloud::new(vec![Point3::new(f64::INFINITY, 0.0, 0.0)], "bad");
        assert!(apply_transform(&AffineTransform::identity(), &cloud).is_err());
    }

    #[test]
    fn invert_examples() {
        assert!(invert_transform(&AffineTransform::identity()).unwrap().is_identity());
        let t = AffineTransform::from_translation(Vector3::new(5.0, -3.0, 7.0));
        let inv = invert_transform(&t).unwrap();
        assert_eq!(inv.translation, Vector3::new(-5.0, 3.0, -7.0));
        assert_eq!(inv.linear, Matrix3::identity());

        let singular = AffineTransform::new(Matrix3::zeros(), Vector3::zeros());
        assert!(matches!(
            invert_transform(&singular),
            Err(Error::SingularTransform { .. })
        ));
    }

    #[test]
    fn then_matches_sequential_application() {
        let a = compose_affine(&example_params()).unwrap();
        let b = AffineTransform::new(
            Matrix3::new(1.0, 0.1, 0.0, -0.2, 0.9, 0.05, 0.0, 0.3, 1.1),
            Vector3::new(-1.0, 2.0, 0.5),
        );
        let p = Point3::new(3.0, -4.0, 12.0);
        let seq = b.apply(&a.apply(&p));
        let composed = a.then(&b).apply(&p);
        assert_relative_eq!(seq, composed, epsilon = 1e-12);
    }

    #[test]
    fn transform_document_field_names() {
        let t = compose_affine(&example_params()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["units"], "mm");
        assert_eq!(v["matrix"][0][1].as_f64().unwrap(), t.linear[(0, 1)]);
        assert_eq!(v["translation"][2].as_f64().unwrap(), 7.0);
        assert_eq!(AffineTransform::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn transform_document_rejects_other_units() {
        let text = r#"{"matrix":[[1,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0],"units":"cm"}"#;
        assert!(matches!(
            AffineTransform::from_json(text),
            Err(Error::Format { field, .. }) if field == "units"
        ));
    }
}
