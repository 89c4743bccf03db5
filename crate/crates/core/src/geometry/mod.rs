//! Point types, bounding boxes, spatial indexing and PCA.

mod kdtree;
mod pca;

pub use kdtree::SpatialIndex;
pub use pca::{
    covariance, estimate_normal, normal_from_points, orient_axis, pca_frame, Frame, PcaFrame,
};

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on the Euclidean norm of stored normals.
pub const UNIT_NORMAL_TOLERANCE: f64 = 1e-6;

/// An ordered set of 3D points with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        check_finite(&points)?;
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        check_finite(&points)?;
        if normals.len() != points.len() {
            return Err(Error::InvalidValue(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > UNIT_NORMAL_TOLERANCE {
                return Err(Error::InvalidValue(format!(
                    "normal {i} has norm {}, expected 1",
                    n.norm()
                )));
            }
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn without_normals(&self) -> Self {
        Self {
            points: self.points.clone(),
            normals: None,
        }
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }

    pub fn bounding_box(&self) -> Result<BoundingBox> {
        BoundingBox::of(&self.points)
    }

    /// Applies a rigid motion `x -> rotation * x + translation` to points and normals.
    pub fn transformed(
        &self,
        rotation: &nalgebra::Matrix3<f64>,
        translation: &Vector3<f64>,
    ) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| Point3::from(rotation * p.coords + translation))
            .collect();
        let normals = self
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| rotation * n).collect());
        Self { points, normals }
    }
}

fn check_finite(points: &[Point3<f64>]) -> Result<()> {
    match points
        .iter()
        .position(|p| !p.coords.iter().all(|c| c.is_finite()))
    {
        Some(i) => Err(Error::InvalidValue(format!("point {i} is not finite"))),
        None => Ok(()),
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl BoundingBox {
    pub fn of(points: &[Point3<f64>]) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyInput)?;
        let (min, max) = points
            .iter()
            .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Ok(Self { min, max })
    }

    pub fn of_vectors(points: &[Vector3<f64>]) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyInput)?;
        let (min, max) = points
            .iter()
            .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Ok(Self {
            min: Point3::from(min),
            max: Point3::from(max),
        })
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }
}

/// Length of the bounding-box diagonal. Errors when every point coincides.
pub fn bbox_diagonal(cloud: &PointCloud) -> Result<f64> {
    let diag = cloud.bounding_box()?.diagonal();
    if diag > 0.0 {
        Ok(diag)
    } else {
        Err(Error::DegenerateGeometry(
            "all points coincide; bounding box diagonal is zero".into(),
        ))
    }
}
