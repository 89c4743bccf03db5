use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};

use super::{PointCloud, SpatialIndex};
use crate::error::{Error, Result};

/// Relative magnitude below which the third moment along an axis is treated
/// as zero and the component-based sign rule takes over.
const SKEW_EPS: f64 = 1e-9;

/// Rotation `R` (columns are the principal axes) anchored at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub rotation: Matrix3<f64>,
    pub origin: Point3<f64>,
}

impl Frame {
    pub fn identity_at(origin: Point3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            origin,
        }
    }

    /// World vector to frame coordinates (`R^T v`).
    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(v)
    }

    /// Frame coordinates to world vector (`R v`).
    pub fn to_world(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcaFrame {
    /// Origin is the centroid of the input points.
    pub frame: Frame,
    /// Population-covariance eigenvalues, descending.
    pub eigenvalues: [f64; 3],
}

/// Centroid and population (1/m) covariance.
pub fn covariance(points: &[Point3<f64>]) -> (Point3<f64>, Matrix3<f64>) {
    let m = points.len() as f64;
    let centroid = Point3::from(points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / m);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    (centroid, cov / m)
}

fn sorted_eigen(cov: Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let vectors = order.map(|i| eig.eigenvectors.column(i).normalize());
    (values, vectors)
}

/// Fixes the sign of a principal axis.
///
/// The axis points towards positive third moment of the centered points,
/// which is intrinsic to the point set and therefore commutes with rigid
/// rotations. When the third moment vanishes (symmetric data) the
/// largest-magnitude component is made positive, ties going to the first
/// nonzero component.
pub fn orient_axis(axis: Vector3<f64>, centered: &[Vector3<f64>]) -> Vector3<f64> {
    let (skew, scale) = centered.iter().fold((0.0, 0.0), |(s, a), d| {
        let t = d.dot(&axis);
        (s + t * t * t, a + (t * t * t).abs())
    });
    if scale > 0.0 && skew.abs() > SKEW_EPS * scale {
        return if skew > 0.0 { axis } else { -axis };
    }
    let max_abs = axis.amax();
    let lead = axis
        .iter()
        .find(|c| c.abs() >= max_abs * (1.0 - 1e-12) && **c != 0.0)
        .copied()
        .unwrap_or(1.0);
    if lead < 0.0 {
        -axis
    } else {
        axis
    }
}

/// Principal axes of a point set, descending variance, as a proper rotation.
pub fn pca_frame(points: &[Point3<f64>]) -> Result<PcaFrame> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "PCA needs at least 3 points, got {}",
            points.len()
        )));
    }
    let (centroid, cov) = covariance(points);
    let (values, vectors) = sorted_eigen(cov);
    if !(values[1] > 1e-12 * values[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateGeometry(
            "points are collinear or coincident".into(),
        ));
    }
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - centroid).collect();
    let axes = vectors.map(|v| orient_axis(v, &centered));
    let mut rotation = Matrix3::from_columns(&axes);
    if rotation.determinant() < 0.0 {
        let flipped = -rotation.column(2);
        rotation.set_column(2, &flipped);
    }
    Ok(PcaFrame {
        frame: Frame {
            rotation,
            origin: centroid,
        },
        eigenvalues: values,
    })
}

/// Unit eigenvector of the smallest covariance eigenvalue.
pub fn normal_from_points(points: &[Point3<f64>]) -> Result<Vector3<f64>> {
    if points.len() < 3 {
        return Err(Error::InsufficientNeighbors {
            needed: 3,
            found: points.len(),
        });
    }
    let (centroid, cov) = covariance(points);
    let (_, vectors) = sorted_eigen(cov);
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - centroid).collect();
    Ok(orient_axis(vectors[2], &centered))
}

/// PCA normal over the strict `r`-neighborhood of `cloud[center_idx]`.
pub fn estimate_normal(
    index: &SpatialIndex,
    cloud: &PointCloud,
    center_idx: usize,
    r: f64,
) -> Result<Vector3<f64>> {
    let center = cloud.points()[center_idx];
    let neighbors: Vec<Point3<f64>> = index
        .radius_query(&center, r)
        .into_iter()
        .map(|i| cloud.points()[i])
        .collect();
    normal_from_points(&neighbors)
}
