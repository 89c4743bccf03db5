//! Seeded synthetic surfaces with exact normals, for tests and demos.

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::PointCloud;
use crate::seed::rng_for;

fn build(
    n: usize,
    seed: u64,
    mut f: impl FnMut(&mut ChaCha8Rng) -> (Point3<f64>, Vector3<f64>),
) -> PointCloud {
    let mut rng = rng_for(seed, &[0x5a]);
    let (points, normals): (Vec<_>, Vec<_>) = (0..n).map(|_| f(&mut rng)).unzip();
    PointCloud::with_normals(points, normals).expect("generated normals are unit length")
}

/// Unit square in the `z = 0` plane.
pub fn plane(n: usize, seed: u64) -> PointCloud {
    build(n, seed, |rng| {
        (Point3::new(rng.random(), rng.random(), 0.0), Vector3::z())
    })
}

/// Unit sphere, outward normals.
pub fn sphere(n: usize, seed: u64) -> PointCloud {
    build(n, seed, |rng| {
        let z: f64 = rng.random_range(-1.0..1.0);
        let t: f64 = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        let v = Vector3::new(r * t.cos(), r * t.sin(), z);
        (Point3::from(v), v)
    })
}

/// Surface of the cube `[-1, 1]^3`.
pub fn cube(n: usize, seed: u64) -> PointCloud {
    build(n, seed, |rng| {
        let face = rng.random_range(0..6);
        let axis = face % 3;
        let s = if face < 3 { 1.0 } else { -1.0 };
        let mut p = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        p[axis] = s;
        let mut n = Vector3::zeros();
        n[axis] = s;
        (Point3::from(p), n)
    })
}

/// Torus around the z axis with tube radius `0.35` and center radius `1`.
/// Points are area-uniform.
pub fn torus(n: usize, seed: u64) -> PointCloud {
    let (big, small) = (1.0, 0.35);
    build(n, seed, |rng| loop {
        let u: f64 = rng.random_range(0.0..2.0 * PI);
        let v: f64 = rng.random_range(0.0..2.0 * PI);
        // accept with probability proportional to the local area element
        if rng.random::<f64>() * (big + small) > big + small * v.cos() {
            continue;
        }
        let normal = Vector3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
        let center = Vector3::new(big * u.cos(), big * u.sin(), 0.0);
        break (Point3::from(center + small * normal), normal);
    })
}

/// Closed cylinder of radius 1 and height 2 around the z axis.
pub fn cylinder(n: usize, seed: u64) -> PointCloud {
    // side area 4 pi, caps 2 pi together
    build(n, seed, |rng| {
        let t: f64 = rng.random_range(0.0..2.0 * PI);
        if rng.random::<f64>() < 2.0 / 3.0 {
            let v = Vector3::new(t.cos(), t.sin(), 0.0);
            (Point3::new(v.x, v.y, rng.random_range(-1.0..1.0)), v)
        } else {
            let r = rng.random::<f64>().sqrt();
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (
                Point3::new(r * t.cos(), r * t.sin(), s),
                Vector3::new(0.0, 0.0, s),
            )
        }
    })
}

/// Regular octahedron `|x| + |y| + |z| = 1`.
pub fn octahedron(n: usize, seed: u64) -> PointCloud {
    build(n, seed, |rng| {
        let e: [f64; 3] = std::array::from_fn(|_| -(1.0 - rng.random::<f64>()).ln());
        let sum: f64 = e.iter().sum();
        let signs: [f64; 3] =
            std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let p = Vector3::from_fn(|i, _| signs[i] * e[i] / sum);
        let n = Vector3::from_fn(|i, _| signs[i]) / 3f64.sqrt();
        (Point3::from(p), n)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_lie_on_their_surfaces() {
        for p in sphere(500, 1).points() {
            assert!((p.coords.norm() - 1.0).abs() < 1e-12);
        }
        for p in cube(500, 1).points() {
            assert!((p.coords.amax() - 1.0).abs() < 1e-12);
        }
        for p in octahedron(500, 1).points() {
            assert!((p.coords.abs().sum() - 1.0).abs() < 1e-12);
        }
        for p in torus(500, 1).points() {
            let rho = (p.x * p.x + p.y * p.y).sqrt();
            assert!(((rho - 1.0).powi(2) + p.z * p.z - 0.35f64.powi(2)).abs() < 1e-12);
        }
        let c = cylinder(500, 1);
        for (p, n) in c.points().iter().zip(c.normals().unwrap()) {
            let rho = (p.x * p.x + p.y * p.y).sqrt();
            assert!((rho - 1.0).abs() < 1e-12 || (p.z.abs() - 1.0).abs() < 1e-12);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(torus(100, 3), torus(100, 3));
        assert_ne!(torus(100, 3), torus(100, 4));
    }
}
