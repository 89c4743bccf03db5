//! Multi-scale neighborhoods around a query point, expressed in a canonical
//! frame: centered on the query point, divided by the largest radius and
//! rotated onto the principal axes of the largest-scale neighborhood.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{bbox_diagonal, pca_frame, Frame, PointCloud, SpatialIndex};
use crate::seed::rng_for;

pub const DEFAULT_RADIUS_FRACTIONS: [f64; 3] = [0.03, 0.04, 0.05];
pub const DEFAULT_PATCH_SIZE: usize = 400;

/// One neighborhood scale, as a fraction of the reference length (the
/// bounding-box diagonal unless overridden).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    pub radius_fraction: f64,
}

impl ScaleSpec {
    pub fn new(radius_fraction: f64) -> Self {
        Self { radius_fraction }
    }

    pub fn defaults() -> Vec<ScaleSpec> {
        DEFAULT_RADIUS_FRACTIONS
            .iter()
            .map(|&f| Self::new(f))
            .collect()
    }
}

pub fn validate_scales(scales: &[ScaleSpec]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("at least one scale is required".into()));
    }
    for (k, s) in scales.iter().enumerate() {
        if !(s.radius_fraction > 0.0 && s.radius_fraction < 1.0) {
            return Err(Error::Config(format!(
                "scale {k}: radius fraction {} outside (0, 1)",
                s.radius_fraction
            )));
        }
        if k > 0 && s.radius_fraction <= scales[k - 1].radius_fraction {
            return Err(Error::Config("scale radii must increase strictly".into()));
        }
    }
    Ok(())
}

/// How patches are rotated into the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationMode {
    /// One rotation for all scales, from the largest-scale neighborhood.
    #[default]
    Shared,
    /// Each scale uses the principal axes of its own neighborhood. The
    /// displacement is still mapped back with the largest-scale rotation.
    PerScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScalePatch {
    pub center_index: usize,
    /// Per scale, exactly `patch_size` canonical points; real points come
    /// first, origin padding after.
    pub scales: Vec<Vec<Vector3<f64>>>,
    pub valid_counts: Vec<usize>,
    /// Cloud indices of the real points, aligned with `scales`.
    pub source_indices: Vec<Vec<usize>>,
    /// Rotation of the largest scale; origin is the query point.
    pub frame: Frame,
    pub scale_rotations: Vec<Matrix3<f64>>,
    /// World radii per scale.
    pub radii: Vec<f64>,
    pub r_max: f64,
}

impl MultiScalePatch {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn patch_size(&self) -> usize {
        self.scales.first().map_or(0, Vec::len)
    }

    pub fn real_points(&self, k: usize) -> &[Vector3<f64>] {
        &self.scales[k][..self.valid_counts[k]]
    }

    pub fn largest_scale(&self) -> usize {
        self.scales.len() - 1
    }

    /// World point to canonical coordinates at scale `k`.
    pub fn to_canonical(&self, k: usize, world: &Point3<f64>) -> Vector3<f64> {
        self.scale_rotations[k].tr_mul(&(world - self.frame.origin)) / self.r_max
    }
}

/// Extracts patches around points of one cloud with fixed scales and seed.
#[derive(Debug, Clone)]
pub struct PatchSampler<'a> {
    cloud: &'a PointCloud,
    index: &'a SpatialIndex,
    radii: Vec<f64>,
    patch_size: usize,
    seed: u64,
    mode: RotationMode,
}

impl<'a> PatchSampler<'a> {
    pub fn new(
        cloud: &'a PointCloud,
        index: &'a SpatialIndex,
        scales: &[ScaleSpec],
        patch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let diag = bbox_diagonal(cloud)?;
        Self::with_reference_length(cloud, index, scales, patch_size, seed, diag)
    }

    /// Like [`PatchSampler::new`] with radii relative to `reference_length`
    /// instead of the cloud's own bounding-box diagonal.
    pub fn with_reference_length(
        cloud: &'a PointCloud,
        index: &'a SpatialIndex,
        scales: &[ScaleSpec],
        patch_size: usize,
        seed: u64,
        reference_length: f64,
    ) -> Result<Self> {
        validate_scales(scales)?;
        if patch_size == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        if !(reference_length > 0.0 && reference_length.is_finite()) {
            return Err(Error::Config(format!(
                "reference length {reference_length} must be positive"
            )));
        }
        Ok(Self {
            cloud,
            index,
            radii: scales
                .iter()
                .map(|s| s.radius_fraction * reference_length)
                .collect(),
            patch_size,
            seed,
            mode: RotationMode::Shared,
        })
    }

    pub fn rotation_mode(mut self, mode: RotationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn extract(&self, i: usize) -> Result<MultiScalePatch> {
        let points = self.cloud.points();
        let center = points[i];
        let r_max = *self.radii.last().expect("validated non-empty");
        let neighborhoods: Vec<Vec<usize>> = self
            .radii
            .iter()
            .map(|&r| self.index.radius_query(&center, r))
            .collect();

        let largest = neighborhoods.last().expect("non-empty");
        if largest.len() < 3 {
            return Err(Error::InsufficientNeighbors {
                needed: 3,
                found: largest.len(),
            });
        }
        let gather = |ids: &[usize]| ids.iter().map(|&j| points[j]).collect::<Vec<_>>();
        let shared = pca_frame(&gather(largest))?.frame.rotation;
        let frame = Frame {
            rotation: shared,
            origin: center,
        };

        let mut scales = Vec::with_capacity(self.radii.len());
        let mut valid_counts = Vec::with_capacity(self.radii.len());
        let mut source_indices = Vec::with_capacity(self.radii.len());
        let mut scale_rotations = Vec::with_capacity(self.radii.len());
        for (k, ids) in neighborhoods.iter().enumerate() {
            let rotation = match self.mode {
                RotationMode::Shared => shared,
                RotationMode::PerScale => pca_frame(&gather(ids))
                    .map(|p| p.frame.rotation)
                    .unwrap_or(shared),
            };
            let kept = self.downsample(i, k, ids);
            let mut coords: Vec<Vector3<f64>> = kept
                .iter()
                .map(|&j| rotation.tr_mul(&(points[j] - center)) / r_max)
                .collect();
            valid_counts.push(coords.len());
            coords.resize(self.patch_size, Vector3::zeros());
            scales.push(coords);
            source_indices.push(kept);
            scale_rotations.push(rotation);
        }

        Ok(MultiScalePatch {
            center_index: i,
            scales,
            valid_counts,
            source_indices,
            frame,
            scale_rotations,
            radii: self.radii.clone(),
            r_max,
        })
    }

    /// Uniform subset without replacement when over capacity; keeps index order.
    fn downsample(&self, center: usize, k: usize, ids: &[usize]) -> Vec<usize> {
        if ids.len() <= self.patch_size {
            return ids.to_vec();
        }
        let mut rng = rng_for(self.seed, &[center as u64, k as u64]);
        let mut chosen = rand::seq::index::sample(&mut rng, ids.len(), self.patch_size).into_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|c| ids[c]).collect()
    }
}

/// Convenience wrapper building a one-off [`PatchSampler`].
pub fn extract_multiscale(
    index: &SpatialIndex,
    cloud: &PointCloud,
    i: usize,
    scales: &[ScaleSpec],
    patch_size: usize,
    seed: u64,
) -> Result<MultiScalePatch> {
    PatchSampler::new(cloud, index, scales, patch_size, seed)?.extract(i)
}

/// Ground-truth points and normals around the noisy query point, one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanScale {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanPatch {
    pub scales: Vec<CleanScale>,
}

impl CleanPatch {
    pub fn largest(&self) -> &CleanScale {
        self.scales.last().expect("at least one scale")
    }
}

/// Clean neighbors of the noisy query point, mapped with the noisy patch's
/// frame and `r_max`. Normals are rotated by the same rotation.
pub fn canonicalize_target(
    patch: &MultiScalePatch,
    clean_cloud: &PointCloud,
    clean_index: &SpatialIndex,
) -> Result<CleanPatch> {
    let normals = clean_cloud
        .normals()
        .ok_or_else(|| Error::InvalidValue("clean cloud has no normals".into()))?;
    let center = patch.frame.origin;
    let mut scales = Vec::with_capacity(patch.radii.len());
    for (k, &r) in patch.radii.iter().enumerate() {
        let ids = clean_index.radius_query(&center, r);
        if ids.is_empty() {
            return Err(Error::InsufficientNeighbors {
                needed: 1,
                found: 0,
            });
        }
        let rotation = &patch.scale_rotations[k];
        scales.push(CleanScale {
            points: ids
                .iter()
                .map(|&j| patch.to_canonical(k, &clean_cloud.points()[j]))
                .collect(),
            normals: ids.iter().map(|&j| rotation.tr_mul(&normals[j])).collect(),
            indices: ids,
        });
    }
    Ok(CleanPatch { scales })
}

/// Maps a canonical displacement back to world space: `r_max * R * d`.
pub fn uncanonicalize_displacement(
    frame: &Frame,
    r_max: f64,
    disp_canonical: &Vector3<f64>,
) -> Vector3<f64> {
    frame.to_world(disp_canonical) * r_max
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy_plane(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.005).unwrap();
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random(), rng.random(), noise.sample(&mut rng)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn dense_patch_is_not_padded() {
        let cloud = noisy_plane(100_000, 1);
        let idx = SpatialIndex::build(&cloud).unwrap();
        let patch = extract_multiscale(&idx, &cloud, 0, &ScaleSpec::defaults(), 400, 7).unwrap();
        // find an interior point
        let i = (0..cloud.len())
            .find(|&i| {
                let p = cloud.points()[i];
                (0.3..0.7).contains(&p.x) && (0.3..0.7).contains(&p.y)
            })
            .unwrap();
        let patch_i = extract_multiscale(&idx, &cloud, i, &ScaleSpec::defaults(), 400, 7).unwrap();
        assert_eq!(patch_i.valid_counts, vec![400, 400, 400]);
        assert!(patch_i.scales.iter().all(|s| s.len() == 400));
        assert_eq!(patch.num_scales(), 3);
    }

    #[test]
    fn sparse_scale_is_padded_with_origin() {
        // 5 points close to the center, many farther away
        let mut pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.01, 0.0, 0.0),
            Point3::new(0.0, 0.01, 0.0),
            Point3::new(-0.01, 0.0, 0.001),
            Point3::new(0.0, -0.01, 0.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        while pts.len() < 200 {
            let p = Point3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                0.01 * rng.random::<f64>(),
            );
            if p.coords.norm() > 0.1 {
                pts.push(p);
            }
        }
        pts.push(Point3::new(1.0, 1.0, 0.3));
        let cloud = PointCloud::new(pts).unwrap();
        let idx = SpatialIndex::build(&cloud).unwrap();
        let scales = [ScaleSpec::new(0.03), ScaleSpec::new(0.5)];
        let patch = extract_multiscale(&idx, &cloud, 0, &scales, 400, 1).unwrap();
        assert_eq!(patch.valid_counts[0], 5);
        let padding = &patch.scales[0][5..];
        assert_eq!(padding.len(), 395);
        assert!(padding.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn isolated_point_errors() {
        let cloud = PointCloud::new(vec![
            Point3::origin(),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(0.0, 10.0, 0.0),
        ])
        .unwrap();
        let idx = SpatialIndex::build(&cloud).unwrap();
        assert!(matches!(
            extract_multiscale(&idx, &cloud, 0, &ScaleSpec::defaults(), 16, 0),
            Err(Error::InsufficientNeighbors { .. })
        ));
    }

    #[test]
    fn downsampling_is_reproducible_and_keeps_real_points() {
        let cloud = noisy_plane(20_000, 3);
        let idx = SpatialIndex::build(&cloud).unwrap();
        let a = extract_multiscale(&idx, &cloud, 42, &ScaleSpec::defaults(), 32, 99).unwrap();
        let b = extract_multiscale(&idx, &cloud, 42, &ScaleSpec::defaults(), 32, 99).unwrap();
        assert_eq!(a, b);
        let c = extract_multiscale(&idx, &cloud, 42, &ScaleSpec::defaults(), 32, 100).unwrap();
        assert_ne!(a.source_indices, c.source_indices);
        let full = idx.radius_query(&cloud.points()[42], a.radii[2]);
        assert!(a.source_indices[2].iter().all(|j| full.contains(j)));
        assert!(a.source_indices[2].windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rotated_cloud_gives_same_canonical_patch() {
        let cloud = noisy_plane(3000, 4);
        let diag = bbox_diagonal(&cloud).unwrap();
        let idx = SpatialIndex::build(&cloud).unwrap();
        let scales = ScaleSpec::defaults();
        let base = PatchSampler::with_reference_length(&cloud, &idx, &scales, 64, 5, diag)
            .unwrap()
            .extract(100)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let axis = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let q = *Rotation3::new(axis.normalize() * 2.0).matrix();
            let moved = cloud.transformed(&q, &Vector3::new(0.3, -2.0, 1.0));
            let midx = SpatialIndex::build(&moved).unwrap();
            let got = PatchSampler::with_reference_length(&moved, &midx, &scales, 64, 5, diag)
                .unwrap()
                .extract(100)
                .unwrap();
            assert_eq!(got.valid_counts, base.valid_counts);
            for (sa, sb) in got.scales.iter().zip(&base.scales) {
                for (a, b) in sa.iter().zip(sb) {
                    assert!((a - b).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_noise_clean_patch_equals_noisy_patch() {
        let pts = noisy_plane(2000, 5).into_points();
        let normals = vec![Vector3::z(); pts.len()];
        let clean = PointCloud::with_normals(pts, normals).unwrap();
        let noisy = clean.without_normals();
        let idx = SpatialIndex::build(&noisy).unwrap();
        let patch = extract_multiscale(&idx, &noisy, 10, &ScaleSpec::defaults(), 400, 0).unwrap();
        let target = canonicalize_target(&patch, &clean, &idx).unwrap();
        for k in 0..3 {
            assert_eq!(target.scales[k].points, patch.real_points(k));
        }
    }

    #[test]
    fn displaced_center_shifts_clean_patch() {
        let clean_pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.3, 0.0, 0.0),
            Point3::new(-0.2, 0.05, 0.0),
            Point3::new(0.0, 0.1, 0.0),
            Point3::new(0.05, -0.12, 0.0),
        ];
        let delta = Vector3::new(0.0, 0.0, 0.02);
        let clean = PointCloud::with_normals(clean_pts.clone(), vec![Vector3::z(); 5]).unwrap();
        let noisy = PointCloud::new(clean_pts.iter().map(|p| p + delta).collect()).unwrap();
        let nidx = SpatialIndex::build(&noisy).unwrap();
        let cidx = SpatialIndex::build(&clean).unwrap();
        let scales = [ScaleSpec::new(0.5), ScaleSpec::new(0.9)];
        let patch = PatchSampler::with_reference_length(&noisy, &nidx, &scales, 8, 0, 1.0)
            .unwrap()
            .extract(0)
            .unwrap();
        let target = canonicalize_target(&patch, &clean, &cidx).unwrap();
        let shift = patch.frame.rotation.tr_mul(&(-delta)) / patch.r_max;
        let k = 1;
        assert_eq!(target.scales[k].points.len(), patch.valid_counts[k]);
        for (c, n) in target.scales[k].points.iter().zip(patch.real_points(k)) {
            assert!((c - (n + shift)).norm() < 1e-12);
        }
        for n in &target.scales[k].normals {
            assert!((n - patch.frame.rotation.tr_mul(&Vector3::z())).norm() < 1e-12);
            assert!((n.z.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_frame_keeps_normals() {
        // x-dominant, y-secondary, skewed so the axes come out as +x, +y
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.4, 0.0, 0.0),
            Point3::new(-0.1, 0.0, 0.0),
            Point3::new(0.06, 0.1, 0.0),
            Point3::new(0.06, -0.1, 0.0),
        ];
        let clean = PointCloud::with_normals(pts.clone(), vec![Vector3::z(); 5]).unwrap();
        let idx = SpatialIndex::build(&clean).unwrap();
        let patch =
            PatchSampler::with_reference_length(&clean, &idx, &[ScaleSpec::new(0.9)], 8, 0, 1.0)
                .unwrap()
                .extract(0)
                .unwrap();
        assert!(
            (patch.frame.rotation - Matrix3::identity()).amax() < 1e-12,
            "{}",
            patch.frame.rotation
        );
        let target = canonicalize_target(&patch, &clean, &idx).unwrap();
        assert!(target.scales[0]
            .normals
            .iter()
            .all(|n| (n - Vector3::z()).norm() < 1e-12));
    }

    #[test]
    fn uncanonicalize_examples() {
        let frame = Frame::identity_at(Point3::origin());
        assert_eq!(
            uncanonicalize_displacement(&frame, 2.0, &Vector3::zeros()),
            Vector3::zeros()
        );
        assert!(
            (uncanonicalize_displacement(&frame, 2.0, &Vector3::new(0.0, 0.0, 0.1))
                - Vector3::new(0.0, 0.0, 0.2))
            .norm()
                < 1e-15
        );
    }

    #[test]
    fn per_scale_mode_rotates_each_scale() {
        let cloud = noisy_plane(5000, 8);
        let idx = SpatialIndex::build(&cloud).unwrap();
        let sampler = PatchSampler::new(&cloud, &idx, &ScaleSpec::defaults(), 64, 1)
            .unwrap()
            .rotation_mode(RotationMode::PerScale);
        let patch = sampler.extract(7).unwrap();
        assert_eq!(patch.scale_rotations[2], patch.frame.rotation);
        assert_ne!(patch.scale_rotations[0], patch.frame.rotation);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn roundtrip_and_radius_bounds(seed in 0u64..1000, center in 0usize..400) {
            let cloud = noisy_plane(400, seed);
            let idx = SpatialIndex::build(&cloud).unwrap();
            let scales = [ScaleSpec::new(0.1), ScaleSpec::new(0.2), ScaleSpec::new(0.3)];
            let sampler = PatchSampler::new(&cloud, &idx, &scales, 48, seed).unwrap();
            let patch = match sampler.extract(center) {
                Ok(p) => p,
                Err(_) => return Ok(()),
            };
            for k in 0..3 {
                let bound = patch.radii[k] / patch.r_max + 1e-9;
                for (v, &j) in patch.real_points(k).iter().zip(&patch.source_indices[k]) {
                    prop_assert!(v.norm() <= bound);
                    let world = patch.frame.origin + uncanonicalize_displacement(&patch.frame, patch.r_max, v);
                    let orig = cloud.points()[j];
                    prop_assert!((world - orig).norm() <= 1e-9 * orig.coords.norm().max(1.0));
                }
            }
        }

        #[test]
        fn point_order_does_not_change_the_patch(seed in 0u64..1000) {
            let cloud = noisy_plane(300, seed);
            let mut perm: Vec<usize> = (0..300).collect();
            perm.reverse();
            perm.swap(5, 77);
            let shuffled = PointCloud::new(perm.iter().map(|&i| cloud.points()[i]).collect()).unwrap();
            let scales = [ScaleSpec::new(0.2), ScaleSpec::new(0.3)];
            let ia = SpatialIndex::build(&cloud).unwrap();
            let ib = SpatialIndex::build(&shuffled).unwrap();
            let a = extract_multiscale(&ia, &cloud, perm[0], &scales, 300, 1);
            let b = extract_multiscale(&ib, &shuffled, 0, &scales, 300, 1);
            if let (Ok(a), Ok(b)) = (a, b) {
                for k in 0..2 {
                    let mut sa: Vec<_> = a.real_points(k).iter().map(|v| [v.x, v.y, v.z]).collect();
                    let mut sb: Vec<_> = b.real_points(k).iter().map(|v| [v.x, v.y, v.z]).collect();
                    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    prop_assert_eq!(sa.len(), sb.len());
                    for (x, y) in sa.iter().zip(&sb) {
                        for c in 0..3 {
                            prop_assert!((x[c] - y[c]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
