//! Bilateral displacement along the estimated normal, and whole-cloud
//! denoising with fixed or predicted bandwidths.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bbox_diagonal, normal_from_points, PointCloud, SpatialIndex};
use crate::network::LbfModel;
use crate::patch::{
    uncanonicalize_displacement, MultiScalePatch, PatchSampler, RotationMode, ScaleSpec,
};

/// Spatial (`sigma_d`) and normal-offset (`sigma_n`) Gaussian bandwidths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub sigma_d: f64,
    pub sigma_n: f64,
}

impl FilterParams {
    pub fn new(sigma_d: f64, sigma_n: f64) -> Result<Self> {
        let ok = |s: f64| s > 0.0 && s.is_finite();
        if !ok(sigma_d) || !ok(sigma_n) {
            return Err(Error::InvalidValue(format!(
                "bandwidths must be positive and finite, got sigma_d={sigma_d}, sigma_n={sigma_n}"
            )));
        }
        Ok(Self { sigma_d, sigma_n })
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            sigma_d: self.sigma_d * factor,
            sigma_n: self.sigma_n * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseReport {
    /// Output minus input, per point.
    pub displacements: Vec<Vector3<f64>>,
    /// Bandwidths applied to each point; `None` for skipped points. Learned
    /// denoising reports canonical units, classical denoising world units.
    pub params_used: Vec<Option<FilterParams>>,
    /// Points left in place for lack of neighbors, ascending.
    pub skipped: Vec<usize>,
}

/// `delta` and its derivatives with respect to both bandwidths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilateralGradient {
    pub delta: f64,
    pub d_sigma_d: f64,
    pub d_sigma_n: f64,
}

/// Normalized weights `w_j / sum w` computed in log space, with per-neighbor
/// squared distance and signed normal offset.
struct Terms {
    weights: Vec<f64>,
    dist2: Vec<f64>,
    offset: Vec<f64>,
}

fn terms(
    p: &Vector3<f64>,
    neighbors: &[Vector3<f64>],
    n_p: &Vector3<f64>,
    params: FilterParams,
) -> Result<Terms> {
    if neighbors.is_empty() {
        return Err(Error::InsufficientNeighbors {
            needed: 1,
            found: 0,
        });
    }
    let (two_sd2, two_sn2) = (
        2.0 * params.sigma_d * params.sigma_d,
        2.0 * params.sigma_n * params.sigma_n,
    );
    let mut dist2 = Vec::with_capacity(neighbors.len());
    let mut offset = Vec::with_capacity(neighbors.len());
    let mut log_w = Vec::with_capacity(neighbors.len());
    for q in neighbors {
        let d = q - p;
        let dd2 = d.norm_squared();
        let dn = n_p.dot(&d);
        dist2.push(dd2);
        offset.push(dn);
        log_w.push(-dd2 / two_sd2 - dn * dn / two_sn2);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(Terms {
        weights,
        dist2,
        offset,
    })
}

/// Weighted mean of the neighbors' offsets along `n_p`, with weights
/// `exp(-|q-p|^2 / 2 sigma_d^2) * exp(-<n_p, q-p>^2 / 2 sigma_n^2)`.
pub fn bilateral_displacement(
    p: &Vector3<f64>,
    neighbors: &[Vector3<f64>],
    n_p: &Vector3<f64>,
    params: FilterParams,
) -> Result<f64> {
    let t = terms(p, neighbors, n_p, params)?;
    Ok(t.weights.iter().zip(&t.offset).map(|(w, d)| w * d).sum())
}

/// [`bilateral_displacement`] plus its closed-form derivatives in both bandwidths.
pub fn bilateral_displacement_with_gradient(
    p: &Vector3<f64>,
    neighbors: &[Vector3<f64>],
    n_p: &Vector3<f64>,
    params: FilterParams,
) -> Result<BilateralGradient> {
    let t = terms(p, neighbors, n_p, params)?;
    let delta: f64 = t.weights.iter().zip(&t.offset).map(|(w, d)| w * d).sum();
    let sd3 = params.sigma_d.powi(3);
    let sn3 = params.sigma_n.powi(3);
    let mut d_sigma_d = 0.0;
    let mut d_sigma_n = 0.0;
    for ((w, dd2), dn) in t.weights.iter().zip(&t.dist2).zip(&t.offset) {
        let centered = dn - delta;
        d_sigma_d += w * dd2 / sd3 * centered;
        d_sigma_n += w * dn * dn / sn3 * centered;
    }
    Ok(BilateralGradient {
        delta,
        d_sigma_d,
        d_sigma_n,
    })
}

/// Result of filtering one canonical patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchFilterOutput {
    pub delta: f64,
    /// Canonical-frame normal used for the displacement.
    pub normal: Vector3<f64>,
    pub world_displacement: Vector3<f64>,
}

/// Filters the query point of a patch using the real points of its largest
/// scale, in canonical coordinates.
pub fn filter_patch(patch: &MultiScalePatch, params: FilterParams) -> Result<PatchFilterOutput> {
    let neighbors = patch.real_points(patch.largest_scale());
    let normal = canonical_normal(neighbors)?;
    let delta = bilateral_displacement(&Vector3::zeros(), neighbors, &normal, params)?;
    Ok(PatchFilterOutput {
        delta,
        normal,
        world_displacement: uncanonicalize_displacement(
            &patch.frame,
            patch.r_max,
            &(normal * delta),
        ),
    })
}

pub(crate) fn canonical_normal(points: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    let pts: Vec<Point3<f64>> = points.iter().map(|v| Point3::from(*v)).collect();
    normal_from_points(&pts)
}

fn is_local_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::InsufficientNeighbors { .. } | Error::DegenerateGeometry(_)
    )
}

/// Displacement and bandwidths of one point, `None` when it was skipped.
type PointStep = Result<Option<(Vector3<f64>, FilterParams)>>;

fn assemble(cloud: &PointCloud, per_point: Vec<PointStep>) -> Result<(PointCloud, DenoiseReport)> {
    let mut points = Vec::with_capacity(cloud.len());
    let mut displacements = Vec::with_capacity(cloud.len());
    let mut params_used = Vec::with_capacity(cloud.len());
    let mut skipped = Vec::new();
    for (i, r) in per_point.into_iter().enumerate() {
        let p = cloud.points()[i];
        match r? {
            Some((d, params)) => {
                points.push(p + d);
                displacements.push(d);
                params_used.push(Some(params));
            }
            None => {
                points.push(p);
                displacements.push(Vector3::zeros());
                params_used.push(None);
                skipped.push(i);
            }
        }
    }
    Ok((
        PointCloud::new(points)?,
        DenoiseReport {
            displacements,
            params_used,
            skipped,
        },
    ))
}

fn classical_pass(
    cloud: &PointCloud,
    radius: f64,
    params: FilterParams,
) -> Result<(PointCloud, DenoiseReport)> {
    let index = SpatialIndex::build(cloud)?;
    let per_point: Vec<_> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = cloud.points()[i].coords;
            let neighbors: Vec<Vector3<f64>> = index
                .radius_query(&cloud.points()[i], radius)
                .into_iter()
                .map(|j| cloud.points()[j].coords)
                .collect();
            let step = canonical_normal(&neighbors).and_then(|n| {
                bilateral_displacement(&p, &neighbors, &n, params).map(|delta| n * delta)
            });
            match step {
                Ok(d) => Ok(Some((d, params))),
                Err(e) if is_local_failure(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    assemble(cloud, per_point)
}

/// Classical bilateral filtering with one bandwidth pair for the whole cloud.
///
/// Each iteration rebuilds the index and reads only the previous iterate.
pub fn denoise_classical(
    cloud: &PointCloud,
    radius: f64,
    params: FilterParams,
    iterations: usize,
) -> Result<(PointCloud, DenoiseReport)> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "radius {radius} must be positive"
        )));
    }
    if iterations == 0 {
        return Err(Error::InvalidValue("iterations must be at least 1".into()));
    }
    FilterParams::new(params.sigma_d, params.sigma_n)?;
    let mut current = cloud.without_normals();
    let mut skipped = std::collections::BTreeSet::new();
    let mut last_params = Vec::new();
    for _ in 0..iterations {
        let (next, report) = classical_pass(&current, radius, params)?;
        skipped.extend(report.skipped);
        last_params = report.params_used;
        current = next;
    }
    let displacements = current
        .points()
        .iter()
        .zip(cloud.points())
        .map(|(a, b)| a - b)
        .collect();
    Ok((
        current,
        DenoiseReport {
            displacements,
            params_used: last_params,
            skipped: skipped.into_iter().collect(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnedOptions {
    pub seed: u64,
    /// Length the scale fractions refer to; the cloud's bounding-box
    /// diagonal when `None`.
    pub reference_length: Option<f64>,
    pub rotation_mode: RotationMode,
}

impl Default for LearnedOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            reference_length: None,
            rotation_mode: RotationMode::Shared,
        }
    }
}

/// Filters every point with bandwidths produced by `predict` from its patch.
pub fn denoise_with_predictor<F>(
    cloud: &PointCloud,
    scales: &[ScaleSpec],
    patch_size: usize,
    options: &LearnedOptions,
    predict: F,
) -> Result<(PointCloud, DenoiseReport)>
where
    F: Fn(&MultiScalePatch) -> Result<FilterParams> + Sync,
{
    let index = SpatialIndex::build(cloud)?;
    let reference = match options.reference_length {
        Some(r) => r,
        None => bbox_diagonal(cloud)?,
    };
    let sampler = PatchSampler::with_reference_length(
        cloud,
        &index,
        scales,
        patch_size,
        options.seed,
        reference,
    )?
    .rotation_mode(options.rotation_mode);
    let per_point: Vec<_> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let step = sampler.extract(i).and_then(|patch| {
                let params = predict(&patch)?;
                let out = filter_patch(&patch, params)?;
                Ok((out.world_displacement, params))
            });
            match step {
                Ok(v) => Ok(Some(v)),
                Err(e) if is_local_failure(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    assemble(&cloud.without_normals(), per_point)
}

/// Learned bilateral filtering: per-point bandwidths from `model`.
pub fn denoise_learned(
    cloud: &PointCloud,
    model: &LbfModel,
    scales: &[ScaleSpec],
    options: &LearnedOptions,
) -> Result<(PointCloud, DenoiseReport)> {
    let arch = model.architecture();
    if arch.scales != scales.len() {
        return Err(Error::ConfigMismatch(format!(
            "model has {} scales, {} given",
            arch.scales,
            scales.len()
        )));
    }
    denoise_with_predictor(cloud, scales, arch.patch_size, options, |patch| {
        model.forward(patch)
    })
}
