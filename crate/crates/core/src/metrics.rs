//! Chamfer distance and neighborhood mean error between point clouds.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SpatialIndex};

pub const DEFAULT_MSE_K: usize = 10;

/// Conventions printed with every report.
pub const CD_CONVENTION: &str =
    "cd: mean squared nearest-neighbor distance, summed over both directions";
pub const MSE_CONVENTION: &str =
    "mse: mean over denoised points of the mean distance to the k nearest clean points";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub cd: f64,
    pub mse: f64,
    pub k: usize,
    pub n_denoised: usize,
    pub n_clean: usize,
}

fn one_way(from: &PointCloud, to: &SpatialIndex) -> f64 {
    let sum: f64 = from.points().par_iter().map(|p| to.nearest(p).1).sum();
    sum / from.len() as f64
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (ia, ib) = (SpatialIndex::build(a)?, SpatialIndex::build(b)?);
    Ok(one_way(a, &ib) + one_way(b, &ia))
}

/// Not symmetric: averages over `denoised` only.
pub fn mse(denoised: &PointCloud, clean: &PointCloud, k: usize) -> Result<f64> {
    if denoised.is_empty() || clean.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > clean.len() {
        return Err(Error::Config(format!(
            "k must lie in 1..={}, got {k}",
            clean.len()
        )));
    }
    let index = SpatialIndex::build(clean)?;
    let sum: f64 = denoised
        .points()
        .par_iter()
        .map(|p| index.knn(p, k).iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / k as f64)
        .sum();
    Ok(sum / denoised.len() as f64)
}

pub fn evaluate(denoised: &PointCloud, clean: &PointCloud, k: usize) -> Result<EvalReport> {
    Ok(EvalReport {
        cd: chamfer_distance(denoised, clean)?,
        mse: mse(denoised, clean, k)?,
        k,
        n_denoised: denoised.len(),
        n_clean: clean.len(),
    })
}

impl EvalReport {
    /// `metric=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "cd={:.6e}\nmse={:.6e}\nk={}\nn_denoised={}\nn_clean={}\n",
            self.cd, self.mse, self.k, self.n_denoised, self.n_clean
        )
    }

    /// Aligned table headed by the metric conventions.
    pub fn to_table(&self) -> String {
        format!(
            "# {CD_CONVENTION}\n# {MSE_CONVENTION} (k={})\n{:<12}{:>16.6e}\n{:<12}{:>16.6e}\n{:<12}{:>16}\n{:<12}{:>16}\n",
            self.k, "cd", self.cd, "mse", self.mse, "n_denoised", self.n_denoised, "n_clean", self.n_clean
        )
    }
}
