//! Python module `lbf`: point clouds, classical and learned bilateral
//! denoising, metrics and training.

use std::path::PathBuf;

use lbf_core::filter::{self, FilterParams, LearnedOptions};
use lbf_core::geometry::{self, PointCloud as CoreCloud};
use lbf_core::network::{Architecture, LbfModel};
use lbf_core::patch::ScaleSpec;
use lbf_core::training::{self, TrainConfig};
use lbf_core::{io, metrics, shapes, Error};
use nalgebra::{Point3, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// A point set with optional unit normals.
#[pyclass(name = "PointCloud", module = "lbf", frozen, from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: CoreCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, normals=None))]
    fn new(points: Vec<[f64; 3]>, normals: Option<Vec<[f64; 3]>>) -> PyResult<Self> {
        let pts: Vec<Point3<f64>> = points.into_iter().map(Point3::from).collect();
        let inner = match normals {
            Some(ns) => CoreCloud::with_normals(pts, ns.into_iter().map(vec3).collect()),
            None => CoreCloud::new(pts),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner
            .points()
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    fn normals(&self) -> Option<Vec<[f64; 3]>> {
        self.inner
            .normals()
            .map(|ns| ns.iter().map(|n| [n.x, n.y, n.z]).collect())
    }

    fn bbox_diagonal(&self) -> PyResult<f64> {
        geometry::bbox_diagonal(&self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "PointCloud(n={}, normals={})",
            self.inner.len(),
            self.inner.normals().is_some()
        )
    }
}

impl From<CoreCloud> for PyPointCloud {
    fn from(inner: CoreCloud) -> Self {
        Self { inner }
    }
}

/// Trained or constructed bandwidth-prediction network.
#[pyclass(name = "Model", module = "lbf", frozen)]
struct PyModel {
    inner: LbfModel,
    radius_fractions: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// Loads a model file; radii come from its `.meta` sidecar when present.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = LbfModel::load(&path).map_err(to_py)?;
        let meta = training::sidecar_path(&path, "meta");
        let mut radius_fractions = lbf_core::patch::DEFAULT_RADIUS_FRACTIONS.to_vec();
        if let Ok(text) = std::fs::read_to_string(meta) {
            if let Some(v) = text
                .lines()
                .find_map(|l| l.strip_prefix("radius_fractions="))
            {
                let mut cfg = TrainConfig::default();
                cfg.set("radius_fractions", v).map_err(to_py)?;
                radius_fractions = cfg.scales.iter().map(|s| s.radius_fraction).collect();
            }
        }
        Ok(Self {
            inner,
            radius_fractions,
        })
    }

    /// A model predicting the same bandwidths (patch units) everywhere.
    #[staticmethod]
    #[pyo3(signature = (sigma_d, sigma_n, radius_fractions=None, patch_size=400))]
    fn constant(
        sigma_d: f64,
        sigma_n: f64,
        radius_fractions: Option<Vec<f64>>,
        patch_size: usize,
    ) -> PyResult<Self> {
        let radius_fractions =
            radius_fractions.unwrap_or_else(|| lbf_core::patch::DEFAULT_RADIUS_FRACTIONS.to_vec());
        let arch = Architecture::standard(radius_fractions.len(), patch_size);
        Ok(Self {
            inner: LbfModel::constant(arch, sigma_d, sigma_n).map_err(to_py)?,
            radius_fractions,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn radius_fractions(&self) -> Vec<f64> {
        self.radius_fractions.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }
}

fn scales_of(fractions: &[f64]) -> Vec<ScaleSpec> {
    fractions.iter().copied().map(ScaleSpec::new).collect()
}

#[pyfunction]
fn read_xyz(path: PathBuf) -> PyResult<PyPointCloud> {
    io::read_xyz(path).map(Into::into).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (cloud, path, precision=io::DEFAULT_PRECISION))]
fn write_xyz(cloud: &PyPointCloud, path: PathBuf, precision: usize) -> PyResult<()> {
    io::write_xyz(&cloud.inner, path, precision).map_err(to_py)
}

#[pyfunction]
fn add_gaussian_noise(
    cloud: &PyPointCloud,
    sigma_fraction: f64,
    seed: u64,
) -> PyResult<PyPointCloud> {
    training::add_gaussian_noise(&cloud.inner, sigma_fraction, seed)
        .map(Into::into)
        .map_err(to_py)
}

/// Signed offset of `p` along `normal` as predicted by the bilateral weights.
#[pyfunction]
fn bilateral_displacement(
    p: [f64; 3],
    neighbors: Vec<[f64; 3]>,
    normal: [f64; 3],
    sigma_d: f64,
    sigma_n: f64,
) -> PyResult<f64> {
    let params = FilterParams::new(sigma_d, sigma_n).map_err(to_py)?;
    let ns: Vec<Vector3<f64>> = neighbors.into_iter().map(vec3).collect();
    filter::bilateral_displacement(&vec3(p), &ns, &vec3(normal), params).map_err(to_py)
}

/// Returns the denoised cloud and the indices of points left in place.
#[pyfunction]
#[pyo3(signature = (cloud, radius, sigma_d, sigma_n, iterations=1))]
fn denoise_classical(
    py: Python<'_>,
    cloud: &PyPointCloud,
    radius: f64,
    sigma_d: f64,
    sigma_n: f64,
    iterations: usize,
) -> PyResult<(PyPointCloud, Vec<usize>)> {
    let params = FilterParams::new(sigma_d, sigma_n).map_err(to_py)?;
    let inner = &cloud.inner;
    let (out, rep) = py
        .detach(|| filter::denoise_classical(inner, radius, params, iterations))
        .map_err(to_py)?;
    Ok((out.into(), rep.skipped))
}

type Sigmas = (f64, f64);

/// Returns the denoised cloud and per-point `(sigma_d, sigma_n)` in patch
/// units, `None` for skipped points.
#[pyfunction]
#[pyo3(signature = (cloud, model, seed=0))]
fn denoise_learned(
    py: Python<'_>,
    cloud: &PyPointCloud,
    model: &PyModel,
    seed: u64,
) -> PyResult<(PyPointCloud, Vec<Option<Sigmas>>)> {
    let scales = scales_of(&model.radius_fractions);
    let opts = LearnedOptions {
        seed,
        ..LearnedOptions::default()
    };
    let (inner, net) = (&cloud.inner, &model.inner);
    let (out, rep) = py
        .detach(|| filter::denoise_learned(inner, net, &scales, &opts))
        .map_err(to_py)?;
    let params = rep
        .params_used
        .iter()
        .map(|p| p.map(|p| (p.sigma_d, p.sigma_n)))
        .collect();
    Ok((out.into(), params))
}

#[pyfunction]
fn chamfer_distance(a: &PyPointCloud, b: &PyPointCloud) -> PyResult<f64> {
    metrics::chamfer_distance(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (denoised, clean, k=metrics::DEFAULT_MSE_K))]
fn mse(denoised: &PyPointCloud, clean: &PyPointCloud, k: usize) -> PyResult<f64> {
    metrics::mse(&denoised.inner, &clean.inner, k).map_err(to_py)
}

/// Trains on clouds with normals. `config` holds `key=value` lines; the
/// model and its sidecars are written to `out` when given. Returns the model
/// and the mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (shapes, config="", out=None))]
fn train(
    py: Python<'_>,
    shapes: Vec<PyPointCloud>,
    config: &str,
    out: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = TrainConfig::from_text(config).map_err(to_py)?;
    let clouds: Vec<CoreCloud> = shapes.into_iter().map(|s| s.inner).collect();
    let ckpt = py
        .detach(|| training::train(&clouds, &cfg, out.as_deref()))
        .map_err(to_py)?;
    let losses = ckpt.log.iter().map(|l| l.mean_loss).collect();
    Ok((
        PyModel {
            inner: ckpt.model,
            radius_fractions: cfg.scales.iter().map(|s| s.radius_fraction).collect(),
        },
        losses,
    ))
}

/// Seeded synthetic surface with normals: plane, sphere, cube, torus,
/// cylinder or octahedron.
#[pyfunction]
fn synthetic_shape(name: &str, n: usize, seed: u64) -> PyResult<PyPointCloud> {
    let make = match name {
        "plane" => shapes::plane,
        "sphere" => shapes::sphere,
        "cube" => shapes::cube,
        "torus" => shapes::torus,
        "cylinder" => shapes::cylinder,
        "octahedron" => shapes::octahedron,
        _ => return Err(PyValueError::new_err(format!("unknown shape {name:?}"))),
    };
    Ok(make(n, seed).into())
}

#[pymodule]
fn lbf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_xyz, m)?)?;
    m.add_function(wrap_pyfunction!(write_xyz, m)?)?;
    m.add_function(wrap_pyfunction!(add_gaussian_noise, m)?)?;
    m.add_function(wrap_pyfunction!(bilateral_displacement, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_classical, m)?)?;
    m.add_function(wrap_pyfunction!(denoise_learned, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_shape, m)?)?;
    Ok(())
}
