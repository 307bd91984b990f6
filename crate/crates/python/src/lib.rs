//! Python bindings for `vmfcl`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vmfcl::backbone::{forward, BackboneParams};
use vmfcl::bench::{run_experiment, Method, RunConfig};
use vmfcl::checkpoint::{read_checkpoint, write_checkpoint};
use vmfcl::mixture::ClassMixture;
use vmfcl::vmf::{self, normalize as unit, VmfParams};

fn err(e: vmfcl::Error) -> PyErr {
    match e {
        vmfcl::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyfunction]
fn normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(unit(&v).map_err(err)?.into_inner())
}

#[pyfunction]
fn log_bessel_i(order: f64, x: f64) -> PyResult<f64> {
    vmf::log_bessel_i(order, x).map_err(err)
}

#[pyfunction]
fn log_normalizer(dim: usize, kappa: f64) -> PyResult<f64> {
    vmf::log_normalizer(dim, kappa).map_err(err)
}

#[pyfunction]
fn vmf_log_density(v: Vec<f64>, mean: Vec<f64>, kappa: f64) -> PyResult<f64> {
    let p = VmfParams::new(unit(&mean).map_err(err)?, kappa).map_err(err)?;
    vmf::vmf_log_density(&unit(&v).map_err(err)?, &p).map_err(err)
}

/// Per-class vMF mixtures sharing one concentration.
#[pyclass]
struct ModelBank {
    inner: vmfcl::mixture::ModelBank,
    backbone: Option<BackboneParams>,
}

#[pymethods]
impl ModelBank {
    #[new]
    fn new(dim: usize, kappa: f64) -> PyResult<Self> {
        Ok(Self { inner: vmfcl::mixture::ModelBank::new(dim, kappa).map_err(err)?, backbone: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, backbone) = read_checkpoint(&path).map_err(err)?;
        Ok(Self { inner, backbone })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.inner, self.backbone.as_ref()).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    fn add_class(&mut self, class_id: u32, means: Vec<Vec<f64>>) -> PyResult<()> {
        let means = means.iter().map(|m| unit(m)).collect::<vmfcl::Result<Vec<_>>>().map_err(err)?;
        self.inner.insert(ClassMixture::new(class_id, means)).map_err(err)
    }

    fn means(&self, class_id: u32) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.mixture(class_id).map_err(err)?;
        Ok(m.means().iter().map(|u| u.as_slice().to_vec()).collect())
    }

    fn component_counts(&self) -> BTreeMap<u32, usize> {
        self.inner.component_counts()
    }

    /// Maps a raw input through the stored backbone, or just normalizes it.
    fn embed(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let v = match &self.backbone {
            Some(p) => forward(p, &x),
            None => unit(&x),
        };
        Ok(v.map_err(err)?.into_inner())
    }

    fn predict(&self, v: Vec<f64>) -> PyResult<u32> {
        self.inner.predict(&unit(&v).map_err(err)?).map_err(err)
    }

    fn class_posterior(&self, v: Vec<f64>) -> PyResult<Vec<(u32, f64)>> {
        self.inner.class_posterior(&unit(&v).map_err(err)?).map_err(err)
    }

    fn component_posterior(&self, class_id: u32, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.component_posterior(class_id, &unit(&v).map_err(err)?).map_err(err)
    }
}

/// Runs a full experiment from a config file and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, seed=None, method=None, out=None))]
fn run(config: PathBuf, seed: Option<u64>, method: Option<&str>, out: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = RunConfig::load(&config).map_err(err)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(m) = method {
        cfg.method = m.parse::<Method>().map_err(err)?;
    }
    let outcome = run_experiment(&cfg, out.as_deref()).map_err(err)?;
    Ok(outcome.report.to_json())
}

#[pymodule]
fn pyvmfcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(log_bessel_i, m)?)?;
    m.add_function(wrap_pyfunction!(log_normalizer, m)?)?;
    m.add_function(wrap_pyfunction!(vmf_log_density, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<ModelBank>()?;
    Ok(())
}
