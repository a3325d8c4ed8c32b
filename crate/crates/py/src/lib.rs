//! Python module `downscale_py`: grids, verification metrics, EDM helpers,
//! experiment configuration and the experiment stages.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use downscale::diffusion::{precondition, EdmParams};
use downscale::experiment::{self, ExperimentConfig, Overrides, Stage};
use downscale::grid::{bilinear_upsample, block_coarsen, make_grid_pair, Extent, Field, GridPair};
use downscale::verification::{self, CrpsVariant};
use downscale::Error;

create_exception!(downscale_py, DownscaleError, PyException);

fn py_err(e: Error) -> PyErr {
    DownscaleError::new_err(format!("[exit {}] {e}", e.exit_code()))
}

fn to_field(rows: Vec<Vec<f32>>) -> PyResult<Field<f32>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(py_err(Error::Shape("ragged 2D list".into())));
    }
    Field::new(r, c, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn from_field(f: &Field<f32>) -> Vec<Vec<f32>> {
    f.as_slice().chunks(f.cols().max(1)).map(<[f32]>::to_vec).collect()
}

/// Coarse/fine grid pair over edge extents.
#[pyclass(name = "GridPair", frozen)]
struct PyGridPair {
    inner: GridPair,
}

#[pymethods]
impl PyGridPair {
    #[new]
    #[pyo3(signature = (lat_min, lat_max, lon_min, lon_max, coarse_res, fine_res))]
    fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, coarse_res: f64, fine_res: f64) -> PyResult<Self> {
        let e = Extent::edges(lat_min, lat_max, lon_min, lon_max);
        Ok(Self { inner: make_grid_pair(e, coarse_res, e, fine_res).map_err(py_err)? })
    }

    #[getter]
    fn coarse_shape(&self) -> (usize, usize) {
        self.inner.coarse.shape()
    }

    #[getter]
    fn fine_shape(&self) -> (usize, usize) {
        self.inner.fine.shape()
    }

    #[getter]
    fn factor(&self) -> Option<usize> {
        self.inner.integer_factor()
    }

    fn upsample(&self, field: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let f = to_field(field)?;
        Ok(from_field(&bilinear_upsample(&f, &self.inner).map_err(py_err)?))
    }

    fn coarsen(&self, field: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let k =
            self.inner.integer_factor().ok_or_else(|| py_err(Error::Grid("grid pair has no integer factor".into())))?;
        Ok(from_field(&block_coarsen(&to_field(field)?, k).map_err(py_err)?))
    }

    fn __repr__(&self) -> String {
        let (p, q) = self.inner.coarse.shape();
        let (m, n) = self.inner.fine.shape();
        format!("GridPair(coarse={p}x{q}, fine={m}x{n})")
    }
}

#[pyfunction]
fn mae(pred: Vec<f32>, truth: Vec<f32>) -> PyResult<f64> {
    verification::mae(&pred, &truth).map_err(py_err)
}

/// Gridded CRPS averaged over points; `members` holds one flat field per member.
#[pyfunction]
#[pyo3(signature = (members, obs, fair=false))]
fn crps(members: Vec<Vec<f32>>, obs: Vec<f32>, fair: bool) -> PyResult<f64> {
    let refs: Vec<&[f32]> = members.iter().map(Vec::as_slice).collect();
    let v = if fair { CrpsVariant::Fair } else { CrpsVariant::Standard };
    verification::crps_ensemble(&refs, &obs, v).map_err(py_err)
}

#[pyfunction]
fn fss(pred: Vec<Vec<f32>>, truth: Vec<Vec<f32>>, threshold: f64, window: usize) -> PyResult<f64> {
    verification::fss(&to_field(pred)?, &to_field(truth)?, threshold, window).map_err(py_err)
}

/// Variance-quartile stratification of absolute errors, as a dict.
#[pyfunction]
fn variance_groups<'py>(py: Python<'py>, variance: Vec<f32>, abs_error: Vec<f32>) -> PyResult<Bound<'py, PyDict>> {
    let g = verification::variance_groups(&variance, &abs_error).map_err(py_err)?;
    let d = PyDict::new(py);
    for (label, v) in verification::UncertaintyGroups::LABELS.iter().zip(g.mae) {
        d.set_item(*label, v)?;
    }
    d.set_item("thresholds", g.thresholds.to_vec())?;
    d.set_item("sizes", g.sizes.to_vec())?;
    d.set_item("group", g.group)?;
    Ok(d)
}

/// Heun noise levels for the default EDM settings with `n_steps` steps.
#[pyfunction]
#[pyo3(signature = (n_steps=18))]
fn edm_schedule(n_steps: usize) -> PyResult<Vec<f64>> {
    let p = EdmParams { n_steps, ..EdmParams::default() };
    p.validate().map_err(py_err)?;
    Ok(p.schedule())
}

/// `(c_skip, c_out, c_in, c_noise)` at noise level `sigma`.
#[pyfunction]
#[pyo3(signature = (sigma, sigma_data=0.5))]
fn edm_precondition(sigma: f64, sigma_data: f64) -> PyResult<(f64, f64, f64, f64)> {
    let p = precondition(sigma, sigma_data).map_err(py_err)?;
    Ok((p.c_skip, p.c_out, p.c_in, p.c_noise))
}

/// Experiment configuration loaded from TOML.
#[pyclass(name = "ExperimentConfig")]
struct PyConfig {
    inner: ExperimentConfig,
}

fn stage(name: &str) -> PyResult<Stage> {
    Ok(match name {
        "data" => Stage::Data,
        "regression" => Stage::Regression,
        "diffusion" => Stage::Diffusion,
        "predict" => Stage::Predict,
        "evaluate" => Stage::Evaluate,
        "forecast" => Stage::Forecast,
        other => return Err(py_err(Error::Config(format!("unknown stage '{other}'")))),
    })
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, seed=None, members=None, out=None))]
    fn new(path: Option<PathBuf>, seed: Option<u64>, members: Option<usize>, out: Option<PathBuf>) -> PyResult<Self> {
        let ov = Overrides { seed, members, out };
        let inner = match path {
            Some(p) => ExperimentConfig::load(&p, &ov).map_err(py_err)?,
            None => {
                let mut c = ExperimentConfig::default();
                if let Some(s) = ov.seed {
                    c.seeds = downscale::experiment::Seeds::all(s);
                }
                if let Some(m) = ov.members {
                    c.predict.n_members = m;
                }
                if let Some(o) = ov.out {
                    c.output_dir = o;
                }
                c
            }
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(text).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn stage_hash(&self, stage_name: &str) -> PyResult<String> {
        Ok(self.inner.stage_hash(stage(stage_name)?))
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[getter]
    fn n_members(&self) -> usize {
        self.inner.predict.n_members
    }
}

/// Runs one experiment stage and returns its printed summary.
#[pyfunction]
fn run_stage(py: Python<'_>, config: PyRef<'_, PyConfig>, name: &str) -> PyResult<String> {
    let cfg = config.inner.clone();
    let name = name.to_string();
    py.detach(move || -> Result<String, Error> {
        Ok(match name.as_str() {
            "make-synthetic" => experiment::cmd_make_synthetic(&cfg)?.to_string(),
            "train-regression" => {
                let r = experiment::cmd_train_regression(&cfg)?;
                format!("best epoch {} score {}", r.best_epoch, r.best_score)
            }
            "train-diffusion" => {
                let r = experiment::cmd_train_diffusion(&cfg)?;
                format!("best epoch {} val loss {}", r.best_epoch, r.best_val_loss)
            }
            "predict" => experiment::cmd_predict(&cfg)?.to_string(),
            "evaluate" => experiment::cmd_evaluate(&cfg)?.to_string(),
            "forecast-emulate" => experiment::forecast::curves_csv(&experiment::cmd_forecast_emulate(&cfg)?),
            other => return Err(Error::Config(format!("unknown stage '{other}'"))),
        })
    })
    .map_err(py_err)
}

#[pymodule]
fn downscale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DownscaleError", m.py().get_type::<DownscaleError>())?;
    m.add_class::<PyGridPair>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(fss, m)?)?;
    m.add_function(wrap_pyfunction!(variance_groups, m)?)?;
    m.add_function(wrap_pyfunction!(edm_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(edm_precondition, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
