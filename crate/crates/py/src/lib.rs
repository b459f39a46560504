//! Python bindings: the association losses, the Hungarian solver, the stream
//! simulator, training, and checkpoint loading.
//!
//! Matrices cross the boundary as lists of columns (each column a list of
//! floats), matching the column-per-instance layout used throughout.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cyclassoc::cycle::{
    adaptive_temperature as core_temperature, cycle_association_forward, EmbeddingMatrix,
    LossConfig, LossMode,
};
use cyclassoc::diffmath::{Graph, Matrix};
use cyclassoc::evalkit;
use cyclassoc::sim::{measure_symmetry, FramePairBatch, Simulator, StreamConfig};
use cyclassoc::trainer;

fn err(e: cyclassoc::Error) -> PyErr {
    match e {
        cyclassoc::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_from_columns(cols: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_columns(&cols).map_err(err)
}

fn columns_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|j| m.column(j)).collect()
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
}

/// Softmax temperature keeping the positive/negative gap at `delta` for rows
/// of length `k`.
#[pyfunction]
fn adaptive_temperature(k: usize, epsilon: f64, delta: f64) -> PyResult<f64> {
    core_temperature(k, epsilon, delta).map_err(err)
}

/// Cycle-association loss of two embedding sets given as lists of columns.
/// Columns are l2-normalized internally. Returns (loss, cycle matrix rows).
#[pyfunction]
#[pyo3(signature = (x1, x2, margin = 0.5, epsilon = 0.5, delta = 0.5, mode = "asymmetric"))]
fn cycle_association_loss(
    x1: Vec<Vec<f64>>,
    x2: Vec<Vec<f64>>,
    margin: f64,
    epsilon: f64,
    delta: f64,
    mode: &str,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let mode = match mode {
        "symmetric" => LossMode::Symmetric,
        "asymmetric" => LossMode::Asymmetric,
        other => return Err(PyValueError::new_err(format!("unknown loss mode {other:?}"))),
    };
    let cfg = LossConfig { margin, epsilon, delta, mode };
    let mut g = Graph::new();
    let raw1 = g.leaf(matrix_from_columns(x1)?);
    let raw2 = g.leaf(matrix_from_columns(x2)?);
    let e1 = EmbeddingMatrix::normalized(&mut g, raw1).map_err(err)?;
    let e2 = EmbeddingMatrix::normalized(&mut g, raw2).map_err(err)?;
    let out = cycle_association_forward(&mut g, e1, e2, &cfg).map_err(err)?;
    Ok((g.scalar_value(out.loss), rows_of(g.value(out.a_cycle))))
}

/// Minimum-cost assignment of rows to columns; None marks unassigned rows.
#[pyfunction]
fn hungarian_assign(cost_rows: Vec<Vec<f64>>) -> PyResult<Vec<Option<usize>>> {
    let cost = Matrix::from_rows(&cost_rows).map_err(err)?;
    evalkit::hungarian_assign(&cost).map_err(err)
}

fn pair_to_dict<'py>(py: Python<'py>, pair: &FramePairBatch) -> PyResult<Bound<'py, PyDict>> {
    let (obs1, obs2) = pair.observations();
    let (vids1, vids2) = pair.video_ids();
    let (truth1, truth2) = pair.ground_truth();
    let d = PyDict::new(py);
    d.set_item("obs1", columns_of(obs1))?;
    d.set_item("obs2", columns_of(obs2))?;
    d.set_item("vids1", vids1.to_vec())?;
    d.set_item("vids2", vids2.to_vec())?;
    d.set_item("truth1", truth1.to_vec())?;
    d.set_item("truth2", truth2.to_vec())?;
    d.set_item("tau", measure_symmetry(pair))?;
    Ok(d)
}

/// Synthetic multi-person stream generator with ground-truth identities.
#[pyclass(name = "Simulator")]
struct PySimulator {
    inner: Simulator,
}

#[pymethods]
impl PySimulator {
    #[new]
    #[pyo3(signature = (seed, n_identities = 16, d_obs = 32, n_cameras = 2,
                        tau_alpha = 0.9, tau_beta = 0.6, appearance_noise = 0.1,
                        camera_strength = 0.8, persons_per_frame = 6.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        n_identities: usize,
        d_obs: usize,
        n_cameras: usize,
        tau_alpha: f64,
        tau_beta: f64,
        appearance_noise: f64,
        camera_strength: f64,
        persons_per_frame: f64,
    ) -> PyResult<Self> {
        let cfg = StreamConfig {
            seed,
            n_identities,
            d_obs,
            n_cameras,
            tau_alpha,
            tau_beta,
            appearance_noise,
            camera_strength,
            persons_per_frame,
            ..StreamConfig::default()
        };
        Ok(PySimulator { inner: Simulator::new(cfg).map_err(err)? })
    }

    /// One same-camera frame pair with overlap near tau_alpha.
    fn sample_intra_pair<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let pair = self.inner.sample_intra_pair().map_err(err)?;
        pair_to_dict(py, &pair)
    }

    /// One two-camera frame pair with overlap near tau_beta.
    fn sample_inter_pair<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let pair = self.inner.sample_inter_pair().map_err(err)?;
        pair_to_dict(py, &pair)
    }
}

/// A trained embedding model loaded from a checkpoint file.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: cyclassoc::encoder::Encoder,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (encoder, _) = cyclassoc::checkpoint::load_checkpoint(path.as_ref()).map_err(err)?;
        Ok(PyEncoder { inner: encoder })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    /// Embeds observation columns; outputs are unit-length columns.
    fn embed(&self, obs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = matrix_from_columns(obs)?;
        Ok(columns_of(&self.inner.embed(&m).map_err(err)?))
    }
}

/// Runs a full training job from a TOML config string; writes the usual
/// artifacts into `out_dir` and returns the final epoch metrics.
#[pyfunction]
fn run_training<'py>(
    py: Python<'py>,
    config_toml: &str,
    out_dir: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = cyclassoc::config::RunConfig::from_toml_str(config_toml).map_err(err)?;
    let out = std::path::PathBuf::from(out_dir);
    std::fs::create_dir_all(&out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    cfg.echo_to(&out).map_err(err)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.nan_dump_dir = Some(out.clone());
    let mut sink = trainer::CsvSink::create(&out.join("metrics.csv")).map_err(err)?;
    let outcome = trainer::train(&train_cfg, &mut sink).map_err(err)?;
    cyclassoc::checkpoint::save_checkpoint(
        &out.join("checkpoint.bin"),
        &outcome.encoder,
        &outcome.optimizer,
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    if let Some(last) = outcome.metrics.last() {
        d.set_item("epochs", outcome.metrics.len())?;
        d.set_item("loss_asym", last.loss_asym)?;
        d.set_item("loss_xbm", last.loss_xbm)?;
        d.set_item("cycle_acc", last.cycle_acc)?;
        d.set_item("rank1_probe", last.rank1_probe)?;
    }
    d.set_item("checkpoint", out.join("checkpoint.bin").to_str())?;
    d.set_item("metrics_csv", out.join("metrics.csv").to_str())?;
    Ok(d)
}

#[pymodule]
fn cyclassoc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(adaptive_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(cycle_association_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_assign, m)?)?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    m.add_class::<PySimulator>()?;
    m.add_class::<PyEncoder>()?;
    Ok(())
}
