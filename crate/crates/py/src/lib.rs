//! Python bindings: quantization, maps, observations, model inference and
//! the command-line pipeline.

use std::path::PathBuf;

use edgenav::cli::Cli;
use edgenav::config::RunConfig;
use edgenav::model::{ModelMode, MultiExitModel, QuantizeOptions, TrainPhase};
use edgenav::navsim::{self, Heading, Metrics, Pos};
use edgenav::numerics::{Matrix, ProbVector, Rng};
use edgenav::quantizer::{self, Scheme};
use edgenav::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for edgenav::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_heading(s: &str) -> PyResult<Heading> {
    match s.to_ascii_lowercase().as_str() {
        "n" | "north" => Ok(Heading::North),
        "e" | "east" => Ok(Heading::East),
        "s" | "south" => Ok(Heading::South),
        "w" | "west" => Ok(Heading::West),
        _ => Err(PyValueError::new_err(format!("unknown heading {s:?}"))),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix<f32>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Matrix::new(r, c, rows.into_iter().flatten().collect()).py()
}

fn nested(m: &Matrix<f32>) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// A block-quantized matrix.
#[pyclass(name = "QuantizedTensor", module = "edgenav", frozen)]
struct PyQuantized(quantizer::QuantizedTensor);

#[pymethods]
impl PyQuantized {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[getter]
    fn block_size(&self) -> usize {
        self.0.block_size()
    }

    #[getter]
    fn scheme(&self) -> &'static str {
        self.0.scheme().name()
    }

    #[getter]
    fn scales(&self) -> Vec<f32> {
        self.0.scales().to_vec()
    }

    #[getter]
    fn codes(&self) -> Vec<u8> {
        self.0.codes()
    }

    fn storage_bytes(&self) -> usize {
        self.0.storage_bytes()
    }

    fn dequantize(&self) -> PyResult<Vec<Vec<f32>>> {
        Ok(nested(&quantizer::dequantize(&self.0).py()?))
    }

    /// `(relative Frobenius error, max absolute error)` against `original`.
    fn error(&self, original: Vec<Vec<f32>>) -> PyResult<(f64, f64)> {
        let e = quantizer::quant_error(&matrix(original)?, &self.0).py()?;
        Ok((e.rel_frobenius, e.max_abs))
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.0.shape();
        format!("QuantizedTensor({r}x{c}, {}, block {})", self.0.scheme().name(), self.0.block_size())
    }
}

#[pyfunction]
fn nf4_codebook() -> Vec<f32> {
    quantizer::nf4_codebook().values().to_vec()
}

#[pyfunction]
#[pyo3(signature = (rows, block_size = 64, scheme = "nf4"))]
fn quantize(rows: Vec<Vec<f32>>, block_size: usize, scheme: &str) -> PyResult<PyQuantized> {
    let scheme = Scheme::parse(scheme).py()?;
    Ok(PyQuantized(quantizer::quantize(&matrix(rows)?, block_size, scheme).py()?))
}

/// Shannon entropy in nats of a probability vector.
#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    Ok(edgenav::model::entropy(&ProbVector::new(p).py()?))
}

/// An occupancy grid with a wall border.
#[pyclass(name = "GridMap", module = "edgenav", frozen)]
struct PyGridMap(navsim::GridMap);

#[pymethods]
impl PyGridMap {
    #[staticmethod]
    fn generate(seed: u64, width: usize, height: usize, density: f64) -> PyResult<Self> {
        Ok(Self(navsim::generate_map(seed, width, height, density).py()?))
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self(navsim::GridMap::parse(text).py()?))
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn free_cells(&self) -> Vec<(usize, usize)> {
        self.0.free_cells().into_iter().map(|p| (p.x, p.y)).collect()
    }

    /// Geodesic distance in metres between two free cells.
    fn shortest_path_len(&self, a: (usize, usize), b: (usize, usize)) -> PyResult<f64> {
        navsim::shortest_path_len(&self.0, Pos::new(a.0, a.1), Pos::new(b.0, b.1)).py()
    }

    fn __repr__(&self) -> String {
        format!("GridMap({}x{})", self.0.width(), self.0.height())
    }
}

/// Egocentric view of an agent.
#[pyclass(name = "Observation", module = "edgenav", frozen)]
struct PyObservation(navsim::Observation);

#[pymethods]
impl PyObservation {
    #[getter]
    fn window(&self) -> Vec<Vec<u8>> {
        (0..self.0.window_size).map(|i| self.0.window_row(i).to_vec()).collect()
    }

    #[getter]
    fn goal_compass(&self) -> (f32, f32) {
        (self.0.goal_compass[0], self.0.goal_compass[1])
    }

    #[getter]
    fn goal_visible(&self) -> bool {
        self.0.goal_visible
    }
}

/// Observation of an agent at `position` facing `heading` (N, E, S or W).
#[pyfunction]
#[pyo3(signature = (map, position, heading, goal, window = 7))]
fn observe(map: PyRef<'_, PyGridMap>, position: (usize, usize), heading: &str, goal: (usize, usize), window: usize) -> PyResult<PyObservation> {
    let state = navsim::AgentState::new(Pos::new(position.0, position.1), parse_heading(heading)?, Pos::new(goal.0, goal.1));
    Ok(PyObservation(navsim::observe(&map.0, &state, window).py()?))
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("sr", m.sr)?;
    d.set_item("spl", m.spl)?;
    d.set_item("exit_ratio", m.exit_ratio)?;
    d.set_item("latency_proxy", m.latency_proxy)?;
    d.set_item("mean_entropy_at_exit", m.mean_entropy_at_exit)?;
    d.set_item("n_episodes", m.n_episodes)?;
    Ok(d)
}

/// A multi-exit action model, full precision or quantized.
#[pyclass(name = "Model", module = "edgenav", frozen)]
struct PyModel(MultiExitModel<f32>);

#[pymethods]
impl PyModel {
    /// Fresh model; `config` is run-configuration TOML whose `[model]`
    /// section sets the architecture.
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = RunConfig::parse(config.unwrap_or("")).py()?;
        Ok(Self(MultiExitModel::new(cfg.model, &mut Rng::derived(seed, "init")).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(edgenav::weightfile::read_model(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        edgenav::weightfile::write_model(&path, &self.0).py()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.0.mode {
            ModelMode::FullPrecision => "full_precision",
            ModelMode::Quantized => "quantized",
        }
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.0.config.num_layers
    }

    #[getter]
    fn exit_layers(&self) -> Vec<usize> {
        self.0.config.exit_layers.clone()
    }

    /// Trainable parameters when fine-tuning (quantized) or pretraining.
    fn trainable_parameter_count(&self) -> usize {
        let phase = match self.0.mode {
            ModelMode::Quantized => TrainPhase::Finetune,
            ModelMode::FullPrecision => TrainPhase::Pretrain { exit_heads: true },
        };
        self.0.trainable_parameter_count(phase)
    }

    /// Quantized copy with fresh adapters, plus the per-tensor
    /// `(name, rel_frobenius, max_abs)` report.
    #[pyo3(signature = (seed = 0, scheme = "nf4", all_linear = false))]
    fn quantize(&self, seed: u64, scheme: &str, all_linear: bool) -> PyResult<(PyModel, Vec<(String, f64, f64)>)> {
        let opts = QuantizeOptions {
            scheme: Scheme::parse(scheme).py()?,
            all_linear,
            attach_lora: true,
        };
        let (q, report) = self.0.quantize(opts, &mut Rng::derived(seed, "lora-init")).py()?;
        let report = report.into_iter().map(|(n, e)| (n, e.rel_frobenius, e.max_abs)).collect();
        Ok((PyModel(q), report))
    }

    /// Per-exit and final action distributions after running every block.
    fn forward_full<'py>(&self, py: Python<'py>, obs: PyRef<'_, PyObservation>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.0.forward_full(&obs.0).py()?;
        let d = PyDict::new(py);
        let exits: Vec<Vec<f32>> = out.exit_probs.iter().map(|p| p.as_slice().to_vec()).collect();
        d.set_item("exit_probs", exits)?;
        d.set_item("final_probs", out.final_probs.as_slice().to_vec())?;
        Ok(d)
    }

    /// Entropy-gated inference: stops at the first exit with entropy <= tau.
    fn dee_infer<'py>(&self, py: Python<'py>, obs: PyRef<'_, PyObservation>, tau: f64) -> PyResult<Bound<'py, PyDict>> {
        let out = self.0.dee_infer(&obs.0, tau).py()?;
        let d = PyDict::new(py);
        d.set_item("action", out.action.index())?;
        d.set_item("exit_layer", out.exit_layer)?;
        d.set_item("probs", out.probs.as_slice().to_vec())?;
        d.set_item("entropy", out.entropy)?;
        d.set_item("blocks_executed", out.blocks_executed)?;
        d.set_item("early", out.early)?;
        Ok(d)
    }

    /// Closed-loop metrics on `episodes` random start/goal pairs drawn from
    /// `maps`; a negative `tau` runs at full depth.
    #[pyo3(signature = (maps, episodes, tau, seed = 0, max_steps = 200, success_radius = 1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        maps: Vec<PyRef<'_, PyGridMap>>,
        episodes: usize,
        tau: f64,
        seed: u64,
        max_steps: usize,
        success_radius: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let maps: Vec<navsim::GridMap> = maps.iter().map(|m| m.0.clone()).collect();
        let ids: Vec<usize> = (0..maps.len()).collect();
        let specs = navsim::sample_episodes(&maps, &ids, episodes, success_radius, &mut Rng::derived(seed, "eval-episodes")).py()?;
        let nav = navsim::NavConfig {
            window_size: self.0.config.window,
            success_radius,
            max_steps,
        };
        let m = navsim::evaluate(&self.0.prepare().py()?, &maps, &specs, tau, &nav).py()?;
        metrics_dict(py, &m)
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!("Model({}, L={}, d={}, exits={:?})", self.mode(), c.num_layers, c.d_model, c.exit_layers)
    }
}

/// Runs an `edgenav` command, e.g. `run_cli(["genmaps", "--config", "run.toml"])`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<()> {
    use clap::Parser as _;
    let cli = Cli::try_parse_from(std::iter::once("edgenav".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    edgenav::cli::run(cli).py()
}

/// Quantized early-exit action models for grid-world navigation.
#[pymodule(name = "edgenav")]
mod edgenav_module {
    #[pymodule_export]
    use super::{entropy, nf4_codebook, observe, quantize, run_cli, PyGridMap, PyModel, PyObservation, PyQuantized};
}
