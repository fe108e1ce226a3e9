//! Python bindings: simulate a dataset, run the odometry, enhance a frame and
//! score a trajectory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use evio_core::config::PipelineConfig;
use evio_core::dataset::{load_dataset, read_trajectory_file};
use evio_core::depth_prior::{ConstantDepth, DepthSource, FileDepth};
use evio_core::estimator::run_odometry;
use evio_core::evaluation::{evaluate as core_evaluate, write_trajectory, AlignMode, TrajectoryFile, DEFAULT_MAX_DT};
use evio_core::event_stream::NANOS_PER_SEC;
use evio_core::frame_enhance::enhance_event_frame;
use evio_core::geometry::{Camera, Pose, Rotation, Vec3};
use evio_core::image::GrayImage;
use evio_core::simulator::{export_dataset, simulate as core_simulate, SimSpec};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(evio, EvioError, PyException);

fn err(e: evio_core::Error) -> PyErr {
    match e {
        evio_core::Error::Config(_) | evio_core::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => EvioError::new_err(other.to_string()),
    }
}

fn io_err(path: &std::path::Path, e: std::io::Error) -> PyErr {
    EvioError::new_err(format!("{}: {e}", path.display()))
}

/// Pipeline configuration. Keys and values are the same as the CLI's `--set`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone, Default)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, **overrides))]
    fn new(path: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = match path {
            Some(p) => PipelineConfig::load(p).map_err(err)?,
            None => PipelineConfig::default(),
        };
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                // python identifiers cannot hold dots, so `klt__window` means `klt.window`
                let key = k.extract::<String>()?.replace("__", ".");
                inner.set(&key, &v.str()?.to_string()).map_err(err)?;
            }
            inner.validate().map_err(err)?;
        }
        Ok(Self { inner })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(err)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value.str()?.to_string()).map_err(err)?;
        self.inner.validate().map_err(err)
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        PipelineConfig::keys().collect()
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    fn __repr__(&self) -> String {
        format!("Config({} keys)", PipelineConfig::keys().count())
    }
}

/// Timestamped camera-to-world poses. Quaternions are `(qx, qy, qz, qw)`.
#[pyclass(name = "Trajectory", from_py_object)]
#[derive(Clone)]
struct PyTrajectory {
    inner: TrajectoryFile,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    fn new(timestamps: Vec<f64>, positions: Vec<[f64; 3]>, quaternions: Vec<[f64; 4]>) -> PyResult<Self> {
        if timestamps.len() != positions.len() || timestamps.len() != quaternions.len() {
            return Err(PyValueError::new_err("timestamps, positions and quaternions differ in length"));
        }
        let samples = timestamps
            .iter()
            .zip(&positions)
            .zip(&quaternions)
            .map(|((t, p), q)| {
                let pose = Pose::new(Rotation::from_wxyz(q[3], q[0], q[1], q[2]), Vec3::new(p[0], p[1], p[2]));
                ((t * NANOS_PER_SEC as f64).round() as i64, pose)
            })
            .collect();
        Ok(Self { inner: TrajectoryFile { samples } })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_trajectory_file(&path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(f);
        write_trajectory(&mut w, &self.inner).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))
    }

    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.inner.samples.iter().map(|(t, _)| *t as f64 / NANOS_PER_SEC as f64).collect()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.samples.iter().map(|(_, p)| [p.translation.x, p.translation.y, p.translation.z]).collect()
    }

    #[getter]
    fn quaternions(&self) -> Vec<[f64; 4]> {
        self.inner
            .samples
            .iter()
            .map(|(_, p)| {
                let [w, x, y, z] = p.rotation.wxyz();
                [x, y, z, w]
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory({} poses)", self.inner.len())
    }
}

/// Output of `run`.
#[pyclass(name = "RunResult", skip_from_py_object)]
struct PyRunResult {
    #[pyo3(get)]
    trajectory: PyTrajectory,
    #[pyo3(get)]
    scale: f64,
    /// `(start_s, end_s, frames)` per stretch where tracking was lost.
    #[pyo3(get)]
    gaps: Vec<(f64, f64, usize)>,
    #[pyo3(get)]
    events_per_s: f64,
    #[pyo3(get)]
    frames_per_s: f64,
}

#[pymethods]
impl PyRunResult {
    fn __repr__(&self) -> String {
        format!("RunResult({} poses, {} gaps, scale {:.4})", self.trajectory.inner.len(), self.gaps.len(), self.scale)
    }
}

/// Renders a synthetic dataset into `out` and returns counts of what was written.
#[pyfunction]
#[pyo3(signature = (out, trajectory="circle", duration=2.0, seed=None, scene=None, contrast=None, noise=None, depth_rate=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    out: PathBuf,
    trajectory: &str,
    duration: f64,
    seed: Option<u64>,
    scene: Option<&str>,
    contrast: Option<f64>,
    noise: Option<f64>,
    depth_rate: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(PyValueError::new_err(format!("duration must be positive, got {duration}")));
    }
    let mut spec = SimSpec { trajectory: trajectory.into(), duration, ..SimSpec::default() };
    if let Some(s) = scene {
        spec.scene = s.parse().map_err(err)?;
    }
    if let Some(c) = contrast {
        spec.events.contrast = c;
    }
    if let Some(n) = noise {
        spec.events.noise_rate = n;
    }
    if let Some(s) = seed {
        spec.events.seed = s;
        spec.imu_noise.seed = s;
    }
    if let Some(r) = depth_rate {
        spec.depth_rate = r;
    }
    let (_, _, data) = core_simulate(&spec, &Camera::default()).map_err(err)?;
    export_dataset(&out, &data).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("events", data.events.events.len())?;
    d.set_item("imu", data.imu.len())?;
    d.set_item("poses", data.groundtruth.len())?;
    d.set_item("depth_frames", data.depth_frames.len())?;
    Ok(d)
}

/// Runs the odometry over a dataset directory.
///
/// `depth` is `"auto"` (the dataset's `depth/` folder when present), `"none"`,
/// a constant in meters, or a directory of depth maps.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, depth="auto"))]
fn run(dataset: PathBuf, config: Option<PyConfig>, depth: &str) -> PyResult<PyRunResult> {
    let cfg = config.unwrap_or_default().inner;
    let data = load_dataset(&dataset).map_err(err)?;
    let source: Option<Box<dyn DepthSource>> = match depth {
        _ if !cfg.depth.enabled => None,
        "none" => None,
        "auto" if data.depth_dir().is_dir() => Some(Box::new(FileDepth::open(data.depth_dir()).map_err(err)?)),
        "auto" => None,
        s => match s.parse::<f64>() {
            Ok(m) if m > 0.0 && m.is_finite() => Some(Box::new(ConstantDepth(m))),
            Ok(m) => return Err(PyValueError::new_err(format!("constant depth must be positive, got {m}"))),
            Err(_) => Some(Box::new(FileDepth::open(s).map_err(err)?)),
        },
    };
    let out = run_odometry(&data.events, &data.imu, &data.camera, &cfg, source.as_deref()).map_err(err)?;
    let secs = |t: i64| t as f64 / NANOS_PER_SEC as f64;
    Ok(PyRunResult {
        trajectory: PyTrajectory { inner: TrajectoryFile { samples: out.frames.iter().map(|f| (f.timestamp, f.pose)).collect() } },
        scale: out.scale,
        gaps: out.gaps.iter().map(|g| (secs(g.start), secs(g.end), g.frames)).collect(),
        events_per_s: out.timings.warp_events_per_sec(),
        frames_per_s: out.timings.frames_per_sec(),
    })
}

/// Enhances a row-major grayscale frame and returns the result the same way.
#[pyfunction]
#[pyo3(signature = (pixels, width, height, config=None))]
fn enhance(pixels: Vec<f32>, width: usize, height: usize, config: Option<PyConfig>) -> PyResult<Vec<f32>> {
    let cfg = config.unwrap_or_default().inner;
    let img = GrayImage::from_vec(width, height, pixels).map_err(err)?;
    Ok(enhance_event_frame(&img, &cfg.enhance).map_err(err)?.into_vec())
}

/// Absolute position error after alignment (`se3`, `sim3` or `none`).
#[pyfunction]
#[pyo3(signature = (est, gt, align="se3", max_dt=None))]
fn evaluate<'py>(
    py: Python<'py>,
    est: &PyTrajectory,
    gt: &PyTrajectory,
    align: &str,
    max_dt: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: AlignMode = align.parse().map_err(err)?;
    let max_dt = match max_dt {
        Some(s) if s > 0.0 && s.is_finite() => (s * NANOS_PER_SEC as f64).round() as i64,
        Some(s) => return Err(PyValueError::new_err(format!("max_dt must be positive, got {s}"))),
        None => DEFAULT_MAX_DT,
    };
    let r = core_evaluate(&est.inner, &gt.inner, max_dt, mode).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("pairs", r.association.pairs.len())?;
    d.set_item("rmse", r.stats.rmse)?;
    d.set_item("mean", r.stats.mean)?;
    d.set_item("median", r.stats.median)?;
    d.set_item("max", r.stats.max)?;
    d.set_item("min", r.stats.min)?;
    d.set_item("scale", r.alignment.scale)?;
    Ok(d)
}

#[pymodule]
fn evio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EvioError", m.py().get_type::<EvioError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(enhance, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
