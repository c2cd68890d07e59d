//! Python bindings. Volumes cross the boundary as flat x-fastest `float32`
//! lists plus a `(z, y, x)` shape; `numpy.asarray(v.data()).reshape(v.dims)`
//! recovers the array.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use rstar4d::config::RunConfig;
use rstar4d::error::Error;
use rstar4d::metrics;
use rstar4d::net::{self, NetConfig};
use rstar4d::phantom::Phantom4D;
use rstar4d::recon::{self, ReconOptions};
use rstar4d::respiration::{self, ShroudParams, SynthParams};
use rstar4d::rsa;
use rstar4d::scanner::{self, ScanOptions};
use rstar4d::volume::{GridSpec, Volume3D, Volume4D};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for rstar4d::error::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn grid(dims: [usize; 3], spacing: [f64; 3]) -> PyResult<GridSpec> {
    let g = GridSpec::centered(dims, spacing);
    g.validate().py()?;
    Ok(g)
}

/// 3D image on a centred grid.
#[pyclass(name = "Volume", module = "rstar4d", from_py_object)]
#[derive(Clone)]
struct PyVolume(Volume3D);

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, spacing, data))]
    fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> PyResult<Self> {
        Ok(PyVolume(Volume3D::from_data(grid(dims, spacing)?, data).py()?))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume(Volume3D::read_rsv(&path).py()?))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_rsv(&path).py()
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.grid.dims
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.0.grid.spacing
    }

    fn data(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    fn get(&self, k: usize, j: usize, i: usize) -> PyResult<f32> {
        let [nz, ny, nx] = self.0.grid.dims;
        if k >= nz || j >= ny || i >= nx {
            return Err(PyValueError::new_err(format!("voxel ({k}, {j}, {i}) outside {:?}", self.0.grid.dims)));
        }
        Ok(self.0.get(k, j, i))
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.0.grid.dims, self.0.grid.spacing)
    }
}

/// Phase-resolved series of volumes on one grid.
#[pyclass(name = "Volume4D", module = "rstar4d", from_py_object)]
#[derive(Clone)]
struct PyVolume4D(Volume4D);

#[pymethods]
impl PyVolume4D {
    #[new]
    fn new(phases: Vec<PyVolume>) -> PyResult<Self> {
        Ok(PyVolume4D(Volume4D::new(phases.into_iter().map(|v| v.0).collect()).py()?))
    }

    #[staticmethod]
    #[pyo3(signature = (dir, prefix = "phase"))]
    fn read(dir: PathBuf, prefix: &str) -> PyResult<Self> {
        Ok(PyVolume4D(Volume4D::read_dir(&dir, prefix).py()?))
    }

    #[pyo3(signature = (dir, prefix = "phase"))]
    fn write(&self, dir: PathBuf, prefix: &str) -> PyResult<()> {
        self.0.write_dir(&dir, prefix).py()
    }

    #[getter]
    fn n_phases(&self) -> usize {
        self.0.n_phases()
    }

    fn phase(&self, i: usize) -> PyResult<PyVolume> {
        self.0.phases.get(i).cloned().map(PyVolume).ok_or_else(|| PyValueError::new_err(format!("no phase {i}")))
    }

    fn mean(&self) -> PyVolume {
        PyVolume(self.0.mean())
    }

    fn __len__(&self) -> usize {
        self.0.n_phases()
    }
}

#[pyclass(name = "Phantom", module = "rstar4d", from_py_object)]
#[derive(Clone)]
struct PyPhantom(Phantom4D);

#[pymethods]
impl PyPhantom {
    /// The canonical breathing thorax.
    #[staticmethod]
    fn thorax() -> Self {
        PyPhantom(Phantom4D::thorax_v1())
    }

    /// Seeded anatomical variation of the thorax; variant 0 is the canonical one.
    #[staticmethod]
    fn variant(variant: u64) -> Self {
        PyPhantom(Phantom4D::thorax_variant(variant))
    }

    /// HU image at breathing amplitude `amplitude` (1 = end-inhale).
    fn sample(&self, amplitude: f64, dims: [usize; 3], spacing: [f64; 3]) -> PyResult<PyVolume> {
        Ok(PyVolume(self.0.sample_volume(amplitude, &grid(dims, spacing)?).py()?))
    }

    fn ground_truth(&self, n_phases: usize, dims: [usize; 3], spacing: [f64; 3]) -> PyResult<PyVolume4D> {
        let amps = respiration::phase_amplitudes(n_phases);
        Ok(PyVolume4D(self.0.sample_ground_truth_4d(n_phases, &amps, &grid(dims, spacing)?).py()?))
    }
}

#[pyclass(name = "BreathingSignal", module = "rstar4d", from_py_object)]
#[derive(Clone)]
struct PySignal(respiration::BreathingSignal);

#[pymethods]
impl PySignal {
    #[staticmethod]
    #[pyo3(signature = (duration = 60.0, mean_period = 4.0, period_jitter = 0.0, amplitude_jitter = 0.0, sample_rate = 25.0, seed = 0))]
    fn synth(
        duration: f64,
        mean_period: f64,
        period_jitter: f64,
        amplitude_jitter: f64,
        sample_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let p = SynthParams { duration, mean_period, period_jitter, amplitude_jitter, sample_rate, seed };
        Ok(PySignal(respiration::synth_breathing(&p).py()?))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PySignal(respiration::BreathingSignal::read_csv(&path).py()?))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_csv(&path).py()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }

    #[getter]
    fn amplitudes(&self) -> Vec<f64> {
        self.0.amplitudes.clone()
    }

    #[getter]
    fn cycle_starts(&self) -> Vec<usize> {
        self.0.cycle_starts.clone()
    }

    fn amplitude_at(&self, t: f64) -> f64 {
        self.0.amplitude_at(t)
    }

    /// Phase index of every time in `view_times`, binned by cycle time.
    fn phase_sort(&self, view_times: Vec<f64>, n_phases: usize) -> PyResult<Vec<usize>> {
        Ok(respiration::phase_sort(&self.0, &view_times, n_phases).py()?.phase_of_view)
    }

    /// Phase index of every time in `view_times`, binned by amplitude and breathing direction.
    fn amplitude_sort(&self, view_times: Vec<f64>, n_phases: usize) -> PyResult<Vec<usize>> {
        Ok(respiration::amplitude_sort(&self.0, &view_times, n_phases).py()?.map.phase_of_view)
    }
}

#[pyclass(name = "ScanGeometry", module = "rstar4d", from_py_object)]
#[derive(Clone)]
struct PyGeometry(scanner::ScanGeometry);

#[pymethods]
impl PyGeometry {
    #[staticmethod]
    fn desk() -> Self {
        PyGeometry(scanner::ScanGeometry::desk())
    }

    #[staticmethod]
    fn clinical() -> Self {
        PyGeometry(scanner::ScanGeometry::clinical())
    }

    #[getter]
    fn views_per_turn(&self) -> usize {
        self.0.views_per_turn
    }

    #[setter]
    fn set_views_per_turn(&mut self, n: usize) -> PyResult<()> {
        let mut g = self.0;
        g.views_per_turn = n;
        g.validate().py()?;
        self.0 = g;
        Ok(())
    }

    #[getter]
    fn detector_channels(&self) -> [usize; 2] {
        self.0.detector_channels
    }

    #[getter]
    fn rotation_time(&self) -> f64 {
        self.0.rotation_time
    }

    fn view_times(&self) -> Vec<f64> {
        self.0.view_times()
    }
}

#[pyclass(name = "ProjectionSet", module = "rstar4d", from_py_object)]
#[derive(Clone)]
struct PyProjections(scanner::ProjectionSet);

#[pymethods]
impl PyProjections {
    /// Gated scan of a breathing phantom. With `quantize`, each view sees its
    /// phase's ground-truth volume.
    #[staticmethod]
    #[pyo3(signature = (phantom, signal, geometry, dims, spacing, n_phases = 10, quantize = true, noise_sd = 0.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn simulate(
        phantom: &PyPhantom,
        signal: &PySignal,
        geometry: &PyGeometry,
        dims: [usize; 3],
        spacing: [f64; 3],
        n_phases: usize,
        quantize: bool,
        noise_sd: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let opts = ScanOptions { n_phases, quantize, noise_sd, seed, ..Default::default() };
        let g = grid(dims, spacing)?;
        Ok(PyProjections(scanner::simulate_4d_scan(&phantom.0, &signal.0, &geometry.0, &g, &opts).py()?))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyProjections(scanner::ProjectionSet::read_rsp(&path).py()?))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_rsp(&path).py()
    }

    #[getter]
    fn geometry(&self) -> PyGeometry {
        PyGeometry(self.0.geometry)
    }

    fn __len__(&self) -> usize {
        self.0.views.len()
    }

    fn angles(&self) -> Vec<f64> {
        self.0.angles()
    }

    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    /// Phase label of each view, `None` for unsorted views.
    fn phases(&self) -> Vec<Option<usize>> {
        self.0.views.iter().map(|v| v.phase).collect()
    }

    /// Line integrals of view `k`, detector rows (v) by columns (u), u fastest.
    fn view(&self, k: usize) -> PyResult<Vec<f32>> {
        self.0.views.get(k).map(|v| v.data.clone()).ok_or_else(|| PyValueError::new_err(format!("no view {k}")))
    }

    /// Breathing surrogate tracked from the projections.
    #[pyo3(signature = (max_shift = 16, row_fraction = 0.6))]
    fn amsterdam_shroud(&self, max_shift: usize, row_fraction: f64) -> PyResult<PySignal> {
        let r = respiration::amsterdam_shroud(&self.0, &ShroudParams { max_shift, row_fraction }).py()?;
        Ok(PySignal(r.signal))
    }
}

/// FDK of every view, in HU.
#[pyfunction]
fn fdk(projections: &PyProjections, dims: [usize; 3], spacing: [f64; 3]) -> PyResult<PyVolume> {
    Ok(PyVolume(recon::fdk(&projections.0, &grid(dims, spacing)?, &ReconOptions::default()).py()?))
}

/// Average image and gated phase images from the views' phase labels.
#[pyfunction]
fn reconstruct(projections: &PyProjections, n_phases: usize, dims: [usize; 3], spacing: [f64; 3]) -> PyResult<(PyVolume, PyVolume4D)> {
    let map = recon::phase_map_from_labels(&projections.0, n_phases).py()?;
    let (ave, phases) = recon::reconstruct_all(&projections.0, &map, &grid(dims, spacing)?, &ReconOptions::default()).py()?;
    Ok((PyVolume(ave), PyVolume4D(phases)))
}

#[pyfunction]
#[pyo3(signature = (a, b, window = 7, dynamic_range = 1500.0))]
fn ssim(a: &PyVolume, b: &PyVolume, window: usize, dynamic_range: f64) -> PyResult<f64> {
    Ok(metrics::ssim(&a.0, &b.0, window, dynamic_range).py()?.mean)
}

#[pyfunction]
fn ncc(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    metrics::ncc(&a, &b).py()
}

/// Per-view SSIM and NCC of the reprojected 4D image against measured views,
/// as `(view, phase, ssim, ncc)` tuples.
#[pyfunction]
fn projection_scores(recovered: &PyVolume4D, reference: &PyProjections) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let rows = metrics::projection_domain_eval(&recovered.0, &reference.0, scanner::MU_WATER).py()?;
    Ok(rows.into_iter().map(|r| (r.view, r.phase, r.ssim, r.ncc)).collect())
}

/// Streak energy over orientations in axial slice `k` of `image` relative to `reference`.
#[pyfunction]
fn streak_orientation(image: &PyVolume, reference: &PyVolume, k: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let [nz, ny, nx] = image.0.grid.dims;
    if k >= nz || !image.0.same_shape(&reference.0) {
        return Err(PyValueError::new_err("slice outside the volume or mismatched shapes"));
    }
    let p = rsa::streak_orientation(image.0.slice_z(k), reference.0.slice_z(k), ny, nx).py()?;
    Ok((rsa::OrientationProfile::orientations(), p.energy))
}

#[pyfunction]
fn circular_correlation(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    rsa::circular_correlation(&a, &b).py()
}

/// Separable 4D U-Net restoring gated reconstructions.
#[pyclass(name = "Network", module = "rstar4d")]
struct PyNetwork(net::Network<f32>);

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (channels = vec![16, 32, 64], seed = 0, residual = true))]
    fn new(channels: Vec<usize>, seed: u64, residual: bool) -> PyResult<Self> {
        let cfg = NetConfig { channels, residual, ..Default::default() };
        Ok(PyNetwork(net::Network::build(cfg, seed).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork(net::load_checkpoint(&path).py()?.0))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        net::save_checkpoint(&self.0, None, &path).py()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// Restore a gated 4D reconstruction, tiling along z when `chunk` is set.
    #[pyo3(signature = (degraded, average, chunk = None, overlap = 4))]
    fn restore(&self, degraded: &PyVolume4D, average: &PyVolume, chunk: Option<usize>, overlap: usize) -> PyResult<PyVolume4D> {
        let tile = chunk.map(|chunk| net::TileSpec { chunk, overlap });
        Ok(PyVolume4D(net::forward_full(&self.0, &degraded.0, &average.0, tile).py()?))
    }
}

/// Parsed and validated run configuration.
#[pyclass(name = "RunConfig", module = "rstar4d")]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        PyRunConfig(RunConfig::default())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig(RunConfig::load(&path).py()?))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig(RunConfig::from_toml(text).py()?))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.grid.dims
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.0.grid.spacing
    }
}

#[pymodule]
#[pyo3(name = "rstar4d")]
pub fn rstar4d_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyVolume4D>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PySignal>()?;
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyProjections>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(fdk, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(ncc, m)?)?;
    m.add_function(wrap_pyfunction!(projection_scores, m)?)?;
    m.add_function(wrap_pyfunction!(streak_orientation, m)?)?;
    m.add_function(wrap_pyfunction!(circular_correlation, m)?)?;
    Ok(())
}
