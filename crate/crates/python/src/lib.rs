use numpy::ndarray::{Array2, Array3, ArrayView3};
use numpy::{Complex64, IntoPyArray, PyArray2, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spectraldiff::dataset::{load_paired_dataset, Crop};
use spectraldiff::diffusion::{cosine_schedule, PerturbationMode};
use spectraldiff::flops;
use spectraldiff::fourier::{self, ComplexField, Field};
use spectraldiff::mask::{self, GridSpec};
use spectraldiff::metrics::{self, PeakMode, SsimMode};
use spectraldiff::nn::{self, Backbone, DenoiserConfig};
use spectraldiff::rain::{make_toy_dataset, ToyDatasetSpec};
use spectraldiff::sampler::{self, SamplerConfig};
use spectraldiff::train::{train_model, TrainConfig};
use spectraldiff::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn field_from(a: ArrayView3<'_, f64>) -> PyResult<Field> {
    let (h, w, c) = a.dim();
    Field::from_fn(h, w, c, |y, x, ch| a[[y, x, ch]]).map_err(to_py)
}

fn field_to<'py>(py: Python<'py>, f: &Field) -> Bound<'py, PyArray3<f64>> {
    let (h, w, c) = f.shape();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| f.get(y, x, ch)).into_pyarray(py)
}

fn grid_spec(name: &str) -> PyResult<GridSpec> {
    match name {
        "paper" => Ok(GridSpec::paper()),
        "toy" => Ok(GridSpec::toy()),
        _ => Err(PyValueError::new_err(format!("unknown grid `{name}` (paper, toy)"))),
    }
}

fn model_config(preset: &str, backbone: &str, base_channels: Option<usize>, steps: Option<usize>) -> PyResult<DenoiserConfig> {
    let mut cfg = match preset {
        "toy" => DenoiserConfig::toy(),
        "paper" => DenoiserConfig::paper(),
        _ => return Err(PyValueError::new_err(format!("unknown preset `{preset}` (toy, paper)"))),
    };
    cfg.backbone = match backbone {
        "product" => Backbone::Product,
        "conv" => Backbone::Conv,
        _ => return Err(PyValueError::new_err(format!("unknown backbone `{backbone}` (product, conv)"))),
    };
    cfg.base_channels = base_channels.unwrap_or(cfg.base_channels);
    cfg.steps = steps.unwrap_or(cfg.steps);
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Precomputed directional spectral masks, one per diffusion step.
#[pyclass(name = "MaskBank", module = "pyspectraldiff", frozen)]
struct PyMaskBank {
    inner: mask::MaskBank,
}

#[pymethods]
impl PyMaskBank {
    #[new]
    #[pyo3(signature = (height, width, grid = "toy"))]
    fn new(py: Python<'_>, height: usize, width: usize, grid: &str) -> PyResult<Self> {
        let spec = grid_spec(grid)?;
        let inner = py.detach(|| mask::build_bank(height, width, &spec)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mask::load_bank(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mask::save_bank(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Mask of step `d` (1-based) as an `(H, W)` array.
    fn mask<'py>(&self, py: Python<'py>, d: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let m = self.inner.mask(d).map_err(to_py)?;
        let (h, w) = (self.inner.height(), self.inner.width());
        Ok(Array2::from_shape_fn((h, w), |(y, x)| m.get(y, x)).into_pyarray(py))
    }

    /// `(radius, bandwidth, orientation, concentration)` of step `d`.
    fn params(&self, d: usize) -> PyResult<(f64, f64, f64, f64)> {
        let p = self.inner.step_params(d).map_err(to_py)?;
        Ok((p.radius, p.bandwidth, p.orientation, p.concentration))
    }

    fn __repr__(&self) -> String {
        format!("MaskBank({} masks, {}x{})", self.inner.len(), self.inner.height(), self.inner.width())
    }
}

/// Conditional noise-prediction U-Net.
#[pyclass(name = "Denoiser", module = "pyspectraldiff", frozen)]
struct PyDenoiser {
    inner: nn::DenoiserModel,
}

#[pymethods]
impl PyDenoiser {
    #[new]
    #[pyo3(signature = (preset = "toy", backbone = "product", base_channels = None, steps = None, seed = 0))]
    fn new(preset: &str, backbone: &str, base_channels: Option<usize>, steps: Option<usize>, seed: u64) -> PyResult<Self> {
        let cfg = model_config(preset, backbone, base_channels, steps)?;
        Ok(Self {
            inner: nn::DenoiserModel::new(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: nn::load_checkpoint(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        nn::save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.config().steps
    }

    /// Model configuration as JSON.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Predicted noise for `x` at step `d` given the rainy condition.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray3<'py, f64>,
        d: usize,
        cond: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let (x, cond) = (field_from(x.as_array())?, field_from(cond.as_array())?);
        let out = py.detach(|| self.inner.forward(&x, d, &cond)).map_err(to_py)?;
        Ok(field_to(py, &out))
    }

    /// Direction-weighted DDIM rain removal of one `(H, W, C)` image in `[0, 1]`.
    #[pyo3(signature = (rainy, bank, steps = 10, temperature = 1.0, seed = 0))]
    fn derain<'py>(
        &self,
        py: Python<'py>,
        rainy: PyReadonlyArray3<'py, f64>,
        bank: &PyMaskBank,
        steps: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let rainy = field_from(rainy.as_array())?;
        let cfg = SamplerConfig { steps, temperature };
        let out = py
            .detach(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sampler::derain(&rainy, &self.inner, &bank.inner, &cfg, &mut rng)
            })
            .map_err(to_py)?;
        Ok(field_to(py, &out))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Denoiser({}, base {}, D = {}, {} params)",
            c.backbone.name(),
            c.base_channels,
            c.steps,
            self.inner.num_params()
        )
    }
}

/// Trains a denoiser on `clean/` and `rainy/` PNG pairs under `data_dir`.
/// Returns the model and the per-iteration losses.
#[pyfunction]
#[pyo3(signature = (data_dir, bank, iterations = 3000, perturbation = "spectral_masked", lr = 2e-4, seed = 0, model = None))]
fn train(
    py: Python<'_>,
    data_dir: &str,
    bank: &PyMaskBank,
    iterations: usize,
    perturbation: &str,
    lr: f64,
    seed: u64,
    model: Option<&PyDenoiser>,
) -> PyResult<(PyDenoiser, Vec<f64>)> {
    let mode: PerturbationMode = perturbation.parse().map_err(to_py)?;
    let base = model.map(|m| m.inner.config().clone()).unwrap_or_else(DenoiserConfig::toy);
    let config = TrainConfig {
        model: base,
        iterations,
        perturbation: mode,
        lr,
        seed,
        ..TrainConfig::default()
    };
    let (inner, losses) = py
        .detach(|| {
            let data = load_paired_dataset(data_dir, Crop::None)?;
            let mut m = nn::DenoiserModel::new(config.model.clone(), config.seed)?;
            let report = train_model(&mut m, &data, &bank.inner, &config, |_| {})?;
            Ok::<_, Error>((m, report.losses.iter().map(|r| r.loss).collect()))
        })
        .map_err(to_py)?;
    Ok((PyDenoiser { inner }, losses))
}

/// Writes `n_pairs` synthetic 32x32 pairs and returns how many were written.
#[pyfunction]
#[pyo3(signature = (out_dir, n_pairs, seed = 0))]
fn make_toy_pairs(py: Python<'_>, out_dir: &str, n_pairs: usize, seed: u64) -> PyResult<usize> {
    let spec = ToyDatasetSpec::toy(n_pairs, seed);
    let manifest = py.detach(|| make_toy_dataset(&spec, out_dir)).map_err(to_py)?;
    Ok(manifest.pairs.len())
}

#[pyfunction]
#[pyo3(signature = (reference, estimate, paper_literal = false))]
fn psnr(reference: PyReadonlyArray3<'_, f64>, estimate: PyReadonlyArray3<'_, f64>, paper_literal: bool) -> PyResult<f64> {
    let peak = if paper_literal { PeakMode::PaperLiteral } else { PeakMode::Range };
    metrics::psnr(&field_from(reference.as_array())?, &field_from(estimate.as_array())?, peak).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, windowed = false))]
fn ssim(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>, windowed: bool) -> PyResult<f64> {
    let mode = if windowed { SsimMode::Windowed } else { SsimMode::Global };
    metrics::ssim(&field_from(a.as_array())?, &field_from(b.as_array())?, mode).map_err(to_py)
}

/// Unitary 2-D FFT of each channel of a real `(H, W, C)` array.
#[pyfunction]
fn fft2<'py>(py: Python<'py>, x: PyReadonlyArray3<'py, f64>) -> PyResult<Bound<'py, PyArray3<Complex64>>> {
    let s = fourier::fft2(&field_from(x.as_array())?);
    let (h, w, c) = s.shape();
    Ok(Array3::from_shape_fn((h, w, c), |(y, x, ch)| s.get(y, x, ch)).into_pyarray(py))
}

/// Unitary inverse of [`fft2`]; complex in general.
#[pyfunction]
fn ifft2<'py>(py: Python<'py>, s: PyReadonlyArray3<'py, Complex64>) -> PyResult<Bound<'py, PyArray3<Complex64>>> {
    let a = s.as_array();
    let (h, w, c) = a.dim();
    let mut spec = ComplexField::zeros(h, w, c).map_err(to_py)?;
    for ((y, x, ch), v) in a.indexed_iter() {
        spec.set(y, x, ch, *v);
    }
    let r = fourier::ifft2(&spec);
    Ok(Array3::from_shape_fn((h, w, c), |(y, x, ch)| r.get(y, x, ch)).into_pyarray(py))
}

/// `alpha_bar_d` for `d = 0..=steps` of the cosine schedule.
#[pyfunction]
fn cosine_alpha_bars(steps: usize) -> PyResult<Vec<f64>> {
    Ok(cosine_schedule(steps).map_err(to_py)?.alpha_bars().to_vec())
}

#[pyfunction]
fn conv_flops(c_in: u64, c_out: u64, h: u64, w: u64, k: u64) -> u64 {
    flops::conv_flops(c_in, c_out, h, w, k)
}

#[pyfunction]
fn product_flops(c: u64, h: u64, w: u64, ratio: u64) -> PyResult<u64> {
    flops::product_flops(c, h, w, ratio).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (c, ratio = 4.0))]
fn reduction_ratio(c: f64, ratio: f64) -> f64 {
    flops::reduction_ratio(c, ratio)
}

/// Per-layer FLOPs of both backbones as CSV.
#[pyfunction]
#[pyo3(signature = (preset = "toy", base_channels = None, height = 32, width = 32))]
fn flops_report(preset: &str, base_channels: Option<usize>, height: usize, width: usize) -> PyResult<String> {
    let cfg = model_config(preset, "product", base_channels, None)?;
    Ok(flops::model_report(&cfg, height, width).map_err(to_py)?.to_csv())
}

#[pymodule]
pub fn pyspectraldiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMaskBank>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(fft2, m)?)?;
    m.add_function(wrap_pyfunction!(ifft2, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(conv_flops, m)?)?;
    m.add_function(wrap_pyfunction!(product_flops, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(flops_report, m)?)?;
    Ok(())
}
