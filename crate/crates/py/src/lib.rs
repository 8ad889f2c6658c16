//! Python bindings: tensors with the core kernels, pruning schedules and
//! policies, route sampling, segmentation metrics, and the synthetic data
//! generator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vitlab::pruning;
use vitlab::rng::Rng as CoreRng;
use vitlab::routing::{self, RouteMode};
use vitlab::tensor::Tensor as CoreTensor;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Dense f32 tensor, row-major. The binding owns plain buffers and builds
/// core tensors per operation, so it stays thread-safe for Python.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    data: Vec<f32>,
    shape: Vec<usize>,
}

impl PyTensor {
    fn core(&self) -> CoreTensor {
        CoreTensor::new(self.data.clone(), self.shape.clone())
    }

    fn from_core(t: CoreTensor) -> PyTensor {
        PyTensor {
            data: t.data().to_vec(),
            shape: t.shape().to_vec(),
        }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(PyValueError::new_err(format!(
                "shape {:?} does not match {} elements",
                shape,
                data.len()
            )));
        }
        Ok(PyTensor { data, shape })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        PyTensor {
            data: vec![0.0; n],
            shape,
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn data(&self) -> Vec<f32> {
        self.data.clone()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor::from_core(self.core().matmul(&other.core()).map_err(err)?))
    }

    fn masked_softmax(&self, mask: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor::from_core(
            self.core().masked_softmax(&mask.core()).map_err(err)?,
        ))
    }

    fn layer_norm(&self, gamma: &PyTensor, beta: &PyTensor, eps: f32) -> PyResult<PyTensor> {
        Ok(PyTensor::from_core(
            self.core().layer_norm(&gamma.core(), &beta.core(), eps).map_err(err)?,
        ))
    }

    fn gather_rows(&self, idx: Vec<usize>) -> PyResult<PyTensor> {
        Ok(PyTensor::from_core(self.core().gather_rows(&idx).map_err(err)?))
    }

    fn scatter_rows(&self, idx: Vec<usize>, base: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor::from_core(
            self.core().scatter_rows(&idx, &base.core()).map_err(err)?,
        ))
    }

    fn bilinear_resize(&self, out_h: usize, out_w: usize) -> PyResult<PyTensor> {
        Ok(PyTensor::from_core(
            self.core().bilinear_resize(out_h, out_w).map_err(err)?,
        ))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.shape)
    }
}

/// Seeded SplitMix64 generator.
#[pyclass(name = "Rng")]
struct PyRng {
    inner: CoreRng,
}

#[pymethods]
impl PyRng {
    #[new]
    #[pyo3(signature = (seed, stream = 0))]
    fn new(seed: u64, stream: u64) -> Self {
        PyRng {
            inner: CoreRng::new(seed, stream),
        }
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn next_f32(&mut self) -> f32 {
        self.inner.next_f32()
    }

    fn gumbel(&mut self) -> f32 {
        self.inner.gumbel_f32()
    }
}

/// Hierarchical keep-ratio schedule.
#[pyclass(name = "PruneSchedule")]
struct PySchedule {
    inner: pruning::PruneSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(first_block: usize, stage_len: usize, base_ratio: f64, depth: usize) -> PyResult<Self> {
        Ok(PySchedule {
            inner: pruning::PruneSchedule::new(first_block, stage_len, base_ratio, depth)
                .map_err(err)?,
        })
    }

    #[getter]
    fn per_block_ratio(&self) -> Vec<f64> {
        self.inner.per_block_ratio.clone()
    }

    fn stage_starts(&self) -> Vec<usize> {
        self.inner.stage_starts()
    }

    fn stage_keep_counts(&self, n_tokens: usize) -> Vec<usize> {
        self.inner.stage_keep_counts(n_tokens)
    }
}

/// Indices of the k largest scores (ties to the lower index), ascending.
#[pyfunction]
fn top_k_indices(scores: Vec<f32>, k: usize) -> PyResult<Vec<usize>> {
    let n = scores.len();
    vitlab::tensor::top_k_indices(&CoreTensor::new(scores, vec![n]), k).map_err(err)
}

/// Policy-to-attention mask with diagonal self-loops.
#[pyfunction]
fn policy_to_mask(policy: Vec<f32>) -> PyResult<PyTensor> {
    let n = policy.len();
    Ok(PyTensor::from_core(
        pruning::policy_to_mask(&CoreTensor::new(policy, vec![n])).map_err(err)?,
    ))
}

/// Straight-through Gumbel sample: (soft, hard) keep decisions.
#[pyfunction]
fn gumbel_st(logits: Vec<f32>, temperature: f32, seed: u64) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let n = logits.len();
    let mut rng = CoreRng::new(seed, 0);
    let pol = pruning::gumbel_st(&CoreTensor::new(logits, vec![n]), temperature, &mut rng)
        .map_err(err)?;
    Ok((pol.soft.data().to_vec(), pol.hard.data().to_vec()))
}

/// Sample a training route: (l, n, kept_idx, routed_idx).
#[pyfunction]
fn sample_route(
    depth: usize,
    n_tokens: usize,
    route_fraction: f32,
    mode: &str,
    seed: u64,
) -> PyResult<(usize, usize, Vec<usize>, Vec<usize>)> {
    let mode = match mode {
        "random" => RouteMode::Random,
        "fixed" => RouteMode::Fixed,
        other => return Err(PyValueError::new_err(format!("unknown route mode {other:?}"))),
    };
    let mut rng = CoreRng::new(seed, 0);
    let r = routing::sample_route(depth, n_tokens, route_fraction, mode, &mut rng).map_err(err)?;
    Ok((r.l, r.n, r.kept_idx, r.routed_idx))
}

/// Exact average precision over all thresholds.
#[pyfunction]
fn average_precision(scores: Vec<f32>, gt: Vec<f32>) -> PyResult<f64> {
    if scores.len() != gt.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(vitlab::seg::average_precision(&scores, &gt))
}

/// Dice coefficient of two binary masks.
#[pyfunction]
fn dice(pred: Vec<f32>, gt: Vec<f32>) -> PyResult<f64> {
    if pred.len() != gt.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(vitlab::seg::dice(&pred, &gt))
}

/// One synthetic vessel sample: (image, mask, h, w); image is 3·h·w floats
/// in [0,1], mask h·w binary.
#[pyfunction]
fn generate_sample(seed: u64, index: u64, h: usize, w: usize) -> (Vec<f32>, Vec<f32>, usize, usize) {
    let s = vitlab::data::generate_sample(seed, index, (h, w), &vitlab::data::GenParams::default());
    (s.image.data().to_vec(), s.mask.data().to_vec(), h, w)
}

#[pymodule]
fn vitlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRng>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(top_k_indices, m)?)?;
    m.add_function(wrap_pyfunction!(policy_to_mask, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_st, m)?)?;
    m.add_function(wrap_pyfunction!(sample_route, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    Ok(())
}
