//! Python bindings over the core engine: dataset generation, noise
//! schedule, mask ops, metrics, and the gradient-verification harness.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use tpd_core::diffusion;
use tpd_core::gradcheck;
use tpd_core::mask::BinaryMask;
use tpd_core::metrics;
use tpd_core::nnet;
use tpd_core::synthdata::{self, GeneratorConfig};
use tpd_core::tensor::Tensor;
use tpd_core::tryon::{self, InpaintingMask, MaskProvenance};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_from(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::new(shape, data).map_err(err)
}

fn mask_from(data: Vec<u8>, height: usize, width: usize) -> PyResult<BinaryMask> {
    if data.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "mask needs {} entries, got {}",
            height * width,
            data.len()
        )));
    }
    let mut m = BinaryMask::zeros(height, width);
    for (i, v) in data.iter().enumerate() {
        match v {
            0 => {}
            1 => m.set(i / width, i % width, true),
            _ => return Err(PyValueError::new_err("mask entries must be 0 or 1")),
        }
    }
    Ok(m)
}

/// One generated person/garment pair with its annotations. Image
/// planes are row-major flat lists; masks are flat 0/1 lists.
#[pyclass(name = "Sample")]
struct PySample {
    inner: synthdata::TryOnSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.person.shape();
        (s[0], s[1], s[2])
    }

    #[getter]
    fn person(&self) -> Vec<f32> {
        self.inner.person.data().to_vec()
    }

    #[getter]
    fn garment(&self) -> Vec<f32> {
        self.inner.garment.data().to_vec()
    }

    #[getter]
    fn pose(&self) -> Vec<f32> {
        self.inner.pose.data().to_vec()
    }

    #[getter]
    fn dense(&self) -> Vec<f32> {
        self.inner.dense.data().to_vec()
    }

    #[getter]
    fn parse_mask(&self) -> Vec<u8> {
        self.inner.parse_mask.data().to_vec()
    }

    #[getter]
    fn bbox(&self) -> Vec<u8> {
        self.inner.bbox.data().to_vec()
    }

    #[getter]
    fn garment_silhouette(&self) -> Vec<u8> {
        self.inner.garment_sil.data().to_vec()
    }
}

/// Linear beta schedule with derived alpha-bar values.
#[pyclass(name = "NoiseSchedule")]
struct PySchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn beta(&self, t: usize) -> f64 {
        self.inner.beta(t)
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.inner.alpha_bar(t)
    }

    fn alpha_bars(&self) -> Vec<f64> {
        (0..self.inner.len()).map(|t| self.inner.alpha_bar(t)).collect()
    }
}

/// Deterministically generates one synthetic try-on sample.
#[pyfunction]
#[pyo3(signature = (seed, height=32, width=24, bbox_margin=1))]
fn gen_sample(seed: u64, height: usize, width: usize, bbox_margin: usize) -> PyResult<PySample> {
    let cfg = GeneratorConfig { height, width, bbox_margin };
    let inner = synthdata::gen_sample(seed, &cfg).map_err(err)?;
    Ok(PySample { inner })
}

#[pyfunction]
fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<PySchedule> {
    let inner = diffusion::make_schedule(timesteps, beta_start, beta_end).map_err(err)?;
    Ok(PySchedule { inner })
}

/// Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
#[pyfunction]
fn q_sample(
    x0: Vec<f32>,
    shape: Vec<usize>,
    t: usize,
    eps: Vec<f32>,
    sched: &PySchedule,
) -> PyResult<Vec<f32>> {
    let x0 = tensor_from(x0, shape.clone())?;
    let eps = tensor_from(eps, shape)?;
    Ok(diffusion::q_sample(&x0, t, &eps, &sched.inner).map_err(err)?.into_data())
}

/// Sinusoidal timestep embedding (sin half then cos half).
#[pyfunction]
fn timestep_embedding(t: usize, dim: usize, total: usize) -> PyResult<Vec<f64>> {
    Ok(nnet::timestep_embedding::<f64>(t, dim, total).map_err(err)?.into_data())
}

/// SSIM between two `[C,H,W]` images in [0,1].
#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    let a = tensor_from(a, shape.clone())?;
    let b = tensor_from(b, shape)?;
    metrics::ssim(&a, &b).map_err(err)
}

/// PSNR in dB; identical images return +inf.
#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    let a = tensor_from(a, shape.clone())?;
    let b = tensor_from(b, shape)?;
    metrics::psnr(&a, &b).map_err(err)
}

/// Intersection over union of two flat 0/1 masks.
#[pyfunction]
fn mask_iou(a: Vec<u8>, b: Vec<u8>, height: usize, width: usize) -> PyResult<f64> {
    let a = mask_from(a, height, width)?;
    let b = mask_from(b, height, width)?;
    Ok(metrics::mask_iou_masks(&a, &b))
}

/// Shape-aware interpolation between two nested inpaint regions
/// (flat 0/1 region masks); returns the blended region.
#[pyfunction]
fn augment_mask(
    parse_region: Vec<u8>,
    bbox_region: Vec<u8>,
    height: usize,
    width: usize,
    lam: f64,
) -> PyResult<Vec<u8>> {
    let parse = mask_from(parse_region, height, width)?;
    let bbox = mask_from(bbox_region, height, width)?;
    let out = tryon::augment_mask(
        &InpaintingMask::from_inpaint_region(&parse, MaskProvenance::Parse),
        &InpaintingMask::from_inpaint_region(&bbox, MaskProvenance::Bbox),
        lam,
    )
    .map_err(err)?;
    Ok(out.inpaint_region().data().to_vec())
}

/// Union of two inpaint regions.
#[pyfunction]
fn union_mask(a: Vec<u8>, b: Vec<u8>, height: usize, width: usize) -> PyResult<Vec<u8>> {
    let ma = mask_from(a, height, width)?;
    let mb = mask_from(b, height, width)?;
    let out = tryon::union_mask(
        &InpaintingMask::from_inpaint_region(&ma, MaskProvenance::PredictedStage1),
        &InpaintingMask::from_inpaint_region(&mb, MaskProvenance::Parse),
    )
    .map_err(err)?;
    Ok(out.inpaint_region().data().to_vec())
}

/// Branch-select compositing of `[3,H,W]` images under a keep mask.
#[pyfunction]
fn composite(
    generated: Vec<f32>,
    keep: Vec<u8>,
    original: Vec<f32>,
    height: usize,
    width: usize,
) -> PyResult<Vec<f32>> {
    let g = tensor_from(generated, vec![3, height, width])?;
    let o = tensor_from(original, vec![3, height, width])?;
    let k = mask_from(keep, height, width)?.to_tensor::<f32>();
    Ok(diffusion::composite(&g, &k, &o).map_err(err)?.into_data())
}

/// Runs the f64 finite-difference gradient verification and returns
/// (layer family, max relative error) pairs.
#[pyfunction]
#[pyo3(signature = (seed=1234))]
fn grad_check(seed: u64) -> PyResult<Vec<(String, f64)>> {
    let report = gradcheck::run_grad_check(seed).map_err(err)?;
    Ok(report.families.into_iter().map(|f| (f.family, f.max_rel_err)).collect())
}

#[pymodule]
fn tpd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(gen_sample, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(timestep_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(augment_mask, m)?)?;
    m.add_function(wrap_pyfunction!(union_mask, m)?)?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
