//! Python bindings. Arrays cross the boundary as flat row-major float lists
//! plus a shape list.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use latent_vsr::config::RunConfig;
use latent_vsr::degrade::{degrade_segment, DegradeConfig};
use latent_vsr::denoiser::{ConditioningBundle, DenoiserNetwork, ParamGroup};
use latent_vsr::metrics;
use latent_vsr::sampler::{super_resolve, SampleConfig};
use latent_vsr::schedule::{self, LatentSequence};
use latent_vsr::seam::{EncoderRegistry, SemanticEmbedding, SemanticEncoder, StubEncoder};
use latent_vsr::training::TrainingState;
use latent_vsr::video::VideoSegment;
use latent_vsr::{Error, Tensor};

type Array = (Vec<f64>, Vec<usize>);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> PyResult<Tensor> {
    Tensor::from_vec(shape, data).map_err(py_err)
}

fn array(t: Tensor) -> Array {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

fn video(data: Vec<f64>, shape: &[usize]) -> PyResult<VideoSegment> {
    VideoSegment::new(tensor(data, shape)?, "py", 0).map_err(py_err)
}

fn run_config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(t) => RunConfig::from_toml(t).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=1000, beta_start=1e-4, beta_end=0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner = schedule::make_schedule(steps, beta_start, beta_end).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alphas_cumprod(&self) -> Vec<f64> {
        self.inner.alphas_cumprod().to_vec()
    }

    fn q_sample(&self, z0: Vec<f64>, shape: Vec<usize>, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        let z0 = LatentSequence::new(tensor(z0, &shape)?).map_err(py_err)?;
        let eps = LatentSequence::new(tensor(eps, &shape)?).map_err(py_err)?;
        let zt = schedule::q_sample(&z0, t, &eps, &self.inner).map_err(py_err)?;
        Ok(zt.into_data().into_data())
    }

    /// `t_prev=None` is the final step.
    #[pyo3(signature = (z_t, eps_hat, shape, t, t_prev, noise))]
    fn reverse_step(
        &self,
        z_t: Vec<f64>,
        eps_hat: Vec<f64>,
        shape: Vec<usize>,
        t: usize,
        t_prev: Option<usize>,
        noise: Vec<f64>,
    ) -> PyResult<Vec<f64>> {
        let z = LatentSequence::new(tensor(z_t, &shape)?).map_err(py_err)?;
        let e = LatentSequence::new(tensor(eps_hat, &shape)?).map_err(py_err)?;
        let n = LatentSequence::new(tensor(noise, &shape)?).map_err(py_err)?;
        let out = schedule::ddpm_reverse_step(&z, &e, t, t_prev, &self.inner, &n).map_err(py_err)?;
        Ok(out.into_data().into_data())
    }
}

#[pyfunction]
fn subsample_timesteps(total: usize, steps: usize) -> PyResult<Vec<usize>> {
    schedule::subsample_timesteps(total, steps).map_err(py_err)
}

#[pyfunction]
fn denoising_loss(eps: Vec<f64>, eps_hat: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    let a = LatentSequence::new(tensor(eps, &shape)?).map_err(py_err)?;
    let b = LatentSequence::new(tensor(eps_hat, &shape)?).map_err(py_err)?;
    schedule::denoising_loss(&a, &b).map_err(py_err)
}

/// Frames are (L, 3, H, W) in `[0, 1]`.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    metrics::psnr(&video(a, &shape)?, &video(b, &shape)?).map_err(py_err)
}

#[pyfunction]
fn flicker_index(frames: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    metrics::flicker_index(&video(frames, &shape)?).map_err(py_err)
}

/// Returns the (L, W, 3) profile.
#[pyfunction]
fn temporal_profile(frames: Vec<f64>, shape: Vec<usize>, row: usize) -> PyResult<Array> {
    Ok(array(metrics::temporal_profile(&video(frames, &shape)?, row).map_err(py_err)?))
}

/// Degrades a high-quality segment; `config_toml` is a full run config.
#[pyfunction]
#[pyo3(signature = (frames, shape, seed, config_toml=None))]
fn degrade(frames: Vec<f64>, shape: Vec<usize>, seed: u64, config_toml: Option<&str>) -> PyResult<Array> {
    let cfg: DegradeConfig = run_config(config_toml)?.degrade;
    let lq = degrade_segment(&video(frames, &shape)?, seed, &cfg).map_err(py_err)?;
    Ok(array(lq.into_frames()))
}

/// Per-frame semantic tokens from the stub encoder, shape (L, N, width).
#[pyfunction]
#[pyo3(signature = (frames, shape, patch=2, width=16))]
fn stub_encode(frames: Vec<f64>, shape: Vec<usize>, patch: usize, width: usize) -> PyResult<Array> {
    let enc = StubEncoder::new(patch, width).map_err(py_err)?;
    let emb = enc.encode(&video(frames, &shape)?).map_err(py_err)?;
    Ok(array(emb.into_tensor()))
}

#[pyclass(name = "Denoiser", frozen)]
struct PyDenoiser {
    net: DenoiserNetwork,
}

#[pymethods]
impl PyDenoiser {
    /// Freshly initialized network from the `[denoiser]` section of a run config.
    #[new]
    #[pyo3(signature = (seed, config_toml=None))]
    fn new(seed: u64, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config_toml)?;
        let net = DenoiserNetwork::build(&cfg.denoiser, seed).map_err(py_err)?;
        Ok(Self { net })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Parameter counts keyed by `backbone`, `semantic`, `temporal`, `tsam`.
    fn group_param_counts(&self) -> Vec<(String, usize)> {
        [
            ("backbone", ParamGroup::Backbone),
            ("semantic", ParamGroup::Semantic),
            ("temporal", ParamGroup::Temporal),
            ("tsam", ParamGroup::Tsam),
        ]
        .into_iter()
        .map(|(k, g)| (k.to_string(), self.net.group_param_count(g)))
        .collect()
    }

    fn checksum(&self) -> String {
        self.net.params().checksum()
    }

    /// `z_t` and `lr` share `shape` (L, C, h, w); `semantic` is
    /// `(tokens, shape)` with shape (L, N, width).
    #[pyo3(signature = (z_t, lr, shape, timestep, semantic=None))]
    fn predict_noise(
        &self,
        z_t: Vec<f64>,
        lr: Vec<f64>,
        shape: Vec<usize>,
        timestep: usize,
        semantic: Option<Array>,
    ) -> PyResult<Vec<f64>> {
        let z = LatentSequence::new(tensor(z_t, &shape)?).map_err(py_err)?;
        let cond = ConditioningBundle {
            lr_latents: LatentSequence::new(tensor(lr, &shape)?).map_err(py_err)?,
            semantic: semantic
                .map(|(d, s)| SemanticEmbedding::new(tensor(d, &s)?).map_err(py_err))
                .transpose()?,
            timestep,
        };
        let out = self.net.predict_noise(&z, &cond).map_err(py_err)?;
        Ok(out.into_data().into_data())
    }
}

/// A trained checkpoint written by `latent-vsr train`.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    state: TrainingState,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: TrainingState::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.state.stage.number()
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    /// Super-resolves (L, 3, h, w) low-quality frames to (L, 3, 4h, 4w).
    #[pyo3(signature = (frames, shape, seed, steps=None, semantic=true, tsam=true))]
    fn super_resolve(
        &self,
        py: Python<'_>,
        frames: Vec<f64>,
        shape: Vec<usize>,
        seed: u64,
        steps: Option<usize>,
        semantic: bool,
        tsam: bool,
    ) -> PyResult<Array> {
        let lq = video(frames, &shape)?;
        let run = &self.state.run;
        let net = self.state.net.with_toggles(semantic, true, tsam).map_err(py_err)?;
        let encoder = EncoderRegistry::default()
            .create(&run.encoder.id, &run.encoder.options())
            .map_err(py_err)?;
        let cfg = SampleConfig {
            steps: steps.unwrap_or(run.sample.steps),
            segment_length: run.sample.segment_length,
            seed,
        };
        let codec = &self.state.codec;
        let out = py
            .detach(|| {
                super_resolve(
                    &net,
                    codec,
                    Some(encoder.as_ref()),
                    &lq,
                    &schedule::NoiseSchedule::default(),
                    &cfg,
                )
            })
            .map_err(py_err)?;
        Ok(array(out.into_frames()))
    }
}

#[pymodule]
#[pyo3(name = "latent_vsr")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(subsample_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(denoising_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(flicker_index, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_profile, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(stub_encode, m)?)?;
    Ok(())
}
