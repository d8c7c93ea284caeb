//! Python bindings. Videos cross the boundary as [`Video`] objects holding a
//! `[frames, 3, H, W]` array; use `Video.from_flat` / `Video.tolist` to move
//! data in and out.

use std::path::PathBuf;

use lgcvd::conditioning::{self, plan_autoregression, Task};
use lgcvd::data;
use lgcvd::diffusion;
use lgcvd::io;
use lgcvd::metrics;
use lgcvd::model::{LgcModel, ModelConfig};
use lgcvd::numerics::Array;
use lgcvd::sampling;
use lgcvd::training::{self, TrainState, TrainingConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(module = "lgcvd", from_py_object)]
#[derive(Clone)]
pub struct Video {
    inner: Array<f32>,
}

#[pymethods]
impl Video {
    #[staticmethod]
    fn from_flat(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        if shape.len() != 4 {
            return Err(err(format!("expected [frames, channels, H, W], got {shape:?}")));
        }
        Ok(Self {
            inner: Array::from_vec(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Frames `start..end` as a new video.
    fn frames(&self, start: usize, end: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.slice_outer(start, end).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.shape()[0]
    }

    fn __repr__(&self) -> String {
        format!("Video(shape={:?})", self.inner.shape())
    }
}

#[pyclass(module = "lgcvd", frozen)]
pub struct NoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl NoiseSchedule {
    #[new]
    #[pyo3(signature = (steps = 1000))]
    fn new(steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: diffusion::NoiseSchedule::cosine(steps).map_err(err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.check(t, 0)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.inner.beta(t))
    }

    fn posterior_beta(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.inner.posterior_beta(t))
    }
}

impl NoiseSchedule {
    fn check(&self, t: usize, min: usize) -> PyResult<()> {
        if t < min || t > self.inner.steps() {
            return Err(err(format!("step {t} outside {min}..={}", self.inner.steps())));
        }
        Ok(())
    }
}

#[pyclass(module = "lgcvd", from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: LgcModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (height = 16, width = 16, base_width = 32, seed = 0))]
    fn new(height: usize, width: usize, base_width: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            height,
            width,
            base_width,
            groups: 8.min(base_width),
            ..ModelConfig::default()
        };
        Ok(Self {
            inner: LgcModel::new(config, seed).map_err(err)?,
        })
    }

    /// Model saved by `Trainer.save` or the `train` command.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_model(&path).map_err(err)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params().scalar_count()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.config().window()
    }

    #[getter]
    fn global_disabled(&self) -> bool {
        self.inner.global_disabled()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(_, n, _)| n.to_string()).collect()
    }

    fn disable_global_context(&mut self) {
        self.inner.disable_global_context();
    }
}

#[pyclass(module = "lgcvd")]
pub struct Trainer {
    inner: TrainState<f32>,
}

fn unwrap_clips(clips: Vec<PyRef<'_, Video>>) -> Vec<Array<f32>> {
    clips.iter().map(|c| c.inner.clone()).collect()
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (
        model, steps, learning_rate = 1e-4, batch_size = 8, seed = 0,
        stage_two = true, global_context = true, clip_len = 14,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &Model,
        steps: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        stage_two: bool,
        global_context: bool,
        clip_len: usize,
    ) -> PyResult<Self> {
        let cfg = model.inner.config();
        let config = TrainingConfig {
            max_steps: steps,
            learning_rate,
            batch_size,
            seed,
            stage_two,
            global_context,
            clip_len,
            cond_frames: cfg.cond_frames,
            pred_frames: cfg.pred_frames,
            ..TrainingConfig::default()
        };
        Ok(Self {
            inner: TrainState::new(model.inner.clone(), config).map_err(err)?,
        })
    }

    /// One two-stage update on exactly these clips; returns `(loss1, loss2)`.
    fn step(&mut self, clips: Vec<PyRef<'_, Video>>) -> PyResult<(f64, Option<f64>)> {
        let clips = unwrap_clips(clips);
        let r = self.inner.two_stage_step(&clips).map_err(err)?;
        Ok((r.loss1, r.loss2))
    }

    /// Runs until the step budget is spent; returns `(step, loss1, loss2)` rows.
    fn train(
        &mut self,
        py: Python<'_>,
        clips: Vec<PyRef<'_, Video>>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let clips = unwrap_clips(clips);
        let state = &mut self.inner;
        let curve = py
            .detach(|| training::train(state, &clips, |_, _| Ok(())))
            .map_err(err)?;
        Ok(curve.into_iter().map(|r| (r.step, r.loss1, r.loss2)).collect())
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn model(&self) -> Model {
        Model {
            inner: self.inner.model.clone(),
        }
    }

    /// Writes parameters, optimizer state and metadata next to `path`.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_train_state(&self.inner, &path).map_err(err)
    }
}

/// Samples `n` frames. `task` is `predict`, `interpolate` or `generate`;
/// `cond` supplies the given frames for the first two.
#[pyfunction]
#[pyo3(signature = (model, task, n, cond = None, steps = 100, seed = 0))]
fn sample(
    py: Python<'_>,
    model: &Model,
    task: &str,
    n: usize,
    cond: Option<&Video>,
    steps: usize,
    seed: u64,
) -> PyResult<Video> {
    let cfg = model.inner.config();
    let (p, k) = (cfg.cond_frames, cfg.pred_frames);
    let (task, p) = match task {
        "predict" => (Task::Predict, p),
        "interpolate" => (Task::Interpolate, p),
        "generate" => (Task::Generate { context: p }, 0),
        other => return Err(err(format!("unknown task {other:?}"))),
    };
    let plan = plan_autoregression(task, p, k, n).map_err(err)?;
    let given = match (p, cond) {
        (0, _) => Vec::new(),
        (_, None) => return Err(err("this task needs conditioning frames")),
        (_, Some(v)) => {
            if v.inner.shape()[0] < p {
                return Err(err(format!("need {p} conditioning frames, got {}", v.inner.shape()[0])));
            }
            let frame = v.inner.shape()[1..].to_vec();
            (0..p)
                .map(|i| {
                    v.inner
                        .slice_outer(i, i + 1)
                        .and_then(|f| f.reshape(frame.clone()))
                })
                .collect::<Result<_, _>>()
                .map_err(err)?
        }
    };
    let sched = diffusion::NoiseSchedule::cosine(1000).map_err(err)?;
    let inner = py
        .detach(|| sampling::sample_video(&model.inner, &sched, &plan, &given, steps, seed))
        .map_err(err)?;
    Ok(Video { inner })
}

#[pyfunction]
fn mask_value(j: i64, k: usize) -> PyResult<f64> {
    conditioning::mask_value(j, k).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (count, length = 14, size = 16, seed = 0))]
fn generate_dataset(count: usize, length: usize, size: usize, seed: u64) -> PyResult<Vec<Video>> {
    let clips = data::generate_dataset(count, length, size, seed).map_err(err)?;
    Ok(clips.into_iter().map(|c| Video { inner: c.frames }).collect())
}

#[pyfunction]
fn psnr(a: &Video, b: &Video) -> PyResult<(Vec<f64>, f64)> {
    let r = metrics::psnr(&a.inner, &b.inner).map_err(err)?;
    Ok((r.per_frame, r.mean))
}

#[pyfunction]
fn ssim(a: &Video, b: &Video) -> PyResult<(Vec<f64>, f64)> {
    let r = metrics::ssim(&a.inner, &b.inner).map_err(err)?;
    Ok((r.per_frame, r.mean))
}

#[pyfunction]
fn save_frames(video: &Video, dir: PathBuf) -> PyResult<()> {
    io::save_frames(&video.inner, &dir).map_err(err)
}

#[pyfunction]
fn load_frames(dir: PathBuf) -> PyResult<Video> {
    Ok(Video {
        inner: io::load_frames(&dir).map_err(err)?,
    })
}

/// Conditional video diffusion with local and global context.
#[pymodule(name = "lgcvd")]
pub mod lgcvd_module {
    #[pymodule_export]
    use super::{
        generate_dataset, load_frames, mask_value, psnr, sample, save_frames, ssim, Model,
        NoiseSchedule, Trainer, Video,
    };
}
